use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{Example, Target};
use super::{argmax2, Arch, ModelError, Params, Scalar};
use crate::datasetgen::PairRecord;
use crate::seqcore::Seed;
use crate::toklab::{encode_pair, AnyTokenizer, Tokenizer, MASK_ID, SEP_ID};

pub const MLM_MASK_RATE: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: Seed,
}

impl TrainConfig {
    /// lr 3e-4, batch 16, 1000 steps.
    pub fn pretrain() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 16,
            steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: Seed(0),
        }
    }

    /// lr 1e-4, batch 16, 1000 steps.
    pub fn finetune() -> Self {
        TrainConfig { lr: 1e-4, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam moments must be in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("eps must be positive; weight_decay and grad_clip non-negative");
        }
        Ok(())
    }

    /// Steps covering `epochs` passes over `n` examples.
    pub fn steps_for_epochs(&self, n: usize, epochs: usize) -> usize {
        n.div_ceil(self.batch_size) * epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepEvent {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

struct AdamW<S> {
    m: Vec<S>,
    v: Vec<S>,
    decay: Vec<bool>,
    t: i32,
}

impl<S: Scalar> AdamW<S> {
    fn new(p: &Params<S>) -> Self {
        let mut decay = vec![false; p.num_params()];
        for spec in p.specs() {
            if spec.decays() {
                decay[spec.range()].fill(true);
            }
        }
        AdamW { m: vec![S::zero(); p.num_params()], v: vec![S::zero(); p.num_params()], decay, t: 0 }
    }

    fn step(&mut self, p: &mut [S], g: &[S], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (S::c(cfg.beta1), S::c(cfg.beta2));
        let c1 = S::one() - b1.powi(self.t);
        let c2 = S::one() - b2.powi(self.t);
        let (lr, eps, wd) = (S::c(cfg.lr), S::c(cfg.eps), S::c(cfg.lr * cfg.weight_decay));
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (S::one() - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (S::one() - b2) * g[i] * g[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            if self.decay[i] {
                p[i] -= wd * p[i];
            }
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

impl<S: Scalar> Params<S> {
    /// Runs `cfg.steps` AdamW updates on batches from `batch_for(step)`.
    pub fn train(
        &mut self,
        cfg: &TrainConfig,
        mut batch_for: impl FnMut(usize) -> Vec<Example>,
        mut on_step: impl FnMut(&StepEvent),
    ) -> Result<TrainOutcome, ModelError> {
        cfg.validate()?;
        let mut opt = AdamW::new(self);
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let batch = batch_for(step);
            let (loss, mut grad) = match self.loss_and_grad(&batch) {
                Ok(r) => r,
                Err(ModelError::NonFiniteLoss) => return Err(ModelError::DivergedLoss { step }),
                Err(e) => return Err(e),
            };
            let norm = grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(ModelError::DivergedLoss { step });
            }
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                let k = S::c(cfg.grad_clip / norm);
                grad.iter_mut().for_each(|g| *g *= k);
            }
            opt.step(&mut self.data, &grad, cfg);
            losses.push(loss.f64());
            on_step(&StepEvent { step, loss: loss.f64(), grad_norm: norm, lr: cfg.lr });
        }
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::DivergedLoss { step: cfg.steps });
        }
        Ok(TrainOutcome { losses })
    }

    /// Two class logits for a record, encoded with the model's pair layout.
    pub fn classify_record<T: Tokenizer + ?Sized>(&self, tok: &T, rec: &PairRecord) -> Result<[S; 2], ModelError> {
        let cfg = self.config();
        self.forward_classify(&encode_pair(tok, rec, cfg.arch.pair_mode(), cfg.max_seq_len))
    }

    /// Argmax label of the classification head.
    pub fn predict<T: Tokenizer + ?Sized>(&self, tok: &T, rec: &PairRecord) -> Result<u8, ModelError> {
        self.classify_record(tok, rec).map(argmax2)
    }

    /// Predictions for every record, computed in parallel, in input order.
    pub fn predict_all<T: Tokenizer + Sync + ?Sized>(
        &self,
        tok: &T,
        recs: &[PairRecord],
    ) -> Result<Vec<u8>, ModelError> {
        recs.par_iter().map(|r| self.predict(tok, r)).collect()
    }
}

/// Fraction of records whose prediction equals the stored label.
pub fn accuracy_on<S: Scalar, T: Tokenizer + Sync + ?Sized>(
    params: &Params<S>,
    tok: &T,
    recs: &[PairRecord],
) -> Result<f64, ModelError> {
    if recs.is_empty() {
        return Err(ModelError::Empty);
    }
    let preds = params.predict_all(tok, recs)?;
    Ok(preds.iter().zip(recs).filter(|(p, r)| **p == r.label).count() as f64 / recs.len() as f64)
}

/// Full-parameter fine-tuning on labelled pairs. Each epoch visits the
/// records in a fresh seeded order; batches are consecutive slices of the
/// concatenated epoch orders.
pub fn finetune<S: Scalar, T: Tokenizer + ?Sized>(
    params: &mut Params<S>,
    tok: &T,
    recs: &[PairRecord],
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepEvent),
) -> Result<TrainOutcome, ModelError> {
    if recs.is_empty() {
        return Err(ModelError::Empty);
    }
    let mc = params.config().clone();
    let encoded: Vec<(Vec<u32>, u8)> =
        recs.iter().map(|r| (encode_pair(tok, r, mc.arch.pair_mode(), mc.max_seq_len), r.label)).collect();
    let n = encoded.len();
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let dropout_on = mc.dropout > 0.0;
    let seed = cfg.seed;
    params.train(
        cfg,
        |step| {
            let start = step * cfg.batch_size;
            while order.len() < start + cfg.batch_size {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut seed.rng("finetune/epoch", epoch));
                order.extend(perm);
                epoch += 1;
            }
            (start..start + cfg.batch_size)
                .map(|k| {
                    let (ids, label) = &encoded[order[k]];
                    Example {
                        ids: ids.clone(),
                        target: Target::Class(*label),
                        dropout: dropout_on.then(|| seed.derive("finetune/dropout", k as u64)),
                    }
                })
                .collect()
        },
        on_step,
    )
}

/// Token stream of a corpus: each document encoded, joined with `[SEP]`.
pub fn corpus_stream<T: Tokenizer + ?Sized, D: AsRef<str>>(tok: &T, docs: &[D]) -> Vec<u32> {
    let mut out = Vec::new();
    for d in docs {
        let d = d.as_ref();
        if d.trim().is_empty() {
            continue;
        }
        out.extend(tok.encode(d));
        out.push(SEP_ID);
    }
    out
}

/// Corpora and sampling weights for mixture pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusMix {
    pub names: Vec<String>,
    pub streams: Vec<Vec<u32>>,
    pub weights: Vec<f64>,
}

impl CorpusMix {
    pub fn new(entries: Vec<(String, Vec<u32>, f64)>) -> Result<Self, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::Empty);
        }
        let mut mix = CorpusMix { names: vec![], streams: vec![], weights: vec![] };
        for (name, stream, w) in entries {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(ModelError::BadConfig(format!("weight of {name} must be non-negative")));
            }
            if w > 0.0 && stream.len() < 2 {
                return Err(ModelError::BadConfig(format!("corpus {name} has fewer than two tokens")));
            }
            mix.names.push(name);
            mix.streams.push(stream);
            mix.weights.push(w);
        }
        if mix.weights.iter().sum::<f64>() <= 0.0 {
            return Err(ModelError::BadConfig("mixture weights sum to zero".into()));
        }
        Ok(mix)
    }

    pub fn single(name: &str, stream: Vec<u32>) -> Result<Self, ModelError> {
        Self::new(vec![(name.to_string(), stream, 1.0)])
    }
}

/// Draws fixed-length training windows from a [`CorpusMix`]. The slot at
/// `(step, slot)` always consumes the same draws, so a corpus with weight 0
/// leaves the other corpora's batches untouched.
pub struct MixtureSampler<'a> {
    mix: &'a CorpusMix,
    cumulative: Vec<f64>,
    window: usize,
    seed: Seed,
}

impl<'a> MixtureSampler<'a> {
    pub fn new(mix: &'a CorpusMix, window: usize, seed: Seed) -> Self {
        let total: f64 = mix.weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = mix
            .weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        MixtureSampler { mix, cumulative, window, seed }
    }

    /// Corpus index and token window for one batch slot.
    pub fn sample(&self, step: usize, slot: usize) -> (usize, Vec<u32>) {
        let mut rng = self.seed.derive("mixture", step as u64).rng("slot", slot as u64);
        let u: f64 = rng.random();
        let last_live = self.mix.weights.iter().rposition(|&w| w > 0.0).expect("positive weight");
        let c = self.cumulative.iter().position(|&c| u < c).unwrap_or(last_live);
        let c = if self.mix.weights[c] > 0.0 { c } else { last_live };
        let stream = &self.mix.streams[c];
        let len = self.window.min(stream.len());
        let start = rng.random_range(0..=stream.len() - len);
        (c, stream[start..start + len].to_vec())
    }
}

/// Builds one LM example from a window: next-token targets for the
/// decoder, 15% masked positions for the encoder.
fn lm_example(arch: Arch, window: Vec<u32>, seed: Seed, dropout: bool) -> Example {
    let dropout = dropout.then(|| seed.derive("dropout", 0));
    match arch {
        Arch::DecoderCausal => {
            let targets = (0..window.len() - 1).map(|t| (t, window[t + 1])).collect();
            Example { ids: window, target: Target::Lm(targets), dropout }
        }
        Arch::EncoderBidir => {
            let mut rng = seed.rng("mlm", 0);
            let mut chosen: Vec<usize> = (0..window.len()).filter(|_| rng.random::<f64>() < MLM_MASK_RATE).collect();
            if chosen.is_empty() {
                chosen.push(rng.random_range(0..window.len()));
            }
            let mut ids = window;
            let targets = chosen
                .into_iter()
                .map(|p| {
                    let t = (p, ids[p]);
                    ids[p] = MASK_ID;
                    t
                })
                .collect();
            Example { ids, target: Target::Lm(targets), dropout }
        }
    }
}

/// Language-model pretraining on windows of `max_seq_len` tokens drawn from
/// the mixture in proportion to its weights.
pub fn pretrain_mixture<S: Scalar>(
    params: &mut Params<S>,
    mix: &CorpusMix,
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepEvent),
) -> Result<TrainOutcome, ModelError> {
    let mc = params.config().clone();
    if let Some(&bad) = mix.streams.iter().flatten().find(|&&id| id as usize >= mc.vocab_size) {
        return Err(ModelError::IdOutOfRange { id: bad, vocab: mc.vocab_size });
    }
    let sampler = MixtureSampler::new(mix, mc.max_seq_len, cfg.seed);
    let dropout = mc.dropout > 0.0;
    params.train(
        cfg,
        |step| {
            (0..cfg.batch_size)
                .map(|slot| {
                    let (_, w) = sampler.sample(step, slot);
                    lm_example(mc.arch, w, cfg.seed.derive("pretrain", (step * cfg.batch_size + slot) as u64), dropout)
                })
                .collect()
        },
        on_step,
    )
}

impl<S: Scalar> Params<S> {
    /// Mean LM loss over consecutive windows of a held-out stream.
    pub fn eval_lm_loss(&self, stream: &[u32], seed: Seed) -> Result<f64, ModelError> {
        let w = self.config().max_seq_len;
        if stream.len() < 2 {
            return Err(ModelError::Empty);
        }
        let batch: Vec<Example> = stream
            .chunks(w)
            .filter(|c| c.len() >= 2)
            .enumerate()
            .map(|(i, c)| lm_example(self.config().arch, c.to_vec(), seed.derive("eval-lm", i as u64), false))
            .collect();
        Ok(self.loss(&batch)?.f64())
    }
}

/// Adds `tokens` to the tokenizer and grows the model to match. The
/// tokenizer may add more entries than requested (BPE adds the merge chain
/// a token needs); the model grows by however many it added.
pub fn extend_model_and_tokenizer<S: Scalar>(
    params: &Params<S>,
    tok: &mut AnyTokenizer,
    tokens: &[String],
    seed: Seed,
) -> Result<(Params<S>, Vec<String>), ModelError> {
    if tok.vocab_len() != params.config().vocab_size {
        return Err(ModelError::VocabMismatch { tokenizer: tok.vocab_len(), model: params.config().vocab_size });
    }
    for t in tokens {
        if tok.contains(t) {
            return Err(ModelError::DuplicateToken(t.clone()));
        }
    }
    let added = tok.extend(tokens).map_err(|e| ModelError::BadConfig(e.to_string()))?;
    let grown = params.extend_vocab(added.len(), seed);
    debug_assert_eq!(grown.config().vocab_size, tok.vocab_len());
    Ok((grown, added))
}
