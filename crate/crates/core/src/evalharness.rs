//! Accuracy, confusion matrices, an exact binomial test against chance,
//! label-swap detection, and the experiment grid that produces a
//! base-model × pretrain × finetune × test table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasetgen::{self, PairRecord};
use crate::model::{self, Arch, CorpusMix, ModelConfig, Params, Scalar, TrainConfig};
use crate::seqcore::{read_fasta, Seed};
use crate::toklab::{AnyTokenizer, Tokenizer};

/// Two-sided p-value at or above which a result counts as indistinguishable
/// from chance.
pub const RANDOM_ALPHA: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{preds} predictions for {golds} labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no examples")]
    Empty,
    #[error("labels must be 0 or 1")]
    NonBinary,
    #[error("invalid counts: {correct} of {n}")]
    BadCounts { correct: u64, n: u64 },
    #[error("p0 must be in (0, 1)")]
    BadP0,
    #[error("grid: {0}")]
    Grid(String),
    #[error("report csv: {0}")]
    Csv(String),
}

fn check(preds: &[u8], golds: &[u8]) -> Result<(), EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    if preds.iter().chain(golds).any(|&l| l > 1) {
        return Err(EvalError::NonBinary);
    }
    Ok(())
}

pub fn accuracy(preds: &[u8], golds: &[u8]) -> Result<f64, EvalError> {
    check(preds, golds)?;
    Ok(preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64)
}

/// 2×2 counts, `counts[gold][pred]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Confusion {
    pub counts: [[u64; 2]; 2],
}

impl Confusion {
    pub fn n(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.n() as f64
    }

    /// `[[tn, fp], [fn, tp]]` as CSV with a header row.
    pub fn to_csv_block(&self) -> String {
        let c = &self.counts;
        format!("gold\\pred,0,1\n0,{},{}\n1,{},{}\n", c[0][0], c[0][1], c[1][0], c[1][1])
    }
}

pub fn confusion(preds: &[u8], golds: &[u8]) -> Result<Confusion, EvalError> {
    check(preds, golds)?;
    let mut m = Confusion::default();
    for (&p, &g) in preds.iter().zip(golds) {
        m.counts[g as usize][p as usize] += 1;
    }
    Ok(m)
}

fn log_sum_exp(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln P(X = i)` for every `i` in `0..=n`, X ~ Binomial(n, p0). Built by
/// the ratio recurrence outward from the mode so no factorial overflows.
fn binomial_log_pmf(n: u64, p0: f64) -> Vec<f64> {
    let n_us = n as usize;
    let mode = (((n + 1) as f64) * p0).floor().min(n as f64) as usize;
    let (lp, lq) = (p0.ln(), (1.0 - p0).ln());
    let mut log_choose = 0.0;
    for i in 1..=mode {
        log_choose += ((n_us - mode + i) as f64 / i as f64).ln();
    }
    let mut out = vec![0.0; n_us + 1];
    out[mode] = log_choose + mode as f64 * lp + (n_us - mode) as f64 * lq;
    let odds = lp - lq;
    for i in mode..n_us {
        out[i + 1] = out[i] + ((n_us - i) as f64 / (i + 1) as f64).ln() + odds;
    }
    for i in (0..mode).rev() {
        out[i] = out[i + 1] - ((n_us - i) as f64 / (i + 1) as f64).ln() - odds;
    }
    out
}

/// Exact two-sided binomial test, `min(1, 2·min(P(X ≤ k), P(X ≥ k)))`,
/// against chance accuracy 0.5.
pub fn binomial_test(correct: u64, n: u64) -> Result<f64, EvalError> {
    binomial_test_p0(correct, n, 0.5)
}

pub fn binomial_test_p0(correct: u64, n: u64, p0: f64) -> Result<f64, EvalError> {
    if n == 0 || correct > n {
        return Err(EvalError::BadCounts { correct, n });
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(EvalError::BadP0);
    }
    let lp = binomial_log_pmf(n, p0);
    let k = correct as usize;
    let total = log_sum_exp(lp.iter().copied());
    let lower = log_sum_exp(lp[..=k].iter().copied());
    let upper = log_sum_exp(lp[k..].iter().copied());
    let p = (2.0 * (lower.min(upper) - total).exp()).min(1.0);
    Ok(p.max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapCheck {
    pub swap_detected: bool,
    pub direct_accuracy: f64,
    pub swapped_accuracy: f64,
    pub best_accuracy: f64,
    /// Binomial p-value of the swapped mapping against chance.
    pub swapped_p_value: f64,
}

/// Accuracy under both label mappings. A swap is reported only when the
/// swapped mapping is better and significantly above chance.
pub fn label_swap_check(preds: &[u8], golds: &[u8]) -> Result<SwapCheck, EvalError> {
    let direct = accuracy(preds, golds)?;
    let n = preds.len() as u64;
    let swapped_correct = preds.iter().zip(golds).filter(|(p, g)| p != g).count() as u64;
    let swapped = swapped_correct as f64 / n as f64;
    let p = binomial_test(swapped_correct, n)?;
    Ok(SwapCheck {
        swap_detected: swapped > direct && p < RANDOM_ALPHA,
        direct_accuracy: direct,
        swapped_accuracy: swapped,
        best_accuracy: direct.max(swapped),
        swapped_p_value: p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: u64,
    pub accuracy: f64,
    pub confusion: Confusion,
    pub p_value_vs_random: f64,
    pub random_indistinguishable: bool,
    pub label_swap_detected: bool,
    pub swapped_accuracy: f64,
}

pub fn evaluate(preds: &[u8], golds: &[u8]) -> Result<EvalReport, EvalError> {
    let confusion = confusion(preds, golds)?;
    let swap = label_swap_check(preds, golds)?;
    let p = binomial_test(confusion.correct(), confusion.n())?;
    Ok(EvalReport {
        n: confusion.n(),
        accuracy: confusion.accuracy(),
        confusion,
        p_value_vs_random: p,
        random_indistinguishable: p >= RANDOM_ALPHA,
        label_swap_detected: swap.swap_detected,
        swapped_accuracy: swap.swapped_accuracy,
    })
}

// ---------------------------------------------------------------------------
// Experiment grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub path: PathBuf,
    /// `text` (one document per line) or `fasta` (one document per record).
    #[serde(default = "default_format")]
    pub format: String,
    /// Keep at most this many characters of each document.
    #[serde(default)]
    pub max_chars: Option<usize>,
}

fn default_format() -> String {
    "text".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub path: PathBuf,
    /// Take one part of the grid's seeded split instead of the whole file.
    #[serde(default)]
    pub split: Option<SplitPart>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Dev,
    Test,
}

/// Architecture without vocabulary size, which comes from the tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseModel {
    pub arch: Arch,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl BaseModel {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSettings {
    pub lr: f64,
    pub batch_size: usize,
    /// Optimizer steps per pretraining stage; for fine-tuning, `epochs`
    /// takes precedence when set.
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub epochs: Option<usize>,
}

impl StageSettings {
    fn train_config(&self, base: TrainConfig, seed: Seed, n_examples: usize) -> TrainConfig {
        let mut tc = TrainConfig { lr: self.lr, batch_size: self.batch_size, seed, ..base };
        tc.steps = match self.epochs {
            Some(e) => tc.steps_for_epochs(n_examples, e),
            None => self.steps,
        };
        tc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRow {
    pub base_model: String,
    pub tokenizer: String,
    /// `none`, a corpus name, `a+b` for an equal-weight mixture, `a:3+b:1`
    /// for explicit weights, and `>` to chain stages (`en>dna`).
    pub pretrain: String,
    /// Tokens added to tokenizer and model after the first pretraining
    /// stage.
    #[serde(default)]
    pub extend_vocab: Vec<String>,
    pub finetune: String,
    /// Column label → dataset name.
    pub tests: BTreeMap<String, String>,
}

/// Declarative grid as stored on disk. Paths are relative to the grid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub seeds: Vec<u64>,
    pub tokenizers: BTreeMap<String, PathBuf>,
    pub corpora: BTreeMap<String, CorpusSpec>,
    pub datasets: BTreeMap<String, DatasetRef>,
    pub models: BTreeMap<String, BaseModel>,
    pub pretrain: StageSettings,
    pub finetune: StageSettings,
    /// Fractions for `DatasetRef::split`, seeded by the first grid seed.
    /// Defaults to 80/10/10.
    #[serde(default)]
    pub split: datasetgen::SplitFractions,
    pub rows: Vec<GridRow>,
}

/// A grid with every file loaded.
#[derive(Debug, Clone)]
pub struct ExperimentGrid {
    pub spec: GridSpec,
    pub tokenizers: BTreeMap<String, AnyTokenizer>,
    pub corpora: BTreeMap<String, Vec<String>>,
    pub datasets: BTreeMap<String, LoadedDataset>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub records: Vec<PairRecord>,
    pub digest: String,
}

/// One pretraining stage: corpus names and weights.
pub type Stage = Vec<(String, f64)>;

pub fn parse_pretrain(s: &str) -> Result<Vec<Stage>, EvalError> {
    let s = s.trim();
    if s == "none" {
        return Ok(Vec::new());
    }
    s.split('>')
        .map(|stage| {
            stage
                .split('+')
                .map(|part| {
                    let part = part.trim();
                    let (name, w) = match part.split_once(':') {
                        Some((n, w)) => (
                            n.trim(),
                            w.trim().parse::<f64>().map_err(|_| EvalError::Grid(format!("bad weight in {part:?}")))?,
                        ),
                        None => (part, 1.0),
                    };
                    if name.is_empty() || !(w > 0.0) {
                        return Err(EvalError::Grid(format!("bad pretrain component {part:?}")));
                    }
                    Ok((name.to_string(), w))
                })
                .collect()
        })
        .collect()
}

fn read_to_string(p: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(p).map_err(|e| EvalError::Grid(format!("{}: {e}", p.display())))
}

pub fn load_corpus(spec: &CorpusSpec, base: &Path) -> Result<Vec<String>, EvalError> {
    let path = base.join(&spec.path);
    let text = read_to_string(&path)?;
    let mut docs: Vec<String> = match spec.format.as_str() {
        "text" => text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect(),
        "fasta" => read_fasta(text.as_bytes())
            .map_err(|e| EvalError::Grid(format!("{}: {e}", path.display())))?
            .into_iter()
            .map(|r| r.seq.as_str().to_string())
            .collect(),
        f => return Err(EvalError::Grid(format!("unknown corpus format {f:?}"))),
    };
    if let Some(m) = spec.max_chars {
        for d in &mut docs {
            if let Some((i, _)) = d.char_indices().nth(m) {
                d.truncate(i);
            }
        }
    }
    if docs.is_empty() {
        return Err(EvalError::Grid(format!("{}: empty corpus", path.display())));
    }
    Ok(docs)
}

impl GridSpec {
    pub fn parse(json: &str) -> Result<Self, EvalError> {
        serde_json::from_str(json).map_err(|e| EvalError::Grid(e.to_string()))
    }

    /// Checks internal references without touching the filesystem.
    pub fn validate(&self) -> Result<(), EvalError> {
        let err = |m: String| Err(EvalError::Grid(m));
        if self.seeds.is_empty() {
            return err("at least one seed is required".into());
        }
        for (i, row) in self.rows.iter().enumerate() {
            if !self.models.contains_key(&row.base_model) {
                return err(format!("row {i}: unknown base_model {:?}", row.base_model));
            }
            if !self.tokenizers.contains_key(&row.tokenizer) {
                return err(format!("row {i}: unknown tokenizer {:?}", row.tokenizer));
            }
            for stage in parse_pretrain(&row.pretrain)? {
                for (c, _) in stage {
                    if !self.corpora.contains_key(&c) {
                        return err(format!("row {i}: unknown corpus {c:?}"));
                    }
                }
            }
            for d in std::iter::once(&row.finetune).chain(row.tests.values()) {
                if !self.datasets.contains_key(d) {
                    return err(format!("row {i}: unknown dataset {d:?}"));
                }
            }
        }
        Ok(())
    }

    /// Loads every referenced file, resolving paths against `base`.
    pub fn load(self, base: &Path) -> Result<ExperimentGrid, EvalError> {
        self.validate()?;
        let mut tokenizers = BTreeMap::new();
        for (name, p) in &self.tokenizers {
            let text = read_to_string(&base.join(p))?;
            let tok = AnyTokenizer::parse(&text).map_err(|e| EvalError::Grid(format!("tokenizer {name}: {e}")))?;
            tokenizers.insert(name.clone(), tok);
        }
        let mut corpora = BTreeMap::new();
        for (name, spec) in &self.corpora {
            corpora.insert(name.clone(), load_corpus(spec, base)?);
        }
        let mut datasets = BTreeMap::new();
        let split_seed = Seed(self.seeds[0]);
        for (name, r) in &self.datasets {
            let path = base.join(&r.path);
            let file = std::fs::File::open(&path).map_err(|e| EvalError::Grid(format!("{}: {e}", path.display())))?;
            let records = datasetgen::read_jsonl(std::io::BufReader::new(file))
                .map_err(|e| EvalError::Grid(format!("{}: {e}", path.display())))?;
            let records = match r.split {
                None => records,
                Some(part) => {
                    let ds = datasetgen::PairDataset::from_records(
                        records,
                        datasetgen::Task::TextPair,
                        split_seed,
                        String::new(),
                    );
                    let s =
                        datasetgen::split(&ds, self.split, split_seed).map_err(|e| EvalError::Grid(e.to_string()))?;
                    match part {
                        SplitPart::Train => s.train.records,
                        SplitPart::Dev => s.dev.records,
                        SplitPart::Test => s.test.records,
                    }
                }
            };
            if records.is_empty() {
                return Err(EvalError::Grid(format!("dataset {name} is empty")));
            }
            let mut bytes = Vec::new();
            datasetgen::write_jsonl(&records, &mut bytes).expect("in-memory write");
            datasets.insert(name.clone(), LoadedDataset { digest: crate::sha256_hex(&bytes), records });
        }
        Ok(ExperimentGrid { spec: self, tokenizers, corpora, datasets })
    }
}

/// One table cell: a row evaluated on one test set under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub row: usize,
    pub base_model: String,
    pub pretrain: String,
    pub finetune: String,
    pub test: String,
    pub seed: u64,
    pub dataset_digest: String,
    pub outcome: Result<EvalReport, String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
}

/// Progress events from [`run_grid`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum GridEvent {
    PretrainStage { row: usize, seed: u64, stage: usize, corpora: String, steps: usize, final_loss: f64, secs: f64 },
    Finetune { row: usize, seed: u64, steps: usize, final_loss: f64, secs: f64 },
    Cell { row: usize, seed: u64, test: String, accuracy: Option<f64>, p_value: Option<f64> },
    Step { row: usize, seed: u64, phase: String, step: usize, loss: f64 },
}

struct Pretrained<S> {
    params: Params<S>,
    tokenizer: AnyTokenizer,
}

/// Runs every row under every seed: pretrain, fine-tune, then evaluate on
/// each test set. Rows with identical model, tokenizer, pretraining and
/// seed share one pretrained model. A row that fails records its error in
/// each of its cells and the grid moves on.
pub fn run_grid<S: Scalar>(grid: &ExperimentGrid, mut on_event: impl FnMut(&GridEvent)) -> GridReport {
    let spec = &grid.spec;
    let mut cache: BTreeMap<(String, String, String, Vec<String>, u64), Pretrained<S>> = BTreeMap::new();
    let mut cells = Vec::new();
    for &seed in &spec.seeds {
        for (ri, row) in spec.rows.iter().enumerate() {
            let key =
                (row.base_model.clone(), row.tokenizer.clone(), row.pretrain.clone(), row.extend_vocab.clone(), seed);
            let pre = match cache.get(&key) {
                Some(p) => Ok(p),
                None => match pretrain_row::<S>(grid, ri, seed, &mut on_event) {
                    Ok(p) => Ok(&*cache.entry(key).or_insert(p)),
                    Err(e) => Err(e),
                },
            };
            let outcome = pre.and_then(|pre| {
                let mut params = pre.params.clone();
                let ft = &grid.datasets[&row.finetune].records;
                let tc = spec.finetune.train_config(
                    TrainConfig::finetune(),
                    Seed(seed).derive("grid/finetune", ri as u64),
                    ft.len(),
                );
                let t0 = Instant::now();
                let out = model::finetune(&mut params, &pre.tokenizer, ft, &tc, |e| {
                    on_event(&GridEvent::Step { row: ri, seed, phase: "finetune".into(), step: e.step, loss: e.loss })
                })
                .map_err(|e| e.to_string())?;
                on_event(&GridEvent::Finetune {
                    row: ri,
                    seed,
                    steps: tc.steps,
                    final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
                    secs: t0.elapsed().as_secs_f64(),
                });
                Ok((params, &pre.tokenizer))
            });
            for (label, ds_name) in &row.tests {
                let ds = &grid.datasets[ds_name];
                let report = match &outcome {
                    Ok((params, tok)) => {
                        params.predict_all(*tok, &ds.records).map_err(|e| e.to_string()).and_then(|preds| {
                            let golds: Vec<u8> = ds.records.iter().map(|r| r.label).collect();
                            evaluate(&preds, &golds).map_err(|e| e.to_string())
                        })
                    }
                    Err(e) => Err(e.clone()),
                };
                on_event(&GridEvent::Cell {
                    row: ri,
                    seed,
                    test: label.clone(),
                    accuracy: report.as_ref().ok().map(|r| r.accuracy),
                    p_value: report.as_ref().ok().map(|r| r.p_value_vs_random),
                });
                cells.push(GridCell {
                    row: ri,
                    base_model: row.base_model.clone(),
                    pretrain: row.pretrain.clone(),
                    finetune: row.finetune.clone(),
                    test: label.clone(),
                    seed,
                    dataset_digest: ds.digest.clone(),
                    outcome: report,
                });
            }
        }
    }
    GridReport { cells }
}

fn pretrain_row<S: Scalar>(
    grid: &ExperimentGrid,
    ri: usize,
    seed: u64,
    on_event: &mut impl FnMut(&GridEvent),
) -> Result<Pretrained<S>, String> {
    let spec = &grid.spec;
    let row = &spec.rows[ri];
    let mut tok = grid.tokenizers[&row.tokenizer].clone();
    let cfg = spec.models[&row.base_model].config(tok.vocab_len());
    let root = Seed(seed).derive("grid/row", ri as u64);
    let mut params = Params::<S>::init(&cfg, root.derive("init", 0)).map_err(|e| e.to_string())?;
    let stages = parse_pretrain(&row.pretrain).map_err(|e| e.to_string())?;
    let extend_at = if stages.len() >= 2 { 1 } else { stages.len() };
    for (si, stage) in stages.iter().enumerate() {
        if si == extend_at && !row.extend_vocab.is_empty() {
            params = extend(&params, &mut tok, &row.extend_vocab, root)?;
        }
        let entries =
            stage.iter().map(|(c, w)| (c.clone(), model::corpus_stream(&tok, &grid.corpora[c]), *w)).collect();
        let mix = CorpusMix::new(entries).map_err(|e| e.to_string())?;
        let tc = spec.pretrain.train_config(TrainConfig::pretrain(), root.derive("pretrain", si as u64), 0);
        let t0 = Instant::now();
        let out = model::pretrain_mixture(&mut params, &mix, &tc, |e| {
            on_event(&GridEvent::Step { row: ri, seed, phase: format!("pretrain{si}"), step: e.step, loss: e.loss })
        })
        .map_err(|e| e.to_string())?;
        on_event(&GridEvent::PretrainStage {
            row: ri,
            seed,
            stage: si,
            corpora: mix.names.join("+"),
            steps: tc.steps,
            final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
            secs: t0.elapsed().as_secs_f64(),
        });
    }
    if extend_at == stages.len() && !row.extend_vocab.is_empty() {
        params = extend(&params, &mut tok, &row.extend_vocab, root)?;
    }
    Ok(Pretrained { params, tokenizer: tok })
}

fn extend<S: Scalar>(
    params: &Params<S>,
    tok: &mut AnyTokenizer,
    tokens: &[String],
    root: Seed,
) -> Result<Params<S>, String> {
    model::extend_model_and_tokenizer(params, tok, tokens, root.derive("extend", 0))
        .map(|(p, _)| p)
        .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Reports

const CSV_HEADER: [&str; 18] = [
    "row",
    "base_model",
    "pretrain",
    "finetune",
    "test",
    "seed",
    "dataset_digest",
    "n",
    "accuracy",
    "tn",
    "fp",
    "fn",
    "tp",
    "p_value",
    "random_indistinguishable",
    "label_swap_detected",
    "swapped_accuracy",
    "error",
];

/// One CSV line per cell. Floats use the shortest representation that
/// parses back to the same value.
pub fn report_csv(report: &GridReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory csv");
    for c in &report.cells {
        let mut rec = vec![
            c.row.to_string(),
            c.base_model.clone(),
            c.pretrain.clone(),
            c.finetune.clone(),
            c.test.clone(),
            c.seed.to_string(),
            c.dataset_digest.clone(),
        ];
        match &c.outcome {
            Ok(r) => {
                let m = r.confusion.counts;
                rec.extend([
                    r.n.to_string(),
                    r.accuracy.to_string(),
                    m[0][0].to_string(),
                    m[0][1].to_string(),
                    m[1][0].to_string(),
                    m[1][1].to_string(),
                    r.p_value_vs_random.to_string(),
                    r.random_indistinguishable.to_string(),
                    r.label_swap_detected.to_string(),
                    r.swapped_accuracy.to_string(),
                    String::new(),
                ]);
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 10));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

pub fn parse_report_csv(text: &str) -> Result<GridReport, EvalError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| EvalError::Csv(e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(EvalError::Csv("unexpected header".into()));
    }
    let mut cells = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| EvalError::Csv(e.to_string()))?;
        let bad = |f: &str| EvalError::Csv(format!("line {}: bad {f}", i + 2));
        let num = |k: usize, f: &str| rec[k].parse::<u64>().map_err(|_| bad(f));
        let real = |k: usize, f: &str| rec[k].parse::<f64>().map_err(|_| bad(f));
        let flag = |k: usize, f: &str| rec[k].parse::<bool>().map_err(|_| bad(f));
        let outcome = if rec[17].is_empty() {
            Ok(EvalReport {
                n: num(7, "n")?,
                accuracy: real(8, "accuracy")?,
                confusion: Confusion { counts: [[num(9, "tn")?, num(10, "fp")?], [num(11, "fn")?, num(12, "tp")?]] },
                p_value_vs_random: real(13, "p_value")?,
                random_indistinguishable: flag(14, "random_indistinguishable")?,
                label_swap_detected: flag(15, "label_swap_detected")?,
                swapped_accuracy: real(16, "swapped_accuracy")?,
            })
        } else {
            Err(rec[17].to_string())
        };
        cells.push(GridCell {
            row: rec[0].parse().map_err(|_| bad("row"))?,
            base_model: rec[1].to_string(),
            pretrain: rec[2].to_string(),
            finetune: rec[3].to_string(),
            test: rec[4].to_string(),
            seed: num(5, "seed")?,
            dataset_digest: rec[6].to_string(),
            outcome,
        });
    }
    Ok(GridReport { cells })
}

fn cell_text(outcome: &Result<EvalReport, String>) -> String {
    match outcome {
        Err(_) => "error".into(),
        Ok(r) => {
            let mut s = format!("{:.3}", r.accuracy);
            if r.random_indistinguishable {
                s.push_str(&format!(" ~rand(p={:.2})", r.p_value_vs_random));
            }
            if r.label_swap_detected {
                s.push_str(&format!(" swap(p={:.1e})", r.p_value_vs_random));
            }
            s
        }
    }
}

/// Column-aligned table: one line per (row, seed), one column per test
/// label. Cells indistinguishable from chance carry `~rand(p=…)`; cells
/// whose swapped labelling is significantly better carry `swap(p=…)`.
pub fn render_table(report: &GridReport) -> String {
    let mut tests: Vec<String> = Vec::new();
    for c in &report.cells {
        if !tests.contains(&c.test) {
            tests.push(c.test.clone());
        }
    }
    let mut header = vec!["base model".to_string(), "pretrain".into(), "finetune".into(), "seed".into()];
    header.extend(tests.iter().cloned());
    let mut lines: Vec<Vec<String>> = vec![header];
    let mut keys: Vec<(usize, u64)> = Vec::new();
    for c in &report.cells {
        if !keys.contains(&(c.row, c.seed)) {
            keys.push((c.row, c.seed));
        }
    }
    for (row, seed) in keys {
        let of_row: Vec<&GridCell> = report.cells.iter().filter(|c| c.row == row && c.seed == seed).collect();
        let first = of_row[0];
        let mut line = vec![first.base_model.clone(), first.pretrain.clone(), first.finetune.clone(), seed.to_string()];
        for t in &tests {
            line.push(
                of_row.iter().find(|c| &c.test == t).map(|c| cell_text(&c.outcome)).unwrap_or_else(|| "-".into()),
            );
        }
        lines.push(line);
    }
    let widths: Vec<usize> =
        (0..lines[0].len()).map(|k| lines.iter().map(|l| l[k].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cols: Vec<String> = l.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        out.push_str(cols.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            out.push('\n');
        }
    }
    let errors: Vec<&GridCell> = report.cells.iter().filter(|c| c.outcome.is_err()).collect();
    for c in errors {
        out.push_str(&format!("error row {} seed {} {}: {}\n", c.row, c.seed, c.test, c.outcome.as_ref().unwrap_err()));
    }
    out
}

/// Table text and CSV, built from the same cells.
pub fn render_report(report: &GridReport) -> (String, String) {
    (render_table(report), report_csv(report))
}

/// 2×2 confusion blocks, one per successful cell, each preceded by a
/// `# row=… seed=… test=…` comment line.
pub fn confusion_blocks(report: &GridReport) -> String {
    let mut out = String::new();
    for c in &report.cells {
        if let Ok(r) = &c.outcome {
            out.push_str(&format!("# row={} seed={} test={}\n", c.row, c.seed, c.test));
            out.push_str(&r.confusion.to_csv_block());
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use num_traits::{One, ToPrimitive, Zero};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Exact `2·min(P(X≤k), P(X≥k))` under Binomial(n, 1/2) with big
    /// integers, then converted to f64.
    fn exact_p(k: u64, n: u64) -> f64 {
        let mut c = BigUint::one();
        let mut lower = BigUint::zero();
        let mut upper = BigUint::zero();
        for i in 0..=n {
            if i <= k {
                lower += &c;
            }
            if i >= k {
                upper += &c;
            }
            c = c * BigUint::from(n - i) / BigUint::from(i + 1);
        }
        let tail = (lower.min(upper)) << 1u32;
        // tail / 2^n with 64 significant bits.
        let bits = tail.bits();
        let (mant, exp) = if bits > 64 {
            ((&tail >> (bits - 64)).to_f64().unwrap(), bits as i64 - 64 - n as i64)
        } else {
            (tail.to_f64().unwrap(), -(n as i64))
        };
        (mant * 2f64.powi(exp as i32)).min(1.0)
    }

    #[test]
    fn binomial_reference_points() {
        assert_eq!(binomial_test(50, 100).unwrap(), 1.0);
        let p60 = binomial_test(60, 100).unwrap();
        assert!((p60 - exact_p(60, 100)).abs() < 1e-3);
        assert!((p60 - 0.0569).abs() < 1e-3, "{p60}");
        assert!(binomial_test(82, 100).unwrap() < 1e-9);
        assert_eq!(binomial_test(0, 1).unwrap(), 1.0);
        assert!(binomial_test(101, 100).is_err());
        assert!(binomial_test(0, 0).is_err());
    }

    #[test]
    fn binomial_matches_exact_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut cases: Vec<(u64, u64)> =
            vec![(1, 1), (0, 10), (10, 10), (5000, 10_000), (5100, 10_000), (4800, 10_000)];
        for _ in 0..40 {
            let n = rng.random_range(1..=2000u64);
            let spread = ((n as f64).sqrt() * 3.0) as u64 + 1;
            let k = (n / 2 + rng.random_range(0..=spread)).min(n);
            cases.push((k, n));
        }
        for (k, n) in cases {
            let (ours, exact) = (binomial_test(k, n).unwrap(), exact_p(k, n));
            if exact > 1e-300 {
                assert!((ours - exact).abs() <= 1e-10 * exact, "({k}, {n}): {ours} vs {exact}");
            }
        }
    }

    proptest! {
        #[test]
        fn binomial_symmetric(n in 1u64..3000, frac in 0.0f64..=1.0) {
            let k = ((n as f64) * frac).round() as u64;
            let (a, b) = (binomial_test(k, n).unwrap(), binomial_test(n - k, n).unwrap());
            prop_assert!((a - b).abs() <= 1e-11 * a.max(b));
            prop_assert!(a > 0.0 && a <= 1.0);
        }

        #[test]
        fn confusion_consistency(pairs in prop::collection::vec((0u8..2, 0u8..2), 1..200)) {
            let (preds, golds): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let m = confusion(&preds, &golds).unwrap();
            prop_assert_eq!(m.n(), preds.len() as u64);
            prop_assert_eq!(m.accuracy(), accuracy(&preds, &golds).unwrap());
            prop_assert_eq!(m.counts[1][0] + m.counts[1][1], golds.iter().filter(|&&g| g == 1).count() as u64);
            prop_assert_eq!(m.counts[0][1] + m.counts[1][1], preds.iter().filter(|&&p| p == 1).count() as u64);
            let s = label_swap_check(&preds, &golds).unwrap();
            prop_assert!((s.direct_accuracy + s.swapped_accuracy - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_edges() {
        assert_eq!(accuracy(&[1, 0], &[1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1], &[1, 0]), Err(EvalError::LengthMismatch { preds: 1, golds: 2 }));
        assert_eq!(accuracy(&[], &[]), Err(EvalError::Empty));
        let m = confusion(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!((m.counts[0][1], m.counts[1][0]), (0, 0));
    }

    #[test]
    fn swap_detection() {
        let golds: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let inverted: Vec<u8> = golds.iter().map(|g| 1 - g).collect();
        let s = label_swap_check(&inverted, &golds).unwrap();
        assert!(s.swap_detected);
        assert_eq!(s.best_accuracy, 1.0);
        assert!(evaluate(&inverted, &golds).unwrap().label_swap_detected);
        assert!(!label_swap_check(&golds, &golds).unwrap().swap_detected);
        // Exactly at chance: never a swap.
        let half: Vec<u8> = (0..100).map(|i| u8::from(i < 50)).collect();
        assert!(!label_swap_check(&half, &golds).unwrap().swap_detected);
    }

    #[test]
    fn random_predictors_rarely_flag_swaps() {
        let golds: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
        let mut flagged = 0;
        for s in 0..200 {
            let mut rng = Seed(s).rng("random-predictor", 0);
            let preds: Vec<u8> = (0..200).map(|_| rng.random_range(0..2)).collect();
            flagged += usize::from(label_swap_check(&preds, &golds).unwrap().swap_detected);
        }
        // One-sided 5% tail of a two-sided test: expect about 2.5%.
        assert!(flagged <= 12, "{flagged}");
    }

    #[test]
    fn pretrain_strings() {
        assert_eq!(parse_pretrain("none").unwrap(), Vec::<Stage>::new());
        assert_eq!(parse_pretrain("en").unwrap(), vec![vec![("en".to_string(), 1.0)]]);
        assert_eq!(parse_pretrain("en+dna").unwrap(), vec![vec![("en".to_string(), 1.0), ("dna".to_string(), 1.0)]]);
        assert_eq!(
            parse_pretrain("en>dna:2").unwrap(),
            vec![vec![("en".to_string(), 1.0)], vec![("dna".to_string(), 2.0)]]
        );
        assert!(parse_pretrain("en+").is_err());
        assert!(parse_pretrain("en:0").is_err());
    }

    fn sample_report() -> GridReport {
        let golds: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let preds: Vec<u8> = (0..40).map(|i| u8::from(i % 3 == 0)).collect();
        let inverted: Vec<u8> = golds.iter().map(|g| 1 - g).collect();
        let cell = |test: &str, outcome| GridCell {
            row: 0,
            base_model: "dec, \"tiny\"".into(),
            pretrain: "en+dna".into(),
            finetune: "text".into(),
            test: test.into(),
            seed: 3,
            dataset_digest: "ab12".into(),
            outcome,
        };
        GridReport {
            cells: vec![
                cell("test-en", Ok(evaluate(&golds, &golds).unwrap())),
                cell("test-dna", Ok(evaluate(&preds, &golds).unwrap())),
                cell("test-swap", Ok(evaluate(&inverted, &golds).unwrap())),
                cell("test-x", Err("training diverged at step 3".into())),
            ],
        }
    }

    #[test]
    fn csv_roundtrip() {
        let r = sample_report();
        let (_, csv) = render_report(&r);
        assert_eq!(parse_report_csv(&csv).unwrap(), r);
        assert_eq!(parse_report_csv(&report_csv(&GridReport::default())).unwrap(), GridReport::default());
    }

    #[test]
    fn table_shape_and_flags() {
        let empty = render_table(&GridReport::default());
        assert_eq!(empty.lines().count(), 2);
        assert!(empty.starts_with("base model  pretrain  finetune  seed"));
        let t = render_table(&sample_report());
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].contains("test-en") && lines[0].contains("test-dna"));
        assert!(lines[2].contains("1.000"));
        assert!(lines[2].contains("~rand(p="));
        assert!(lines[2].contains("swap(p="));
        assert!(t.contains("error row 0 seed 3 test-x"));
        let blocks = confusion_blocks(&sample_report());
        assert_eq!(blocks.matches("gold\\pred,0,1").count(), 3);
    }
}
