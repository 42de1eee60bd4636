use std::path::{Path, PathBuf};

use genepair::align::HomologyConfig;
use genepair::datasetgen::{
    self, DnaPairConfig, DnaProteinConfig, NegativeSource, PairConstruction, PairRecord, Task, TextPairConfig,
};
use genepair::evalharness::{self, GridEvent, GridSpec};
use genepair::model::{self, Arch, CorpusMix, ModelConfig, Params, Scalar, StepEvent, TrainConfig};
use genepair::seqcore::{read_fasta, Seed};
use genepair::toklab::{self, AnyTokenizer, BpeTokenizer, Tokenizer, WordPieceTokenizer};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::config::{snapshot, Common, Precision};
use crate::error::CliError;
use crate::output::Run;
use crate::{
    Eval, ExtendVocab, Finetune, FitTruncation, GenDnaPairs, GenDnaProteinPairs, GenTextPairs, Globals, Grid, Pretrain,
    TokenStats, TrainTokenizer, VerifyDataset,
};

type Loaded<T> = (T, Common);

fn req<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing --{}", flag.replace('_', "-"))))
}

fn seed_of(c: &Common) -> u64 {
    c.seed.unwrap_or(0)
}

fn precision_of(c: &Common) -> Precision {
    c.precision.unwrap_or_default()
}

fn parse_enum<T: DeserializeOwned>(v: &str, flag: &str) -> Result<T, CliError> {
    serde_json::from_value(Value::String(v.to_string()))
        .map_err(|_| CliError::Usage(format!("--{flag}: unknown value {v:?}")))
}

fn info(g: &Globals, msg: &str) {
    if g.json_logs {
        eprintln!("{}", json!({ "event": "info", "message": msg }));
    } else {
        eprintln!("{msg}");
    }
}

fn step_logger<'a>(g: &'a Globals, phase: &'a str) -> impl FnMut(&StepEvent) + 'a {
    move |e: &StepEvent| {
        if g.json_logs {
            eprintln!(
                "{}",
                json!({ "event": "step", "phase": phase, "step": e.step, "loss": e.loss, "grad_norm": e.grad_norm, "lr": e.lr })
            );
        } else if e.step % 50 == 0 {
            eprintln!("{phase} step {} loss {:.4}", e.step, e.loss);
        }
    }
}

/// FASTA (first non-blank byte is `>`) gives one document per record;
/// anything else one per non-empty line.
fn parse_docs(text: &str, path: &Path) -> Result<Vec<String>, CliError> {
    if text.trim_start().starts_with('>') {
        let recs = read_fasta(text.as_bytes()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(recs.into_iter().map(|r| r.seq.as_str().to_string()).collect())
    } else {
        Ok(text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect())
    }
}

fn read_docs(run: &mut Run, path: &Path) -> Result<Vec<String>, CliError> {
    let text = run.read_string(path)?;
    let docs = parse_docs(&text, path)?;
    if docs.is_empty() {
        return Err(CliError::Data(format!("{}: no documents", path.display())));
    }
    Ok(docs)
}

fn read_records(run: &mut Run, path: &Path) -> Result<Vec<PairRecord>, CliError> {
    let bytes = run.read(path)?;
    datasetgen::read_jsonl(bytes.as_slice()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_tokenizer(run: &mut Run, path: &Path) -> Result<AnyTokenizer, CliError> {
    let text = run.read_string(path)?;
    AnyTokenizer::parse(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_params<S: Scalar>(run: &mut Run, path: &Path) -> Result<Params<S>, CliError> {
    let bytes = run.read(path)?;
    model::read_checkpoint(bytes.as_slice()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn checkpoint_bytes<S: Scalar>(p: &Params<S>) -> Vec<u8> {
    let mut buf = Vec::new();
    model::write_checkpoint(p, &mut buf).expect("in-memory write");
    buf
}

fn loss_csv(losses: &[f64]) -> Vec<u8> {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s.into_bytes()
}

fn parse_arch(s: &str) -> Result<Arch, CliError> {
    match s {
        "decoder" | "DECODER_CAUSAL" => Ok(Arch::DecoderCausal),
        "encoder" | "ENCODER_BIDIR" => Ok(Arch::EncoderBidir),
        _ => Err(CliError::Usage(format!("--arch: expected decoder or encoder, got {s:?}"))),
    }
}

fn dataset_outputs(run: &mut Run, out: &Path, ds: &datasetgen::PairDataset) {
    run.output(out, ds.to_jsonl());
    let mut m = Vec::new();
    datasetgen::write_manifest(&ds.manifest, &mut m).expect("in-memory write");
    run.output(&datasetgen::manifest_path(out), m);
}

pub fn gen_dna_pairs((mut a, c): Loaded<GenDnaPairs>, g: &Globals) -> Result<(), CliError> {
    let d = DnaPairConfig::default();
    let h = HomologyConfig::default();
    a.n.get_or_insert(d.n);
    a.seq_len.get_or_insert(d.seq_len);
    a.sub_rate.get_or_insert(d.sub_rate);
    a.indel_rate.get_or_insert(d.indel_rate);
    a.length_tolerance.get_or_insert(d.length_tolerance);
    a.construction.get_or_insert_with(|| "generate_at_length".into());
    a.negative_source.get_or_insert_with(|| "random".into());
    a.evalue_threshold.get_or_insert(h.evalue_threshold);
    a.negative_min_evalue.get_or_insert(h.negative_min_evalue);
    a.negative_max_identity.get_or_insert(h.negative_max_identity);
    let (sources, out) = (req(&a.sources, "sources")?, req(&a.out, "out")?);
    let construction: PairConstruction = parse_enum(a.construction.as_deref().unwrap(), "construction")?;
    let negative_source: NegativeSource = parse_enum(a.negative_source.as_deref().unwrap(), "negative-source")?;
    let cfg = DnaPairConfig {
        n: a.n.unwrap(),
        seq_len: a.seq_len.unwrap(),
        sub_rate: a.sub_rate.unwrap(),
        indel_rate: a.indel_rate.unwrap(),
        homology: HomologyConfig {
            evalue_threshold: a.evalue_threshold.unwrap(),
            negative_min_evalue: a.negative_min_evalue.unwrap(),
            negative_max_identity: a.negative_max_identity.unwrap(),
            ..h
        },
        length_tolerance: a.length_tolerance.unwrap(),
        construction,
        negative_source,
        seed: Seed(seed_of(&c)),
    };
    cfg.validate()?;
    let mut run = Run::new("gen-dna-pairs");
    let text = run.read(&sources)?;
    let recs = read_fasta(text.as_slice()).map_err(|e| CliError::Data(format!("{}: {e}", sources.display())))?;
    let ds = datasetgen::gen_dna_pairs(&recs, &cfg)?;
    info(g, &format!("{} DNA pairs ({} positive)", ds.len(), ds.manifest.n_positive));
    dataset_outputs(&mut run, &out, &ds);
    run.commit(&out, &snapshot(&a, seed_of(&c), precision_of(&c)))
}

pub fn gen_dna_protein_pairs((mut a, c): Loaded<GenDnaProteinPairs>, g: &Globals) -> Result<(), CliError> {
    a.n.get_or_insert(1000);
    let (sources, out) = (req(&a.sources, "sources")?, req(&a.out, "out")?);
    let cfg = DnaProteinConfig { n: a.n.unwrap(), dna_len_cap: a.dna_len_cap, seed: Seed(seed_of(&c)) };
    let mut run = Run::new("gen-dna-protein-pairs");
    let text = run.read(&sources)?;
    let recs = read_fasta(text.as_slice()).map_err(|e| CliError::Data(format!("{}: {e}", sources.display())))?;
    let ds = datasetgen::gen_dna_protein_pairs(&recs, &cfg)?;
    info(g, &format!("{} DNA-protein pairs", ds.len()));
    dataset_outputs(&mut run, &out, &ds);
    run.commit(&out, &snapshot(&a, seed_of(&c), precision_of(&c)))
}

pub fn gen_text_pairs((mut a, c): Loaded<GenTextPairs>, g: &Globals) -> Result<(), CliError> {
    a.n.get_or_insert(2000);
    a.noise.get_or_insert(0.1);
    let (corpus, out) = (req(&a.corpus, "corpus")?, req(&a.out, "out")?);
    let mut run = Run::new("gen-text-pairs");
    let docs = read_docs(&mut run, &corpus)?;
    let cfg =
        TextPairConfig { n: a.n.unwrap(), noise: a.noise.unwrap(), max_chars: a.max_chars, seed: Seed(seed_of(&c)) };
    let ds = datasetgen::gen_text_pairs(&docs, &cfg)?;
    info(g, &format!("{} text pairs", ds.len()));
    dataset_outputs(&mut run, &out, &ds);
    run.commit(&out, &snapshot(&a, seed_of(&c), precision_of(&c)))
}

pub fn train_tokenizer((mut a, c): Loaded<TrainTokenizer>, g: &Globals) -> Result<(), CliError> {
    a.vocab_size.get_or_insert(2000);
    a.kind.get_or_insert_with(|| "bpe".into());
    let (corpora, out) = (req(&a.corpus, "corpus")?, req(&a.out, "out")?);
    if corpora.is_empty() {
        return Err(CliError::Usage("missing --corpus".into()));
    }
    let mut run = Run::new("train-tokenizer");
    let mut docs = Vec::new();
    for p in &corpora {
        docs.extend(read_docs(&mut run, p)?);
    }
    let bpe = BpeTokenizer::train(&docs, a.vocab_size.unwrap())?;
    let text = match a.kind.as_deref().unwrap() {
        "bpe" => bpe.serialize(),
        "wordpiece" => WordPieceTokenizer::from_bpe(&bpe).serialize(),
        k => return Err(CliError::Usage(format!("--kind: expected bpe or wordpiece, got {k:?}"))),
    };
    info(g, &format!("tokenizer with {} entries", bpe.vocab_len()));
    run.output(&out, text.into_bytes());
    run.commit(&out, &snapshot(&a, seed_of(&c), precision_of(&c)))
}

fn read_stat_inputs(run: &mut Run, inputs: &[PathBuf]) -> Result<Vec<String>, CliError> {
    let mut docs = Vec::new();
    for p in inputs {
        if p.extension().is_some_and(|e| e == "jsonl") {
            for r in read_records(run, p)? {
                docs.push(r.sentence1);
                docs.push(r.sentence2);
            }
        } else {
            docs.extend(read_docs(run, p)?);
        }
    }
    if docs.is_empty() {
        return Err(CliError::Usage("missing --input".into()));
    }
    Ok(docs)
}

pub fn token_stats((a, c): Loaded<TokenStats>, _g: &Globals) -> Result<(), CliError> {
    let tok_path = req(&a.tokenizer, "tokenizer")?;
    let mut run = Run::new("token-stats");
    let tok = read_tokenizer(&mut run, &tok_path)?;
    let docs = read_stat_inputs(&mut run, &a.input.clone().unwrap_or_default())?;
    let stats = toklab::token_stats(&tok, &docs)?;
    let text = serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n";
    print!("{text}");
    if let Some(out) = &a.out {
        run.output(out, text.into_bytes());
        run.commit(out, &snapshot(&a, seed_of(&c), precision_of(&c)))?;
    }
    Ok(())
}

pub fn fit_truncation((mut a, _c): Loaded<FitTruncation>, _g: &Globals) -> Result<(), CliError> {
    a.target_tokens.get_or_insert(50);
    let target = a.target_tokens.unwrap();
    if target < 2 {
        return Err(CliError::Usage("--target-tokens must be at least 2".into()));
    }
    let cpt = match a.chars_per_token {
        Some(c) => c,
        None => {
            let tok_path = req(&a.tokenizer, "tokenizer")?;
            let mut run = Run::new("fit-truncation");
            let tok = read_tokenizer(&mut run, &tok_path)?;
            let docs = read_stat_inputs(&mut run, &a.input.clone().unwrap_or_default())?;
            toklab::token_stats(&tok, &docs)?.chars_per_token
        }
    };
    if !(cpt > 0.0 && cpt.is_finite()) {
        return Err(CliError::Usage("--chars-per-token must be positive".into()));
    }
    let max_chars = toklab::fit_truncation(target, cpt);
    println!("{}", json!({ "target_tokens": target, "chars_per_token": cpt, "max_chars": max_chars }));
    Ok(())
}

struct ModelFlags<'a> {
    arch: &'a Option<String>,
    d_model: &'a Option<usize>,
    n_layers: &'a Option<usize>,
    n_heads: &'a Option<usize>,
    d_ff: &'a Option<usize>,
    max_seq_len: &'a Option<usize>,
    dropout: &'a Option<f64>,
}

impl ModelFlags<'_> {
    fn any(&self) -> bool {
        self.arch.is_some()
            || self.d_model.is_some()
            || self.n_layers.is_some()
            || self.n_heads.is_some()
            || self.d_ff.is_some()
            || self.max_seq_len.is_some()
            || self.dropout.is_some()
    }

    fn config(&self, vocab: usize) -> Result<ModelConfig, CliError> {
        let arch = parse_arch(self.arch.as_deref().unwrap_or("decoder"))?;
        let d = ModelConfig::new(arch, vocab);
        let cfg = ModelConfig {
            d_model: self.d_model.unwrap_or(d.d_model),
            n_layers: self.n_layers.unwrap_or(d.n_layers),
            n_heads: self.n_heads.unwrap_or(d.n_heads),
            d_ff: self.d_ff.unwrap_or(d.d_ff),
            max_seq_len: self.max_seq_len.unwrap_or(d.max_seq_len),
            dropout: self.dropout.unwrap_or(d.dropout),
            ..d
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Parameters either from `checkpoint` or freshly initialized from the
/// architecture flags, never both.
fn initial_params<S: Scalar>(
    run: &mut Run,
    checkpoint: &Option<PathBuf>,
    flags: &ModelFlags,
    tok: &AnyTokenizer,
    seed: Seed,
) -> Result<Params<S>, CliError> {
    let p = match checkpoint {
        Some(path) => {
            if flags.any() {
                return Err(CliError::Usage("architecture flags cannot be combined with a starting checkpoint".into()));
            }
            read_params::<S>(run, path)?
        }
        None => Params::init(&flags.config(tok.vocab_len())?, seed.derive("init", 0))?,
    };
    if p.config().vocab_size != tok.vocab_len() {
        return Err(CliError::Data(format!(
            "tokenizer has {} entries but model vocabulary is {}",
            tok.vocab_len(),
            p.config().vocab_size
        )));
    }
    Ok(p)
}

/// Fills model defaults into the flags so the snapshot is complete.
macro_rules! resolve_model_flags {
    ($a:expr, $cfg:expr) => {{
        let cfg: &ModelConfig = $cfg;
        $a.arch = Some(match cfg.arch {
            Arch::DecoderCausal => "decoder".into(),
            Arch::EncoderBidir => "encoder".into(),
        });
        $a.d_model = Some(cfg.d_model);
        $a.n_layers = Some(cfg.n_layers);
        $a.n_heads = Some(cfg.n_heads);
        $a.d_ff = Some(cfg.d_ff);
        $a.max_seq_len = Some(cfg.max_seq_len);
        $a.dropout = Some(cfg.dropout);
    }};
}

pub fn pretrain((a, c): Loaded<Pretrain>, g: &Globals) -> Result<(), CliError> {
    match precision_of(&c) {
        Precision::F64 => pretrain_as::<f64>(a, c, g),
        Precision::F32 => pretrain_as::<f32>(a, c, g),
    }
}

fn pretrain_as<S: Scalar>(mut a: Pretrain, c: Common, g: &Globals) -> Result<(), CliError> {
    let d = TrainConfig::pretrain();
    a.steps.get_or_insert(d.steps);
    a.lr.get_or_insert(d.lr);
    a.batch_size.get_or_insert(d.batch_size);
    a.weight_decay.get_or_insert(d.weight_decay);
    a.grad_clip.get_or_insert(d.grad_clip);
    let (tok_path, out) = (req(&a.tokenizer, "tokenizer")?, req(&a.out, "out")?);
    let corpora = req(&a.corpus, "corpus")?;
    if corpora.is_empty() {
        return Err(CliError::Usage("missing --corpus".into()));
    }
    let weights = a.weights.clone().unwrap_or_else(|| vec![1.0; corpora.len()]);
    if weights.len() != corpora.len() {
        return Err(CliError::Usage(format!("{} weights for {} corpora", weights.len(), corpora.len())));
    }
    a.weights = Some(weights.clone());
    let seed = Seed(seed_of(&c));
    let mut run = Run::new("pretrain");
    let tok = read_tokenizer(&mut run, &tok_path)?;
    let flags = ModelFlags {
        arch: &a.arch,
        d_model: &a.d_model,
        n_layers: &a.n_layers,
        n_heads: &a.n_heads,
        d_ff: &a.d_ff,
        max_seq_len: &a.max_seq_len,
        dropout: &a.dropout,
    };
    let mut params = initial_params::<S>(&mut run, &a.init, &flags, &tok, seed)?;
    if a.init.is_none() {
        resolve_model_flags!(a, params.config());
    }
    let mut entries = Vec::new();
    for (spec, w) in corpora.iter().zip(&weights) {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), p)
            }
        };
        let docs = read_docs(&mut run, &path)?;
        entries.push((name, model::corpus_stream(&tok, &docs), *w));
    }
    let mix = CorpusMix::new(entries)?;
    let tc = TrainConfig {
        steps: a.steps.unwrap(),
        lr: a.lr.unwrap(),
        batch_size: a.batch_size.unwrap(),
        weight_decay: a.weight_decay.unwrap(),
        grad_clip: a.grad_clip.unwrap(),
        seed: seed.derive("pretrain", 0),
        ..d
    };
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = model::pretrain_mixture(&mut params, &mix, &tc, step_logger(g, "pretrain"))?;
    info(
        g,
        &format!("pretrained {} steps, final loss {:.4}", tc.steps, outcome.losses.last().copied().unwrap_or(f64::NAN)),
    );
    run.output(&out, checkpoint_bytes(&params));
    if let Some(t) = &a.loss_trace {
        run.output(t, loss_csv(&outcome.losses));
    }
    run.commit(&out, &snapshot(&a, seed_of(&c), precision_of(&c)))
}

/// Every length-`k` string over `ACGT` in lexicographic order.
pub fn dna_kmers(k: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    for _ in 0..k {
        out = out.iter().flat_map(|p| "ACGT".chars().map(move |b| format!("{p}{b}"))).collect();
    }
    out
}

pub fn extend_vocab((mut a, c): Loaded<ExtendVocab>, g: &Globals) -> Result<(), CliError> {
    let (ck, tok_path) = (req(&a.checkpoint, "checkpoint")?, req(&a.tokenizer, "tokenizer")?);
    let (out, out_tok) = (req(&a.out, "out")?, req(&a.out_tokenizer, "out_tokenizer")?);
    let mut run = Run::new("extend-vocab");
    let mut tok = read_tokenizer(&mut run, &tok_path)?;
    let params = read_params::<f64>(&mut run, &ck)?;
    let mut tokens = a.tokens.clone().unwrap_or_default();
    if let Some(k) = a.kmer {
        if !(1..=8).contains(&k) {
            return Err(CliError::Usage("--kmer must be between 1 and 8".into()));
        }
        let extra: Vec<String> = dna_kmers(k).into_iter().filter(|t| !tok.contains(t) && !tokens.contains(t)).collect();
        tokens.extend(extra);
    }
    if tokens.is_empty() && a.tokens.is_none() && a.kmer.is_none() {
        return Err(CliError::Usage("missing --tokens or --kmer".into()));
    }
    a.tokens = Some(a.tokens.clone().unwrap_or_default());
    let (grown, added) =
        model::extend_model_and_tokenizer(&params, &mut tok, &tokens, Seed(seed_of(&c)).derive("extend", 0))?;
    info(g, &format!("added {} vocabulary entries", added.len()));
    run.output(&out, checkpoint_bytes(&grown));
    run.output(&out_tok, tok.serialize().into_bytes());
    run.commit(&out, &snapshot(&a, seed_of(&c), precision_of(&c)))
}

pub fn finetune((a, c): Loaded<Finetune>, g: &Globals) -> Result<(), CliError> {
    match precision_of(&c) {
        Precision::F64 => finetune_as::<f64>(a, c, g),
        Precision::F32 => finetune_as::<f32>(a, c, g),
    }
}

fn finetune_as<S: Scalar>(mut a: Finetune, c: Common, g: &Globals) -> Result<(), CliError> {
    let d = TrainConfig::finetune();
    a.lr.get_or_insert(d.lr);
    a.batch_size.get_or_insert(d.batch_size);
    a.weight_decay.get_or_insert(d.weight_decay);
    a.grad_clip.get_or_insert(d.grad_clip);
    if a.steps.is_none() {
        a.epochs.get_or_insert(3);
    }
    let (tok_path, train, out) = (req(&a.tokenizer, "tokenizer")?, req(&a.train, "train")?, req(&a.out, "out")?);
    let seed = Seed(seed_of(&c));
    let mut run = Run::new("finetune");
    let tok = read_tokenizer(&mut run, &tok_path)?;
    let flags = ModelFlags {
        arch: &a.arch,
        d_model: &a.d_model,
        n_layers: &a.n_layers,
        n_heads: &a.n_heads,
        d_ff: &a.d_ff,
        max_seq_len: &a.max_seq_len,
        dropout: &a.dropout,
    };
    let mut params = initial_params::<S>(&mut run, &a.checkpoint, &flags, &tok, seed)?;
    if a.checkpoint.is_none() {
        resolve_model_flags!(a, params.config());
    }
    let recs = read_records(&mut run, &train)?;
    let dev = match &a.dev {
        Some(p) => Some(read_records(&mut run, p)?),
        None => None,
    };
    let mut tc = TrainConfig {
        lr: a.lr.unwrap(),
        batch_size: a.batch_size.unwrap(),
        weight_decay: a.weight_decay.unwrap(),
        grad_clip: a.grad_clip.unwrap(),
        seed: seed.derive("finetune", 0),
        ..d
    };
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    tc.steps = match a.steps {
        Some(s) => s,
        None => tc.steps_for_epochs(recs.len(), a.epochs.unwrap()),
    };
    let outcome = model::finetune(&mut params, &tok, &recs, &tc, step_logger(g, "finetune"))?;
    let train_acc = model::accuracy_on(&params, &tok, &recs)?;
    let mut summary = json!({ "steps": tc.steps, "train_accuracy": train_acc });
    if let Some(dev) = &dev {
        summary["dev_accuracy"] = json!(model::accuracy_on(&params, &tok, dev)?);
    }
    println!("{summary}");
    run.output(&out, checkpoint_bytes(&params));
    if let Some(t) = &a.loss_trace {
        run.output(t, loss_csv(&outcome.losses));
    }
    run.commit(&out, &snapshot(&a, seed_of(&c), precision_of(&c)))
}

pub fn eval((a, c): Loaded<Eval>, g: &Globals) -> Result<(), CliError> {
    match precision_of(&c) {
        Precision::F64 => eval_as::<f64>(a, c, g),
        Precision::F32 => eval_as::<f32>(a, c, g),
    }
}

fn eval_as<S: Scalar>(a: Eval, c: Common, _g: &Globals) -> Result<(), CliError> {
    let (ck, tok_path, ds) =
        (req(&a.checkpoint, "checkpoint")?, req(&a.tokenizer, "tokenizer")?, req(&a.dataset, "dataset")?);
    let mut run = Run::new("eval");
    let tok = read_tokenizer(&mut run, &tok_path)?;
    let params = read_params::<S>(&mut run, &ck)?;
    if params.config().vocab_size != tok.vocab_len() {
        return Err(CliError::Data(format!(
            "tokenizer has {} entries but model vocabulary is {}",
            tok.vocab_len(),
            params.config().vocab_size
        )));
    }
    let recs = read_records(&mut run, &ds)?;
    let preds = params.predict_all(&tok, &recs)?;
    let golds: Vec<u8> = recs.iter().map(|r| r.label).collect();
    let report = evalharness::evaluate(&preds, &golds)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    print!("{text}");
    if let Some(out) = &a.out {
        run.output(out, text.into_bytes());
        let mut conf = out.as_os_str().to_owned();
        conf.push(".confusion.csv");
        run.output(Path::new(&conf), report.confusion.to_csv_block().into_bytes());
        run.commit(out, &snapshot(&a, seed_of(&c), precision_of(&c)))?;
    }
    Ok(())
}

pub fn grid((a, c): Loaded<Grid>, g: &Globals) -> Result<(), CliError> {
    let (grid_path, out_dir) = (req(&a.grid, "grid")?, req(&a.out_dir, "out_dir")?);
    let mut run = Run::new("grid");
    let text = run.read_string(&grid_path)?;
    let mut spec = GridSpec::parse(&text)?;
    if let Some(s) = c.seed {
        spec.seeds = vec![s];
    }
    let base = grid_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let inputs: Vec<PathBuf> = spec
        .tokenizers
        .values()
        .cloned()
        .chain(spec.corpora.values().map(|cs| cs.path.clone()))
        .chain(spec.datasets.values().map(|d| d.path.clone()))
        .collect();
    let grid = spec.load(&base)?;
    for p in inputs {
        run.read(&base.join(p))?;
    }
    let on_event = |e: &GridEvent| {
        if g.json_logs {
            eprintln!("{}", serde_json::to_string(e).expect("event serializes"));
        } else {
            match e {
                GridEvent::Step { .. } => {}
                GridEvent::Cell { row, seed, test, accuracy, p_value } => {
                    eprintln!("row {row} seed {seed} {test}: accuracy {accuracy:?} p {p_value:?}")
                }
                other => eprintln!("{}", serde_json::to_string(other).expect("event serializes")),
            }
        }
    };
    let report = match precision_of(&c) {
        Precision::F64 => evalharness::run_grid::<f64>(&grid, on_event),
        Precision::F32 => evalharness::run_grid::<f32>(&grid, on_event),
    };
    let (table, csv) = evalharness::render_report(&report);
    print!("{table}");
    run.output(&out_dir.join("report.txt"), table.into_bytes());
    run.output(&out_dir.join("report.csv"), csv.into_bytes());
    run.output(&out_dir.join("confusion.csv"), evalharness::confusion_blocks(&report).into_bytes());
    let mut snap = snapshot(&a, seed_of(&c), precision_of(&c));
    snap["grid_spec"] = serde_json::to_value(&grid.spec).expect("spec serializes");
    run.commit(&out_dir.join("report.csv"), &snap)
}

pub fn verify_dataset((a, _c): Loaded<VerifyDataset>, _g: &Globals) -> Result<(), CliError> {
    let path = req(&a.dataset, "dataset")?;
    let mut run = Run::new("verify-dataset");
    let recs = read_records(&mut run, &path)?;
    let mpath = datasetgen::manifest_path(&path);
    let manifest = if mpath.exists() {
        let bytes = run.read(&mpath)?;
        Some(datasetgen::read_manifest(bytes.as_slice())?)
    } else {
        None
    };
    let task: Task = match (&a.task, &manifest) {
        (Some(t), _) => parse_enum(t, "task")?,
        (None, Some(m)) => m.task,
        (None, None) => return Err(CliError::Usage("no manifest sidecar; pass --task".into())),
    };
    let homology = manifest.as_ref().and_then(|m| m.homology).unwrap_or_default();
    let bad = datasetgen::verify_labels(&recs, task, &homology);
    if let Some(first) = bad.first() {
        let lines: Vec<String> = bad.iter().take(10).map(|d| d.line.to_string()).collect();
        return Err(CliError::Data(format!(
            "line {}: stored label {} but oracle says {} ({} disagreement(s), lines {})",
            first.line,
            first.stored,
            first.oracle,
            bad.len(),
            lines.join(",")
        )));
    }
    let n_pos = recs.iter().filter(|r| r.label == 1).count();
    let n_neg = recs.len() - n_pos;
    if let Some(m) = &manifest {
        if m.task != task || m.n_total != recs.len() || m.n_positive != n_pos || m.n_negative != n_neg {
            return Err(CliError::Data(format!(
                "manifest says {} records ({} positive), file has {} ({} positive)",
                m.n_total,
                m.n_positive,
                recs.len(),
                n_pos
            )));
        }
    }
    if n_pos.abs_diff(n_neg) > 1 {
        return Err(CliError::Data(format!("unbalanced: {n_pos} positive, {n_neg} negative")));
    }
    if let Some(i) = recs.iter().position(|r| r.label == 0 && r.sentence1 == r.sentence2) {
        return Err(CliError::Data(format!("line {}: negative pair of identical sentences", i + 1)));
    }
    println!(
        "{}",
        json!({ "records": recs.len(), "positive": n_pos, "negative": n_neg, "task": task, "disagreements": 0 })
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmers_enumerate_in_order() {
        assert_eq!(dna_kmers(1), ["A", "C", "G", "T"]);
        let k3 = dna_kmers(3);
        assert_eq!(k3.len(), 64);
        assert_eq!((k3[0].as_str(), k3[63].as_str()), ("AAA", "TTT"));
    }

    #[test]
    fn docs_from_fasta_or_lines() {
        let p = Path::new("x");
        assert_eq!(parse_docs(">a\nAC\nGT\n>b\nTT\n", p).unwrap(), ["ACGT", "TT"]);
        assert_eq!(parse_docs("one\r\n\ntwo\n", p).unwrap(), ["one", "two"]);
    }
}
