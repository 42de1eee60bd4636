//! Pair datasets in the `sentence1` / `sentence2` / `label` record shape:
//! DNA-pair similarity, coding DNA–protein pairs and text pairs.
//!
//! Labels: `1` = similar / coding match / paraphrase, `0` = otherwise.
//! Every record's randomness derives from `(seed, task label, index)`, so
//! generation runs in parallel and still produces byte-identical output.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{homology_call, Homology, HomologyConfig};
use crate::seqcore::{
    mutate_dna_with, random_dna_with, translate_cds, CodonTable, DnaSeq, FastaRecord, Seed, SeqError,
};

/// Resampling attempts per record before generation fails.
pub const RETRY_BUDGET: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("insufficient sources: {0}")]
    InsufficientSources(String),
    #[error("{failed} {class} records could not be generated within {RETRY_BUDGET} attempts each")]
    RetryBudgetExhausted { class: &'static str, failed: usize },
    #[error("record {0:?} cannot be translated")]
    UntranslatableRecord(String),
    #[error("corpus needs at least two distinct sentences")]
    CorpusTooSmall,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("line {0}: malformed record")]
    MalformedLine(usize),
    #[error("line {line}: missing field {field:?}")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: unexpected field {field:?}")]
    UnexpectedField { line: usize, field: String },
    #[error("line {0}: label must be 0 or 1")]
    NonBinaryLabel(usize),
    #[error("line {0}: empty sentence")]
    EmptySentence(usize),
    #[error("split fractions must be positive and sum to 1")]
    BadFractions,
    #[error("manifest does not match records: {0}")]
    ManifestMismatch(String),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairRecord {
    pub sentence1: String,
    pub sentence2: String,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    DnaPair,
    DnaProteinPair,
    TextPair,
}

impl Task {
    fn label(self) -> &'static str {
        match self {
            Task::DnaPair => "dna-pair",
            Task::DnaProteinPair => "dna-protein-pair",
            Task::TextPair => "text-pair",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task: Task,
    pub n_total: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub seed: Seed,
    pub generator_config_digest: String,
    /// Alignment settings used to gate DNA pairs, kept so verification can
    /// re-run the same oracle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homology: Option<HomologyConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub records: Vec<PairRecord>,
    pub manifest: DatasetManifest,
}

impl PairDataset {
    /// Checks that the manifest counts agree with the records.
    pub fn new(records: Vec<PairRecord>, manifest: DatasetManifest) -> Result<Self, DatasetError> {
        let pos = records.iter().filter(|r| r.label == 1).count();
        let (n, neg) = (records.len(), records.len() - pos);
        if manifest.n_total != n || manifest.n_positive != pos || manifest.n_negative != neg {
            return Err(DatasetError::ManifestMismatch(format!(
                "manifest says {}/{}/{}, records have {n}/{pos}/{neg}",
                manifest.n_total, manifest.n_positive, manifest.n_negative
            )));
        }
        if manifest.n_positive + manifest.n_negative != manifest.n_total {
            return Err(DatasetError::ManifestMismatch("class counts do not sum to total".into()));
        }
        Ok(PairDataset { records, manifest })
    }

    /// Builds a manifest from the records themselves.
    pub fn from_records(records: Vec<PairRecord>, task: Task, seed: Seed, generator_config_digest: String) -> Self {
        let pos = records.iter().filter(|r| r.label == 1).count();
        let manifest = DatasetManifest {
            task,
            n_total: records.len(),
            n_positive: pos,
            n_negative: records.len() - pos,
            seed,
            generator_config_digest,
            homology: None,
        };
        PairDataset { records, manifest }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_balanced(&self) -> bool {
        self.manifest.n_positive.abs_diff(self.manifest.n_negative) <= 1
    }

    /// Canonical JSONL bytes of the records.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_jsonl(&self.records, &mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn digest(&self) -> String {
        crate::sha256_hex(&self.to_jsonl())
    }
}

fn config_digest<T: Serialize>(cfg: &T, sources: &[FastaRecord]) -> String {
    let mut bytes = serde_json::to_vec(cfg).expect("config serializes");
    for r in sources {
        bytes.extend_from_slice(r.id.as_bytes());
        bytes.push(b'\t');
        bytes.extend_from_slice(r.seq.as_bytes());
        bytes.push(b'\n');
    }
    crate::sha256_hex(&bytes)
}

/// How DNA-pair candidates are built from a source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairConstruction {
    /// Truncate the source to `seq_len`, then mutate / draw the partner.
    #[default]
    GenerateAtLength,
    /// Mutate the full-length source, then truncate both members to
    /// `seq_len`.
    TruncateLongPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Uniform random DNA.
    #[default]
    Random,
    /// The prefix of a different source record.
    CrossSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnaPairConfig {
    pub n: usize,
    pub seq_len: usize,
    pub sub_rate: f64,
    pub indel_rate: f64,
    pub homology: HomologyConfig,
    pub length_tolerance: f64,
    pub construction: PairConstruction,
    pub negative_source: NegativeSource,
    pub seed: Seed,
}

impl Default for DnaPairConfig {
    fn default() -> Self {
        DnaPairConfig {
            n: 1000,
            seq_len: 40,
            sub_rate: 0.10,
            indel_rate: 0.02,
            homology: HomologyConfig::default(),
            length_tolerance: 0.10,
            construction: PairConstruction::default(),
            negative_source: NegativeSource::default(),
            seed: Seed(0),
        }
    }
}

impl DnaPairConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.seq_len < 10 {
            return Err(DatasetError::BadConfig("seq_len must be at least 10".into()));
        }
        if self.n == 0 || self.n % 2 != 0 {
            return Err(DatasetError::BadConfig("n must be a positive even number".into()));
        }
        if !(0.0..1.0).contains(&self.length_tolerance) {
            return Err(DatasetError::BadConfig("length_tolerance must be in [0, 1)".into()));
        }
        for r in [self.sub_rate, self.indel_rate] {
            if !(0.0..=1.0).contains(&r) {
                return Err(DatasetError::BadConfig(format!("rate {r} outside [0, 1]")));
            }
        }
        self.homology.validate().map_err(|e| DatasetError::BadConfig(e.to_string()))
    }
}

enum Attempt {
    Accepted(PairRecord),
    Exhausted,
}

/// DNA-pair similarity dataset. Positives are mutated copies of source
/// prefixes that pass the E-value gate; negatives are length-matched
/// partners that land in the negative zone. Gray-zone candidates are
/// resampled.
pub fn gen_dna_pairs(sources: &[FastaRecord], cfg: &DnaPairConfig) -> Result<PairDataset, DatasetError> {
    cfg.validate()?;
    let usable: Vec<&FastaRecord> = sources.iter().filter(|r| r.seq.len() >= cfg.seq_len).collect();
    if usable.is_empty() {
        return Err(DatasetError::InsufficientSources(format!("no source is at least {} bp long", cfg.seq_len)));
    }
    if cfg.negative_source == NegativeSource::CrossSource && usable.len() < 2 {
        return Err(DatasetError::InsufficientSources("cross-source negatives need two sources".into()));
    }
    let half = cfg.n / 2;
    let task = Task::DnaPair.label();

    let positives: Vec<Attempt> = (0..half)
        .into_par_iter()
        .map(|i| {
            let src = usable[i % usable.len()];
            let mut rng = cfg.seed.rng(&format!("{task}/positive"), i as u64);
            for _ in 0..RETRY_BUDGET {
                let (a, b) = match cfg.construction {
                    PairConstruction::GenerateAtLength => {
                        let a = src.seq.prefix(cfg.seq_len);
                        match mutate_dna_with(&a, cfg.sub_rate, cfg.indel_rate, &mut rng) {
                            Ok(b) => (a, b),
                            Err(_) => continue,
                        }
                    }
                    PairConstruction::TruncateLongPairs => {
                        match mutate_dna_with(&src.seq, cfg.sub_rate, cfg.indel_rate, &mut rng) {
                            Ok(b) => (src.seq.prefix(cfg.seq_len), b.prefix(cfg.seq_len)),
                            Err(_) => continue,
                        }
                    }
                };
                if homology_call(&a, &b, &cfg.homology).class == Homology::Positive {
                    return Attempt::Accepted(PairRecord { sentence1: a.into(), sentence2: b.into(), label: 1 });
                }
            }
            Attempt::Exhausted
        })
        .collect();

    let lo = ((cfg.seq_len as f64) * (1.0 - cfg.length_tolerance)).ceil() as usize;
    let hi = ((cfg.seq_len as f64) * (1.0 + cfg.length_tolerance)).floor() as usize;
    let negatives: Vec<Attempt> = (0..half)
        .into_par_iter()
        .map(|i| {
            let src = usable[i % usable.len()];
            let a = src.seq.prefix(cfg.seq_len);
            let mut rng = cfg.seed.rng(&format!("{task}/negative"), i as u64);
            // Partner lengths stay within tolerance of the actual sentence1.
            let a_lo = ((a.len() as f64) * (1.0 - cfg.length_tolerance)).ceil() as usize;
            let a_hi = ((a.len() as f64) * (1.0 + cfg.length_tolerance)).floor() as usize;
            let (lo, hi) = (lo.max(a_lo).max(1), hi.min(a_hi).max(lo.max(a_lo).max(1)));
            for _ in 0..RETRY_BUDGET {
                let len = rng.random_range(lo..=hi);
                let b = match cfg.negative_source {
                    NegativeSource::Random => random_dna_with(len, &mut rng).expect("len >= 1"),
                    NegativeSource::CrossSource => {
                        let mut j = rng.random_range(0..usable.len() - 1);
                        if j >= i % usable.len() {
                            j += 1;
                        }
                        usable[j].seq.prefix(len)
                    }
                };
                if b.len().abs_diff(a.len()) as f64 > cfg.length_tolerance * a.len() as f64 || a == b {
                    continue;
                }
                if homology_call(&a, &b, &cfg.homology).class == Homology::Negative {
                    return Attempt::Accepted(PairRecord { sentence1: a.into(), sentence2: b.into(), label: 0 });
                }
            }
            Attempt::Exhausted
        })
        .collect();

    let records =
        collect_attempts(positives, "positive")?.into_iter().chain(collect_attempts(negatives, "negative")?).collect();
    let records = shuffle_records(records, cfg.seed, task);
    let mut ds = PairDataset::from_records(records, Task::DnaPair, cfg.seed, config_digest(cfg, sources));
    ds.manifest.homology = Some(cfg.homology);
    Ok(ds)
}

fn collect_attempts(attempts: Vec<Attempt>, class: &'static str) -> Result<Vec<PairRecord>, DatasetError> {
    let failed = attempts.iter().filter(|a| matches!(a, Attempt::Exhausted)).count();
    if failed > 0 {
        return Err(DatasetError::RetryBudgetExhausted { class, failed });
    }
    Ok(attempts
        .into_iter()
        .map(|a| match a {
            Attempt::Accepted(r) => r,
            Attempt::Exhausted => unreachable!(),
        })
        .collect())
}

fn shuffle_records(mut records: Vec<PairRecord>, seed: Seed, task: &str) -> Vec<PairRecord> {
    records.shuffle(&mut seed.rng(&format!("{task}/shuffle"), 0));
    records
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DnaProteinConfig {
    pub n: usize,
    /// Truncate each CDS to this many bases before translation.
    pub dna_len_cap: Option<usize>,
    pub seed: Seed,
}

/// Coding DNA–protein pairs: `(cds_i, protein_i)` positives and
/// `(cds_i, protein_j)` negatives with `protein_j != protein_i`.
pub fn gen_dna_protein_pairs(sources: &[FastaRecord], cfg: &DnaProteinConfig) -> Result<PairDataset, DatasetError> {
    if cfg.n == 0 || cfg.n % 2 != 0 {
        return Err(DatasetError::BadConfig("n must be a positive even number".into()));
    }
    if matches!(cfg.dna_len_cap, Some(c) if c < 3) {
        return Err(DatasetError::BadConfig("dna_len_cap must be at least 3".into()));
    }
    if sources.len() < 2 {
        return Err(DatasetError::InsufficientSources("need at least two coding sequences".into()));
    }
    let table = CodonTable::standard();
    let coding: Vec<(DnaSeq, String)> = sources
        .iter()
        .map(|r| {
            let cds = match cfg.dna_len_cap {
                Some(cap) => r.seq.prefix(cap),
                None => r.seq.clone(),
            };
            translate_cds(&cds, &table)
                .map(|p| (cds, String::from(p)))
                .map_err(|_| DatasetError::UntranslatableRecord(r.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let distinct: BTreeSet<&str> = coding.iter().map(|(_, p)| p.as_str()).collect();
    if distinct.len() < 2 {
        return Err(DatasetError::InsufficientSources("all sources translate to the same protein".into()));
    }
    let half = cfg.n / 2;
    let task = Task::DnaProteinPair.label();
    let positives: Vec<PairRecord> = (0..half)
        .map(|i| {
            let (cds, prot) = &coding[i % coding.len()];
            PairRecord { sentence1: cds.to_string(), sentence2: prot.clone(), label: 1 }
        })
        .collect();
    let negatives: Vec<Attempt> = (0..half)
        .into_par_iter()
        .map(|i| {
            let k = i % coding.len();
            let (cds, prot) = &coding[k];
            let mut rng = cfg.seed.rng(&format!("{task}/negative"), i as u64);
            for _ in 0..RETRY_BUDGET {
                let mut j = rng.random_range(0..coding.len() - 1);
                if j >= k {
                    j += 1;
                }
                if coding[j].1 != *prot {
                    return Attempt::Accepted(PairRecord {
                        sentence1: cds.to_string(),
                        sentence2: coding[j].1.clone(),
                        label: 0,
                    });
                }
            }
            Attempt::Exhausted
        })
        .collect();
    let records = positives.into_iter().chain(collect_attempts(negatives, "negative")?).collect();
    let records = shuffle_records(records, cfg.seed, task);
    Ok(PairDataset::from_records(records, Task::DnaProteinPair, cfg.seed, config_digest(cfg, sources)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextPairConfig {
    pub n: usize,
    /// Fraction of words replaced in positives.
    pub noise: f64,
    /// Sentences longer than this many characters are skipped.
    #[serde(default)]
    pub max_chars: Option<usize>,
    pub seed: Seed,
}

/// Text pairs built around anchor sentences. Each anchor yields a positive
/// (the anchor and a copy with `noise` of its words replaced from the corpus
/// vocabulary) and a negative (the anchor and a different sentence), so
/// sentence1 alone carries no label information.
pub fn gen_text_pairs<S: AsRef<str>>(corpus: &[S], cfg: &TextPairConfig) -> Result<PairDataset, DatasetError> {
    let TextPairConfig { n, noise, max_chars, seed } = *cfg;
    if !(0.0..=1.0).contains(&noise) {
        return Err(DatasetError::BadConfig("noise must be in [0, 1]".into()));
    }
    if n == 0 {
        return Err(DatasetError::BadConfig("n must be positive".into()));
    }
    let sentences: Vec<&str> = {
        let set: BTreeSet<&str> = corpus
            .iter()
            .map(|s| s.as_ref().trim())
            .filter(|s| !s.is_empty() && max_chars.is_none_or(|m| s.chars().count() <= m))
            .collect();
        set.into_iter().collect()
    };
    if sentences.len() < 2 {
        return Err(DatasetError::CorpusTooSmall);
    }
    let vocab: Vec<&str> = {
        let set: BTreeSet<&str> = sentences.iter().flat_map(|s| s.split_whitespace()).collect();
        set.into_iter().collect()
    };
    let task = Task::TextPair.label();
    let mut anchors: Vec<usize> = (0..sentences.len()).collect();
    anchors.shuffle(&mut seed.rng(&format!("{task}/anchors"), 0));
    let mut records: Vec<PairRecord> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (k, positive) = (i / 2, i % 2 == 0);
            let si = anchors[k % anchors.len()];
            let s = sentences[si];
            let mut rng = seed.rng(&format!("{task}/{}", if positive { "positive" } else { "negative" }), k as u64);
            if positive {
                let mut words: Vec<&str> = s.split_whitespace().collect();
                let swaps = (noise * words.len() as f64).round() as usize;
                let mut positions: Vec<usize> = (0..words.len()).collect();
                positions.shuffle(&mut rng);
                for &p in positions.iter().take(swaps) {
                    if vocab.len() < 2 {
                        break;
                    }
                    loop {
                        let w = vocab[rng.random_range(0..vocab.len())];
                        if w != words[p] {
                            words[p] = w;
                            break;
                        }
                    }
                }
                PairRecord { sentence1: s.to_string(), sentence2: words.join(" "), label: 1 }
            } else {
                let mut j = rng.random_range(0..sentences.len() - 1);
                if j >= si {
                    j += 1;
                }
                PairRecord { sentence1: s.to_string(), sentence2: sentences[j].to_string(), label: 0 }
            }
        })
        .collect();
    records = shuffle_records(records, seed, task);
    let mut bytes = serde_json::to_vec(cfg).expect("config serializes");
    for s in &sentences {
        bytes.extend_from_slice(s.as_bytes());
        bytes.push(b'\n');
    }
    Ok(PairDataset::from_records(records, Task::TextPair, seed, crate::sha256_hex(&bytes)))
}

/// One JSON object per line with keys `sentence1`, `sentence2`, `label`.
pub fn write_jsonl<W: Write>(records: &[PairRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<PairRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record_line(&line, line_no)?);
    }
    Ok(out)
}

fn parse_record_line(line: &str, line_no: usize) -> Result<PairRecord, DatasetError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|_| DatasetError::MalformedLine(line_no))?;
    let obj = value.as_object().ok_or(DatasetError::MalformedLine(line_no))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "sentence1" | "sentence2" | "label") {
            return Err(DatasetError::UnexpectedField { line: line_no, field: key.clone() });
        }
    }
    let text = |field: &'static str| -> Result<String, DatasetError> {
        let v = obj.get(field).ok_or(DatasetError::MissingField { line: line_no, field })?;
        let s = v.as_str().ok_or(DatasetError::MalformedLine(line_no))?;
        if s.is_empty() {
            return Err(DatasetError::EmptySentence(line_no));
        }
        Ok(s.to_string())
    };
    let sentence1 = text("sentence1")?;
    let sentence2 = text("sentence2")?;
    let label = obj.get("label").ok_or(DatasetError::MissingField { line: line_no, field: "label" })?;
    let label = match label.as_u64() {
        Some(0) => 0,
        Some(1) => 1,
        _ => return Err(DatasetError::NonBinaryLabel(line_no)),
    };
    Ok(PairRecord { sentence1, sentence2, label })
}

/// `d.jsonl` → `d.manifest.json`.
pub fn manifest_path(dataset: &std::path::Path) -> std::path::PathBuf {
    let stem = dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dataset.with_file_name(format!("{stem}.manifest.json"))
}

pub fn write_manifest<W: Write>(m: &DatasetManifest, mut w: W) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut w, m)?;
    w.write_all(b"\n")
}

pub fn read_manifest<R: std::io::Read>(r: R) -> Result<DatasetManifest, DatasetError> {
    serde_json::from_reader(r).map_err(|e| DatasetError::ManifestMismatch(format!("bad manifest: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, dev: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: PairDataset,
    pub dev: PairDataset,
    pub test: PairDataset,
}

/// Stratified, group-aware split. Class quotas per split come from
/// largest-remainder apportionment, so every split is balanced within one
/// record. Records sharing a sentence1 form a group and land in the same
/// split whenever quotas allow, which keeps anchors from leaking between
/// train and evaluation.
pub fn split(ds: &PairDataset, fractions: SplitFractions, seed: Seed) -> Result<Splits, DatasetError> {
    let f = [fractions.train, fractions.dev, fractions.test];
    if f.iter().any(|&x| !(x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadFractions);
    }
    let n_pos = ds.records.iter().filter(|r| r.label == 1).count();
    let mut quota = [apportion(n_pos, &f), apportion(ds.len() - n_pos, &f)];

    let mut groups: Vec<Vec<&PairRecord>> = Vec::new();
    let mut index: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for r in &ds.records {
        let g = *index.entry(r.sentence1.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(r);
    }
    groups.shuffle(&mut seed.rng("split/groups", 0));

    let class = |r: &PairRecord| usize::from(r.label != 1);
    let mut parts: [Vec<PairRecord>; 3] = Default::default();
    for group in groups {
        let home = (0..3).find(|&k| quota[class(group[0])][k] > 0).expect("quota covers every record");
        for r in group {
            let c = class(r);
            let k = if quota[c][home] > 0 {
                home
            } else {
                (0..3).find(|&k| quota[c][k] > 0).expect("quota covers every record")
            };
            quota[c][k] -= 1;
            parts[k].push(r.clone());
        }
    }

    let [train, dev, test] = parts;
    let build = |mut recs: Vec<PairRecord>, name: &str| {
        recs.shuffle(&mut seed.rng(&format!("split/{name}/order"), 0));
        let digest = crate::sha256_hex(format!("{}/{name}", ds.manifest.generator_config_digest).as_bytes());
        let mut part = PairDataset::from_records(recs, ds.manifest.task, seed, digest);
        part.manifest.homology = ds.manifest.homology;
        part
    };
    Ok(Splits { train: build(train, "train"), dev: build(dev, "dev"), test: build(test, "test") })
}

/// Largest-remainder apportionment of `n` over `fractions`; ties go to the
/// earlier split.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|x| x * n as f64).collect();
    let mut sizes = [0usize; 3];
    for k in 0..3 {
        sizes[k] = exact[k].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - sizes[b] as f64).total_cmp(&(exact[a] - sizes[a] as f64)).then(a.cmp(&b)));
    let rest = n - sizes.iter().sum::<usize>();
    for &k in order.iter().take(rest) {
        sizes[k] += 1;
    }
    sizes
}

/// A record whose stored label disagrees with the class oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDisagreement {
    /// 1-based line number in the JSONL file.
    pub line: usize,
    pub stored: u8,
    pub oracle: String,
}

/// Re-runs the class oracle over every record: alignment for DNA pairs,
/// re-translation for coding pairs. Text pairs have no oracle and only get
/// the structural checks done by the caller.
pub fn verify_labels(records: &[PairRecord], task: Task, homology: &HomologyConfig) -> Vec<LabelDisagreement> {
    let table = CodonTable::standard();
    records
        .par_iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let oracle = match task {
                Task::DnaPair => {
                    let (Ok(a), Ok(b)) = (DnaSeq::parse(&r.sentence1), DnaSeq::parse(&r.sentence2)) else {
                        return Some(LabelDisagreement { line: i + 1, stored: r.label, oracle: "not DNA".into() });
                    };
                    match homology_call(&a, &b, homology).class {
                        Homology::Positive if r.label == 1 => return None,
                        Homology::Negative if r.label == 0 && r.sentence1 != r.sentence2 => return None,
                        c => format!("{c:?}"),
                    }
                }
                Task::DnaProteinPair => {
                    let translated = DnaSeq::parse(&r.sentence1).ok().and_then(|d| translate_cds(&d, &table).ok());
                    let matches = translated.as_ref().map(|p| p.as_str() == r.sentence2).unwrap_or(false);
                    if matches == (r.label == 1) {
                        return None;
                    }
                    match translated {
                        Some(p) if matches => format!("coding match ({})", p.len()),
                        Some(_) => "no coding match".into(),
                        None => "untranslatable".into(),
                    }
                }
                Task::TextPair => return None,
            };
            Some(LabelDisagreement { line: i + 1, stored: r.label, oracle })
        })
        .collect()
}
