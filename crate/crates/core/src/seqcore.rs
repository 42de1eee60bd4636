//! Validated DNA and protein strings, FASTA ingestion, codon translation and
//! seeded sequence synthesis.

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DNA_ALPHABET: [u8; 4] = *b"ACGT";
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeqError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("invalid base {1:?} at position {0}")]
    InvalidBase(usize, char),
    #[error("invalid residue {1:?} at position {0}")]
    InvalidResidue(usize, char),
    #[error("record {id}: {source}")]
    InRecord {
        id: String,
        #[source]
        source: Box<SeqError>,
    },
    #[error("malformed FASTA header at line {0}")]
    MalformedHeader(usize),
    #[error("duplicate FASTA id {0:?}")]
    DuplicateId(String),
    #[error("coding sequence shorter than one codon")]
    TooShort,
    #[error("first codon is a stop codon")]
    EmptyTranslation,
    #[error("sequence length must be positive")]
    ZeroLength,
    #[error("rate {0} outside [0, 1]")]
    RateOutOfRange(f64),
    #[error("read error: {0}")]
    Io(String),
}

/// A non-empty uppercase string over `{A, C, G, T}`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DnaSeq(String);

impl DnaSeq {
    /// Parses `text`, upper-casing it first. Ambiguity codes are rejected.
    pub fn parse(text: &str) -> Result<Self, SeqError> {
        if text.is_empty() {
            return Err(SeqError::EmptySequence);
        }
        let mut out = String::with_capacity(text.len());
        for (pos, c) in text.chars().enumerate() {
            let u = c.to_ascii_uppercase();
            if !matches!(u, 'A' | 'C' | 'G' | 'T') {
                return Err(SeqError::InvalidBase(pos, c));
            }
            out.push(u);
        }
        Ok(DnaSeq(out))
    }

    /// Builds a sequence from bytes already known to be in `ACGT`.
    fn from_valid_bytes(bytes: Vec<u8>) -> Self {
        debug_assert!(!bytes.is_empty() && bytes.iter().all(|b| DNA_ALPHABET.contains(b)));
        DnaSeq(String::from_utf8(bytes).expect("ACGT is ASCII"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The first `n` bases (or the whole sequence when shorter).
    pub fn prefix(&self, n: usize) -> DnaSeq {
        let n = n.max(1).min(self.len());
        DnaSeq(self.0[..n].to_string())
    }
}

impl FromStr for DnaSeq {
    type Err = SeqError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DnaSeq::parse(s)
    }
}

impl TryFrom<String> for DnaSeq {
    type Error = SeqError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        DnaSeq::parse(&s)
    }
}

impl From<DnaSeq> for String {
    fn from(s: DnaSeq) -> String {
        s.0
    }
}

impl fmt::Display for DnaSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for DnaSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DnaSeq({:?})", self.0)
    }
}

/// A non-empty uppercase string over the 20 standard amino-acid letters.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ProteinSeq(String);

impl ProteinSeq {
    pub fn parse(text: &str) -> Result<Self, SeqError> {
        if text.is_empty() {
            return Err(SeqError::EmptySequence);
        }
        let mut out = String::with_capacity(text.len());
        for (pos, c) in text.chars().enumerate() {
            let u = c.to_ascii_uppercase();
            if !u.is_ascii() || !AMINO_ACIDS.contains(&(u as u8)) {
                return Err(SeqError::InvalidResidue(pos, c));
            }
            out.push(u);
        }
        Ok(ProteinSeq(out))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<String> for ProteinSeq {
    type Error = SeqError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        ProteinSeq::parse(&s)
    }
}

impl From<ProteinSeq> for String {
    fn from(s: ProteinSeq) -> String {
        s.0
    }
}

impl fmt::Display for ProteinSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ProteinSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ProteinSeq({:?})", self.0)
    }
}

/// What a codon encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodonMeaning {
    Residue(u8),
    Stop,
}

/// 64-entry codon → residue/stop mapping, indexed by the codon's base-4 value
/// with `T=0, C=1, A=2, G=3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodonTable {
    entries: [CodonMeaning; 64],
}

// Standard code, NCBI table 1, in TCAG order for each codon position.
const STANDARD_AAS: &[u8; 64] = b"FFLLSSSSYY**CC*WLLLLPPPPHHQQRRRRIIIMTTTTNNKKSSRRVVVVAAAADDEEGGGG";

fn base_index(b: u8) -> Option<usize> {
    match b {
        b'T' => Some(0),
        b'C' => Some(1),
        b'A' => Some(2),
        b'G' => Some(3),
        _ => None,
    }
}

impl CodonTable {
    /// The standard genetic code.
    pub fn standard() -> Self {
        let mut entries = [CodonMeaning::Stop; 64];
        for (i, &aa) in STANDARD_AAS.iter().enumerate() {
            entries[i] = if aa == b'*' { CodonMeaning::Stop } else { CodonMeaning::Residue(aa) };
        }
        CodonTable { entries }
    }

    pub fn lookup(&self, codon: &[u8]) -> Option<CodonMeaning> {
        if codon.len() != 3 {
            return None;
        }
        let mut idx = 0;
        for &b in codon {
            idx = idx * 4 + base_index(b)?;
        }
        Some(self.entries[idx])
    }

    /// All 64 codons with their meaning, in TCAG order.
    pub fn iter(&self) -> impl Iterator<Item = (String, CodonMeaning)> + '_ {
        const ORDER: [char; 4] = ['T', 'C', 'A', 'G'];
        self.entries.iter().enumerate().map(|(i, &m)| {
            let codon: String = [ORDER[i / 16], ORDER[(i / 4) % 4], ORDER[i % 4]].iter().collect();
            (codon, m)
        })
    }

    pub fn is_stop(&self, codon: &[u8]) -> bool {
        self.lookup(codon) == Some(CodonMeaning::Stop)
    }
}

impl Default for CodonTable {
    fn default() -> Self {
        CodonTable::standard()
    }
}

/// Translates codons from frame 0 until the first stop codon or until fewer
/// than three bases remain.
pub fn translate_cds(cds: &DnaSeq, table: &CodonTable) -> Result<ProteinSeq, SeqError> {
    if cds.len() < 3 {
        return Err(SeqError::TooShort);
    }
    let mut out = Vec::with_capacity(cds.len() / 3);
    for codon in cds.as_bytes().chunks_exact(3) {
        match table.lookup(codon).expect("DnaSeq holds only ACGT") {
            CodonMeaning::Stop => break,
            CodonMeaning::Residue(aa) => out.push(aa),
        }
    }
    if out.is_empty() {
        return Err(SeqError::EmptyTranslation);
    }
    Ok(ProteinSeq(String::from_utf8(out).expect("residues are ASCII")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FastaRecord {
    pub id: String,
    pub seq: DnaSeq,
}

/// Records rejected by [`read_fasta_lenient`], with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRecord {
    pub id: String,
    pub reason: SeqError,
}

/// Parses FASTA text. Sequence lines are concatenated; the id is the header
/// text up to the first whitespace.
pub fn read_fasta<R: BufRead>(reader: R) -> Result<Vec<FastaRecord>, SeqError> {
    let (records, skipped) = parse_fasta(reader, false)?;
    debug_assert!(skipped.is_empty());
    Ok(records)
}

/// Like [`read_fasta`] but drops records containing invalid bases instead of
/// failing. Header and duplicate-id errors are still fatal.
pub fn read_fasta_lenient<R: BufRead>(reader: R) -> Result<(Vec<FastaRecord>, Vec<SkippedRecord>), SeqError> {
    parse_fasta(reader, true)
}

fn parse_fasta<R: BufRead>(reader: R, skip_invalid: bool) -> Result<(Vec<FastaRecord>, Vec<SkippedRecord>), SeqError> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut current: Option<(String, String)> = None;

    let finish = |cur: Option<(String, String)>,
                  records: &mut Vec<FastaRecord>,
                  skipped: &mut Vec<SkippedRecord>|
     -> Result<(), SeqError> {
        let Some((id, body)) = cur else { return Ok(()) };
        match DnaSeq::parse(&body) {
            Ok(seq) => records.push(FastaRecord { id, seq }),
            Err(e) if skip_invalid => skipped.push(SkippedRecord { id, reason: e }),
            Err(e) => return Err(SeqError::InRecord { id, source: Box::new(e) }),
        }
        Ok(())
    };

    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| SeqError::Io(e.to_string()))?;
        let line = line.trim_end_matches('\r');
        if let Some(header) = line.strip_prefix('>') {
            let id = header.split_whitespace().next().unwrap_or("").to_string();
            if id.is_empty() {
                return Err(SeqError::MalformedHeader(line_no + 1));
            }
            if !seen.insert(id.clone()) {
                return Err(SeqError::DuplicateId(id));
            }
            finish(current.take(), &mut records, &mut skipped)?;
            current = Some((id, String::new()));
        } else {
            let body = line.trim();
            if body.is_empty() {
                continue;
            }
            match current.as_mut() {
                Some((_, seq)) => seq.push_str(body),
                None => return Err(SeqError::MalformedHeader(line_no + 1)),
            }
        }
    }
    finish(current.take(), &mut records, &mut skipped)?;
    Ok((records, skipped))
}

/// Writes records as FASTA with sequence lines wrapped at `width` bases.
pub fn write_fasta<W: std::io::Write>(records: &[FastaRecord], mut w: W, width: usize) -> std::io::Result<()> {
    let width = width.max(1);
    for rec in records {
        writeln!(w, ">{}", rec.id)?;
        for chunk in rec.seq.as_bytes().chunks(width) {
            w.write_all(chunk)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Master seed. Every random draw in the toolkit comes from a child seed
/// derived as `SHA-256("genepair/seed/v1" ‖ seed ‖ len(label) ‖ label ‖ index)`,
/// so work can be reordered or parallelized without changing results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn derive(self, label: &str, index: u64) -> Seed {
        let digest = self.digest(label, index);
        Seed(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
    }

    /// A ChaCha stream keyed by the full 256-bit derivation.
    pub fn rng(self, label: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.digest(label, index))
    }

    fn digest(self, label: &str, index: u64) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"genepair/seed/v1");
        h.update(self.0.to_le_bytes());
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.update(index.to_le_bytes());
        h.finalize().into()
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// Uniform iid DNA of length `len`, determined by `seed`.
pub fn random_dna(len: usize, seed: Seed) -> Result<DnaSeq, SeqError> {
    random_dna_with(len, &mut seed.rng("random-dna", 0))
}

pub fn random_dna_with<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<DnaSeq, SeqError> {
    if len == 0 {
        return Err(SeqError::ZeroLength);
    }
    let bytes = (0..len).map(|_| DNA_ALPHABET[rng.random_range(0..4)]).collect();
    Ok(DnaSeq::from_valid_bytes(bytes))
}

/// Applies substitutions and small indels.
///
/// Per input position: with probability `indel_rate / 2` the base is
/// deleted; otherwise it is substituted with probability `sub_rate` (by one of
/// the three other bases, uniformly) and, with probability `indel_rate / 2`,
/// followed by a uniformly random inserted base.
pub fn mutate_dna(seq: &DnaSeq, sub_rate: f64, indel_rate: f64, seed: Seed) -> Result<DnaSeq, SeqError> {
    mutate_dna_with(seq, sub_rate, indel_rate, &mut seed.rng("mutate-dna", 0))
}

pub fn mutate_dna_with<R: Rng + ?Sized>(
    seq: &DnaSeq,
    sub_rate: f64,
    indel_rate: f64,
    rng: &mut R,
) -> Result<DnaSeq, SeqError> {
    for rate in [sub_rate, indel_rate] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(SeqError::RateOutOfRange(rate));
        }
    }
    let half = indel_rate / 2.0;
    let mut out = Vec::with_capacity(seq.len() + 4);
    for &b in seq.as_bytes() {
        // Fixed draw count per position keeps the stream aligned.
        let u_indel: f64 = rng.random();
        let u_sub: f64 = rng.random();
        let sub_pick = rng.random_range(0..3usize);
        let ins_pick = rng.random_range(0..4usize);
        if u_indel < half {
            continue;
        }
        let base = if u_sub < sub_rate {
            let others: Vec<u8> = DNA_ALPHABET.iter().copied().filter(|&x| x != b).collect();
            others[sub_pick]
        } else {
            b
        };
        out.push(base);
        if u_indel < indel_rate {
            out.push(DNA_ALPHABET[ins_pick]);
        }
    }
    if out.is_empty() {
        return Err(SeqError::EmptySequence);
    }
    Ok(DnaSeq::from_valid_bytes(out))
}
