//! Smith–Waterman local alignment with affine gaps and ungapped
//! Karlin–Altschul E-value statistics.
//!
//! `K` is supplied by configuration (default 0.1) rather than computed from
//! the Karlin–Altschul series. Only the threshold crossing of the E-value is
//! used downstream and `λ` dominates it.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqcore::DnaSeq;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("invalid scoring scheme: {0}")]
    BadScheme(String),
    #[error("base frequencies must be positive and sum to 1")]
    BadComposition,
    #[error("expected per-position score {0} is not negative; lambda has no positive root")]
    NonNegativeExpectedScore(f64),
    #[error("invalid homology config: {0}")]
    BadConfig(String),
    #[error("line {line}: {msg}")]
    MalformedHit { line: usize, msg: String },
}

/// Affine scoring: a gap of length `k` scores `gap_open + k * gap_extend`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringScheme {
    #[serde(rename = "match")]
    pub match_score: i32,
    pub mismatch: i32,
    pub gap_open: i32,
    pub gap_extend: i32,
}

impl Default for ScoringScheme {
    fn default() -> Self {
        ScoringScheme { match_score: 2, mismatch: -3, gap_open: -5, gap_extend: -2 }
    }
}

impl ScoringScheme {
    pub fn new(match_score: i32, mismatch: i32, gap_open: i32, gap_extend: i32) -> Result<Self, AlignError> {
        let s = ScoringScheme { match_score, mismatch, gap_open, gap_extend };
        s.validate()?;
        Ok(s)
    }

    /// Linear gaps: every gap column costs `gap`.
    pub fn linear(match_score: i32, mismatch: i32, gap: i32) -> Result<Self, AlignError> {
        ScoringScheme::new(match_score, mismatch, 0, gap)
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        if self.match_score <= 0 {
            return Err(AlignError::BadScheme("match must be positive".into()));
        }
        if self.mismatch >= 0 {
            return Err(AlignError::BadScheme("mismatch must be negative".into()));
        }
        if self.gap_open > 0 || self.gap_extend > 0 {
            return Err(AlignError::BadScheme("gap penalties must be <= 0".into()));
        }
        if self.gap_open + self.gap_extend >= 0 {
            return Err(AlignError::BadScheme("a one-column gap must cost something".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn pair(&self, a: u8, b: u8) -> i32 {
        if a == b {
            self.match_score
        } else {
            self.mismatch
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub score: i32,
    /// Matched columns over all aligned columns (gap columns included).
    pub identity: f64,
    pub span_a: std::ops::Range<usize>,
    pub span_b: std::ops::Range<usize>,
    pub columns: usize,
}

impl AlignmentResult {
    fn empty() -> Self {
        AlignmentResult { score: 0, identity: 0.0, span_a: 0..0, span_b: 0..0, columns: 0 }
    }
}

const NEG: i32 = i32::MIN / 4;

#[derive(Clone, Copy, PartialEq)]
enum State {
    H,
    E,
    F,
}

/// Optimal local alignment (Gotoh recurrences, full matrices).
///
/// `E` holds alignments ending in a gap in `a` (consuming `b`), `F` those
/// ending in a gap in `b`. The reported cell is the first maximum in
/// row-major order, i.e. smallest end index in `a`, then in `b`. Traceback
/// prefers the diagonal, then `E`, then `F`.
pub fn smith_waterman(a: &DnaSeq, b: &DnaSeq, scheme: &ScoringScheme) -> AlignmentResult {
    smith_waterman_bytes(a.as_bytes(), b.as_bytes(), scheme)
}

pub fn smith_waterman_bytes(a: &[u8], b: &[u8], scheme: &ScoringScheme) -> AlignmentResult {
    let (m, n) = (a.len(), b.len());
    let w = n + 1;
    let mut h = vec![0i32; (m + 1) * w];
    let mut e = vec![NEG; (m + 1) * w];
    let mut f = vec![NEG; (m + 1) * w];
    let open = scheme.gap_open + scheme.gap_extend;
    let ext = scheme.gap_extend;

    let (mut best, mut bi, mut bj) = (0, 0, 0);
    for i in 1..=m {
        for j in 1..=n {
            let idx = i * w + j;
            let ev = (h[idx - 1] + open).max(e[idx - 1] + ext);
            let fv = (h[idx - w] + open).max(f[idx - w] + ext);
            let diag = h[idx - w - 1] + scheme.pair(a[i - 1], b[j - 1]);
            let hv = 0.max(diag).max(ev).max(fv);
            e[idx] = ev;
            f[idx] = fv;
            h[idx] = hv;
            if hv > best {
                best = hv;
                bi = i;
                bj = j;
            }
        }
    }
    if best == 0 {
        return AlignmentResult::empty();
    }

    let (mut i, mut j) = (bi, bj);
    let mut state = State::H;
    let (mut columns, mut matches) = (0usize, 0usize);
    loop {
        let idx = i * w + j;
        match state {
            State::H => {
                let hv = h[idx];
                if hv == 0 {
                    break;
                }
                if i > 0 && j > 0 && hv == h[idx - w - 1] + scheme.pair(a[i - 1], b[j - 1]) {
                    columns += 1;
                    if a[i - 1] == b[j - 1] {
                        matches += 1;
                    }
                    i -= 1;
                    j -= 1;
                } else if hv == e[idx] {
                    state = State::E;
                } else {
                    debug_assert_eq!(hv, f[idx]);
                    state = State::F;
                }
            }
            State::E => {
                columns += 1;
                let from_h = e[idx] == h[idx - 1] + open;
                j -= 1;
                if from_h {
                    state = State::H;
                }
            }
            State::F => {
                columns += 1;
                let from_h = f[idx] == h[idx - w] + open;
                i -= 1;
                if from_h {
                    state = State::H;
                }
            }
        }
    }
    AlignmentResult { score: best, identity: matches as f64 / columns as f64, span_a: i..bi, span_b: j..bj, columns }
}

/// Score-only variant restricted to diagonals `|i - j| <= band`. Gives a lower
/// bound on the full score; equal to it whenever the optimum stays in band.
pub fn smith_waterman_banded_score(a: &[u8], b: &[u8], scheme: &ScoringScheme, band: usize) -> i32 {
    let (m, n) = (a.len(), b.len());
    let open = scheme.gap_open + scheme.gap_extend;
    let ext = scheme.gap_extend;
    let mut h_prev = vec![0i32; n + 1];
    let mut f_prev = vec![NEG; n + 1];
    let mut h_cur = vec![0i32; n + 1];
    let mut f_cur = vec![NEG; n + 1];
    let mut best = 0;
    for i in 1..=m {
        let lo = i.saturating_sub(band).max(1);
        let hi = (i + band).min(n);
        let mut e = NEG;
        h_cur.iter_mut().for_each(|x| *x = 0);
        f_cur.iter_mut().for_each(|x| *x = NEG);
        for j in lo..=hi {
            e = (h_cur[j - 1] + open).max(e + ext);
            let fv = (h_prev[j] + open).max(f_prev[j] + ext);
            let hv = 0.max(h_prev[j - 1] + scheme.pair(a[i - 1], b[j - 1])).max(e).max(fv);
            f_cur[j] = fv;
            h_cur[j] = hv;
            best = best.max(hv);
        }
        std::mem::swap(&mut h_prev, &mut h_cur);
        std::mem::swap(&mut f_prev, &mut f_cur);
    }
    best
}

/// Ungapped Karlin–Altschul parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KarlinParams {
    pub lambda: f64,
    pub k: f64,
}

pub const UNIFORM_COMPOSITION: [f64; 4] = [0.25; 4];
pub const DEFAULT_K: f64 = 0.1;

/// Positive root of `Σ pᵢpⱼ exp(λ s(i,j)) = 1`, by bisection.
pub fn estimate_lambda(scheme: &ScoringScheme, composition: &[f64; 4]) -> Result<f64, AlignError> {
    if composition.iter().any(|&p| !(p > 0.0)) || (composition.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(AlignError::BadComposition);
    }
    let mut expected = 0.0;
    for (i, &pi) in composition.iter().enumerate() {
        for (j, &pj) in composition.iter().enumerate() {
            let s = if i == j { scheme.match_score } else { scheme.mismatch };
            expected += pi * pj * s as f64;
        }
    }
    if expected >= 0.0 || scheme.match_score <= 0 {
        return Err(AlignError::NonNegativeExpectedScore(expected));
    }
    let f = |lambda: f64| lambda_residual(scheme, composition, lambda);
    let mut hi = 1.0;
    while f(hi) <= 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    // f < 0 on (0, root) and > 0 beyond it.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `Σ pᵢpⱼ exp(λ s(i,j)) − 1`.
pub fn lambda_residual(scheme: &ScoringScheme, composition: &[f64; 4], lambda: f64) -> f64 {
    let mut total = 0.0;
    for (i, &pi) in composition.iter().enumerate() {
        for (j, &pj) in composition.iter().enumerate() {
            let s = if i == j { scheme.match_score } else { scheme.mismatch };
            total += pi * pj * (lambda * s as f64).exp();
        }
    }
    total - 1.0
}

/// `K · m · n · exp(−λ S)`.
pub fn evalue(score: i32, m: usize, n: usize, karlin: &KarlinParams) -> f64 {
    karlin.k * m as f64 * n as f64 * (-karlin.lambda * score as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Homology {
    Positive,
    Negative,
    Ambiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomologyConfig {
    pub scheme: ScoringScheme,
    pub karlin: KarlinParams,
    pub evalue_threshold: f64,
    pub negative_min_evalue: f64,
    pub negative_max_identity: f64,
}

impl Default for HomologyConfig {
    /// Default scheme, `λ` for uniform composition, `K = 0.1`, positives
    /// below `1e-5`, negatives at or above `1e-3`. The identity cap is off
    /// (1.0): the best local hit between unrelated 40-mers is usually a short
    /// exact match, so an identity cap would reject most true negatives.
    fn default() -> Self {
        let scheme = ScoringScheme::default();
        let lambda = estimate_lambda(&scheme, &UNIFORM_COMPOSITION).expect("default scheme has negative drift");
        HomologyConfig {
            scheme,
            karlin: KarlinParams { lambda, k: DEFAULT_K },
            evalue_threshold: 1e-5,
            negative_min_evalue: 1e-3,
            negative_max_identity: 1.0,
        }
    }
}

impl HomologyConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        self.scheme.validate()?;
        if !(self.karlin.lambda > 0.0 && self.karlin.k > 0.0) {
            return Err(AlignError::BadConfig("lambda and K must be positive".into()));
        }
        if !(self.evalue_threshold > 0.0) || !(self.evalue_threshold < self.negative_min_evalue) {
            return Err(AlignError::BadConfig("need 0 < evalue_threshold < negative_min_evalue".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_max_identity) {
            return Err(AlignError::BadConfig("negative_max_identity must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn classify_evalue(&self, evalue: f64, identity: f64) -> Homology {
        if evalue < self.evalue_threshold {
            Homology::Positive
        } else if evalue >= self.negative_min_evalue && identity <= self.negative_max_identity {
            Homology::Negative
        } else {
            Homology::Ambiguous
        }
    }
}

/// Full outcome of a homology check.
#[derive(Debug, Clone, PartialEq)]
pub struct HomologyCall {
    pub class: Homology,
    pub alignment: AlignmentResult,
    pub evalue: f64,
}

pub fn homology_call(a: &DnaSeq, b: &DnaSeq, cfg: &HomologyConfig) -> HomologyCall {
    let alignment = smith_waterman(a, b, &cfg.scheme);
    let ev = evalue(alignment.score, a.len(), b.len(), &cfg.karlin);
    HomologyCall { class: cfg.classify_evalue(ev, alignment.identity), alignment, evalue: ev }
}

pub fn is_homologous(a: &DnaSeq, b: &DnaSeq, cfg: &HomologyConfig) -> Homology {
    homology_call(a, b, cfg).class
}

/// One externally computed hit, e.g. a row of tabular BLAST output.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalHit {
    pub id_a: String,
    pub id_b: String,
    pub score: f64,
    pub evalue: f64,
}

impl ExternalHit {
    /// Classifies by E-value alone; identity is not available.
    pub fn classify(&self, cfg: &HomologyConfig) -> Homology {
        cfg.classify_evalue(self.evalue, 0.0)
    }
}

/// Reads `id_a<TAB>id_b<TAB>score<TAB>evalue` rows. Blank lines and lines
/// starting with `#` are skipped.
pub fn read_external_hits<R: BufRead>(reader: R) -> Result<Vec<ExternalHit>, AlignError> {
    let mut hits = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| AlignError::MalformedHit { line: line_no, msg: e.to_string() })?;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(AlignError::MalformedHit {
                line: line_no,
                msg: format!("expected 4 columns, got {}", cols.len()),
            });
        }
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| AlignError::MalformedHit { line: line_no, msg: format!("bad {what} {s:?}") })
        };
        hits.push(ExternalHit {
            id_a: cols[0].to_string(),
            id_b: cols[1].to_string(),
            score: num(cols[2], "score")?,
            evalue: num(cols[3], "evalue")?,
        });
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::{random_dna, Seed};
    use proptest::prelude::*;

    fn dna(s: &str) -> DnaSeq {
        DnaSeq::parse(s).unwrap()
    }

    #[test]
    fn identical_sequences() {
        let r = smith_waterman(&dna("ACGT"), &dna("ACGT"), &ScoringScheme::default());
        assert_eq!(r.score, 8);
        assert_eq!(r.identity, 1.0);
        assert_eq!(r.span_a, 0..4);
        assert_eq!(r.span_b, 0..4);
    }

    #[test]
    fn no_positive_alignment() {
        let r = smith_waterman(&dna("AAAA"), &dna("CCCC"), &ScoringScheme::default());
        assert_eq!(r.score, 0);
        assert!(r.span_a.is_empty() && r.span_b.is_empty());
    }

    #[test]
    fn gapped_alignment_traceback() {
        // ACGTTTACGT vs ACGTACGT: 8 matches (16) and a 2-gap (-5 - 4) = 7,
        // versus the best ungapped 4-mer match at 8.
        let s = ScoringScheme::default();
        let r = smith_waterman(&dna("ACGTTTACGTACGT"), &dna("ACGTACGTACGT"), &s);
        assert!(r.score >= 8);
        let linear = ScoringScheme::linear(3, -3, -2).unwrap();
        let r = smith_waterman(&dna("AAAACCCC"), &dna("AAAAGCCCC"), &linear);
        // 8 matches, one gap column.
        assert_eq!(r.score, 8 * 3 - 2);
        assert_eq!(r.columns, 9);
        assert!((r.identity - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(r.span_a, 0..8);
        assert_eq!(r.span_b, 0..9);
    }

    #[test]
    fn ties_pick_smallest_end() {
        let r = smith_waterman(&dna("ACGTTACGT"), &dna("ACGT"), &ScoringScheme::default());
        assert_eq!(r.score, 8);
        assert_eq!(r.span_a, 0..4);
    }

    #[test]
    fn lambda_closed_form() {
        let s = ScoringScheme::linear(1, -1, -2).unwrap();
        let l = estimate_lambda(&s, &UNIFORM_COMPOSITION).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-9, "{l}");
    }

    #[test]
    fn lambda_default_residual() {
        let s = ScoringScheme::default();
        let l = estimate_lambda(&s, &UNIFORM_COMPOSITION).unwrap();
        let direct = 0.25 * (2.0 * l).exp() + 0.75 * (-3.0 * l).exp() - 1.0;
        assert!(direct.abs() < 1e-8, "{direct}");
        assert!(l > 0.0);
    }

    #[test]
    fn lambda_errors() {
        let bad = ScoringScheme { match_score: 1, mismatch: 1, gap_open: -1, gap_extend: -1 };
        assert!(matches!(estimate_lambda(&bad, &UNIFORM_COMPOSITION), Err(AlignError::NonNegativeExpectedScore(_))));
        let s = ScoringScheme::default();
        assert_eq!(estimate_lambda(&s, &[0.5, 0.5, 0.0, 0.0]), Err(AlignError::BadComposition));
        assert_eq!(estimate_lambda(&s, &[0.3, 0.3, 0.3, 0.3]), Err(AlignError::BadComposition));
    }

    #[test]
    fn evalue_formula() {
        let k = KarlinParams { lambda: 1.0, k: 0.5 };
        let e = evalue(23, 100, 100, &k);
        assert!((e - 0.5e4 * (-23f64).exp()).abs() < 1e-20);
        assert!((e - 5.13e-7).abs() < 0.01e-7);
        assert!(evalue(24, 100, 100, &k) < e);
        assert_eq!(evalue(23, 200, 100, &k), 2.0 * e);
    }

    #[test]
    fn self_pair_is_positive() {
        let cfg = HomologyConfig::default();
        let x = random_dna(40, Seed(11)).unwrap();
        let call = homology_call(&x, &x, &cfg);
        assert_eq!(call.alignment.score, 80);
        assert!(call.evalue < 1e-5);
        assert_eq!(call.class, Homology::Positive);
    }

    #[test]
    fn random_pairs_are_negative() {
        let cfg = HomologyConfig::default();
        let s = Seed(2024);
        let negatives = (0..1000)
            .filter(|&i| {
                let a = random_dna(40, s.derive("a", i)).unwrap();
                let b = random_dna(40, s.derive("b", i)).unwrap();
                is_homologous(&a, &b, &cfg) == Homology::Negative
            })
            .count();
        assert!(negatives >= 990, "{negatives}");
    }

    #[test]
    fn gray_zone_is_ambiguous() {
        let cfg = HomologyConfig::default();
        let mid = (cfg.evalue_threshold * cfg.negative_min_evalue).sqrt();
        assert_eq!(cfg.classify_evalue(mid, 0.5), Homology::Ambiguous);
        assert_eq!(cfg.classify_evalue(cfg.evalue_threshold, 0.5), Homology::Ambiguous);
        assert_eq!(cfg.classify_evalue(cfg.negative_min_evalue, 0.5), Homology::Negative);
        let strict = HomologyConfig { negative_max_identity: 0.4, ..cfg };
        assert_eq!(strict.classify_evalue(1.0, 0.5), Homology::Ambiguous);
    }

    #[test]
    fn config_validation() {
        assert!(HomologyConfig::default().validate().is_ok());
        let c = HomologyConfig { negative_min_evalue: 1e-6, ..HomologyConfig::default() };
        assert!(c.validate().is_err());
        assert!(ScoringScheme::new(0, -1, -1, -1).is_err());
        assert!(ScoringScheme::new(1, 1, -1, -1).is_err());
    }

    #[test]
    fn external_hits() {
        let text = "# a\tb\tscore\tevalue\nq1\ts1\t55.2\t1e-12\nq2\ts2\t10\t3.5\n";
        let hits = read_external_hits(text.as_bytes()).unwrap();
        assert_eq!(hits.len(), 2);
        let cfg = HomologyConfig::default();
        assert_eq!(hits[0].classify(&cfg), Homology::Positive);
        assert_eq!(hits[1].classify(&cfg), Homology::Negative);
        assert!(matches!(read_external_hits("a\tb\t1\n".as_bytes()), Err(AlignError::MalformedHit { line: 1, .. })));
    }

    #[test]
    fn banded_matches_full_with_wide_band() {
        let s = ScoringScheme::default();
        for i in 0..50 {
            let a = random_dna(30, Seed(i).derive("a", 0)).unwrap();
            let b = random_dna(35, Seed(i).derive("b", 0)).unwrap();
            let full = smith_waterman(&a, &b, &s).score;
            assert_eq!(smith_waterman_banded_score(a.as_bytes(), b.as_bytes(), &s, 40), full);
            assert!(smith_waterman_banded_score(a.as_bytes(), b.as_bytes(), &s, 3) <= full);
        }
    }

    proptest! {
        #[test]
        fn symmetric_score(a in "[ACGT]{1,30}", b in "[ACGT]{1,30}") {
            let s = ScoringScheme::default();
            prop_assert_eq!(smith_waterman(&dna(&a), &dna(&b), &s).score, smith_waterman(&dna(&b), &dna(&a), &s).score);
        }

        #[test]
        fn self_score(a in "[ACGT]{1,40}") {
            let s = ScoringScheme::default();
            prop_assert_eq!(smith_waterman(&dna(&a), &dna(&a), &s).score, 2 * a.len() as i32);
        }

        #[test]
        fn appending_never_lowers_score(a in "[ACGT]{1,20}", b in "[ACGT]{1,20}", x in "[ACGT]{1,5}") {
            let s = ScoringScheme::default();
            let base = smith_waterman(&dna(&a), &dna(&b), &s).score;
            let (ax, bx) = (a.clone() + &x, b.clone() + &x);
            prop_assert!(smith_waterman(&dna(&ax), &dna(&b), &s).score >= base);
            prop_assert!(smith_waterman(&dna(&a), &dna(&bx), &s).score >= base);
        }

        #[test]
        fn result_invariants(a in "[ACGT]{1,25}", b in "[ACGT]{1,25}") {
            let s = ScoringScheme::default();
            let r = smith_waterman(&dna(&a), &dna(&b), &s);
            prop_assert!(r.score >= 0);
            prop_assert!(r.span_a.end <= a.len() && r.span_b.end <= b.len());
            prop_assert!((0.0..=1.0).contains(&r.identity));
            if r.identity == 1.0 {
                prop_assert_eq!(r.score, s.match_score * r.columns as i32);
            }
            if r.score > 0 {
                // Re-score the reported spans globally; must reproduce the score.
                let sub = smith_waterman(&dna(&a[r.span_a.clone()]), &dna(&b[r.span_b.clone()]), &s);
                prop_assert_eq!(sub.score, r.score);
            }
        }
    }
}
