//! Acceptance run: one PASS/FAIL line per criterion. Criteria listed in
//! `KNOWN_UNMET` are reported but do not fail the target; see the README.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use genepair::align::{estimate_lambda, lambda_residual, smith_waterman};
use genepair::datasetgen::{gen_text_pairs, read_jsonl, split, SplitFractions, TextPairConfig};
use genepair::evalharness::{binomial_test, confusion, evaluate, parse_report_csv};
use genepair::model::{accuracy_on, finetune, Example, Target};
use genepair::seqcore::{random_dna, translate_cds, CodonMeaning, CodonTable};
use genepair::toklab::{fit_truncation, token_stats, MASK_ID, PAD_ID};
use genepair::{Arch, BpeTokenizer, DnaSeq, ModelConfig, PairRecord, Params, ScoringScheme, Seed, TrainConfig};
use num_bigint::BigUint;
use rand::Rng;

const KNOWN_UNMET: &[u32] = &[8];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn genepair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genepair")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn english_lines() -> Vec<String> {
    std::fs::read_to_string(fixture("english.txt"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect()
}

// 1 ---------------------------------------------------------------------

/// Best local alignment score by enumerating every column path from every
/// start cell. Each path prefix is a distinct local alignment.
fn brute_force_local(a: &[u8], b: &[u8], sc: &ScoringScheme) -> i32 {
    #[derive(Clone, Copy, PartialEq)]
    enum Last {
        Pair,
        GapA,
        GapB,
    }
    fn walk(a: &[u8], b: &[u8], i: usize, j: usize, score: i32, last: Last, sc: &ScoringScheme, best: &mut i32) {
        *best = (*best).max(score);
        if i < a.len() && j < b.len() {
            walk(a, b, i + 1, j + 1, score + sc.pair(a[i], b[j]), Last::Pair, sc, best);
        }
        if j < b.len() {
            let open = if last == Last::GapA { 0 } else { sc.gap_open };
            walk(a, b, i, j + 1, score + open + sc.gap_extend, Last::GapA, sc, best);
        }
        if i < a.len() {
            let open = if last == Last::GapB { 0 } else { sc.gap_open };
            walk(a, b, i + 1, j, score + open + sc.gap_extend, Last::GapB, sc, best);
        }
    }
    let mut best = 0;
    for i in 0..=a.len() {
        for j in 0..=b.len() {
            walk(a, b, i, j, 0, Last::Pair, sc, &mut best);
        }
    }
    best
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let schemes = [ScoringScheme::default(), ScoringScheme::new(1, -1, -2, -1).unwrap()];
    let mut rng = Seed(1).rng("acceptance/alignment", 0);
    let mut mismatches = 0;
    for k in 0..500u64 {
        let (la, lb) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let a = random_dna(la, Seed(k).derive("a", 0)).unwrap();
        let b = random_dna(lb, Seed(k).derive("b", 0)).unwrap();
        for sc in &schemes {
            if smith_waterman(&a, &b, sc).score != brute_force_local(a.as_bytes(), b.as_bytes(), sc) {
                mismatches += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(mismatches == 0 && secs < 60.0, format!("500 pairs x 2 schemes, {mismatches} mismatches, {secs:.2}s"))
}

// 2 ---------------------------------------------------------------------

fn criterion_2() -> Verdict {
    let uniform = [0.25; 4];
    let unit = estimate_lambda(&ScoringScheme::linear(1, -1, -1).unwrap(), &uniform).unwrap();
    let err = (unit - 3f64.ln()).abs();
    let default = ScoringScheme::default();
    let lambda = estimate_lambda(&default, &uniform).unwrap();
    let residual = lambda_residual(&default, &uniform, lambda).abs();
    verdict(
        err < 1e-6 && residual < 1e-8,
        format!("(+1,-1) lambda {unit:.12} (|err| {err:.1e}); (+2,-3) lambda {lambda:.9}, residual {residual:.1e}"),
    )
}

// 3 ---------------------------------------------------------------------

fn criterion_3() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cds = fixture("cds.fasta");
    let mut notes = Vec::new();
    let mut pass = true;
    for (cmd, name) in [("gen-dna-pairs", "dna"), ("gen-dna-protein-pairs", "dnaprot")] {
        let gen = |file: &str| {
            let out = dir.path().join(file);
            let r = genepair(&[cmd, "--sources", s(&cds), "--n", "1000", "--seed", "42", "--out", s(&out)]);
            assert!(r.status.success(), "{cmd}: {}", String::from_utf8_lossy(&r.stderr));
            out
        };
        let first = gen(&format!("{name}_a.jsonl"));
        let second = gen(&format!("{name}_b.jsonl"));
        let verify = genepair(&["verify-dataset", s(&first)]);
        let verified = verify.status.success();
        let recs = read_jsonl(std::io::BufReader::new(std::fs::File::open(&first).unwrap())).unwrap();
        let pos = recs.iter().filter(|r| r.label == 1).count();
        let identical = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap()
            && std::fs::read(dir.path().join(format!("{name}_a.manifest.json"))).unwrap()
                == std::fs::read(dir.path().join(format!("{name}_b.manifest.json"))).unwrap();
        pass &= verified && recs.len() == 1000 && pos == 500 && identical;
        notes.push(format!(
            "{name}: {} records, {pos} positive, verify {}, regeneration {}",
            recs.len(),
            if verified { "ok" } else { "FAILED" },
            if identical { "identical" } else { "DIFFERS" }
        ));
    }
    verdict(pass, notes.join("; "))
}

// 4 ---------------------------------------------------------------------

fn criterion_4() -> Verdict {
    // Standard code, codons enumerated in TCAG order.
    const GOLDEN: &str = "FFLLSSSSYY**CC*WLLLLPPPPHHQQRRRRIIIMTTTTNNKKSSRRVVVVAAAADDEEGGGG";
    let bases = b"TCAG";
    let table = CodonTable::standard();
    let mut wrong = Vec::new();
    let mut k = 0;
    for &x in bases {
        for &y in bases {
            for &z in bases {
                let codon = [x, y, z];
                let want = GOLDEN.as_bytes()[k];
                let got = match table.lookup(&codon) {
                    Some(CodonMeaning::Stop) => b'*',
                    Some(CodonMeaning::Residue(aa)) => aa,
                    None => b'?',
                };
                if got != want {
                    wrong.push(String::from_utf8_lossy(&codon).into_owned());
                }
                k += 1;
            }
        }
    }
    let mut stops_ok = true;
    for stop in ["TAA", "TAG", "TGA"] {
        let cds = DnaSeq::parse(&format!("ATGGCC{stop}TGGTGG")).unwrap();
        stops_ok &= translate_cds(&cds, &table).unwrap().as_str() == "MA";
    }
    verdict(
        wrong.is_empty() && stops_ok,
        format!("{} of 64 codons wrong {:?}; stops terminate: {stops_ok}", wrong.len(), wrong),
    )
}

// 5 ---------------------------------------------------------------------

fn criterion_5() -> Verdict {
    let lines = english_lines();
    let cut = lines.len() * 9 / 10;
    let tok = BpeTokenizer::train(&lines[..cut], 2000).unwrap();
    let en = token_stats(&tok, &lines[cut..]).unwrap().chars_per_token;
    let dna: Vec<String> =
        (0..500).map(|i| random_dna(40, Seed(i).derive("cpt", 0)).unwrap().as_str().to_string()).collect();
    let cpt_dna = token_stats(&tok, &dna).unwrap().chars_per_token;
    let ratio = en / cpt_dna;
    verdict(
        ratio >= 2.0 && (1.0..=2.0).contains(&cpt_dna),
        format!("cpt_en {en:.3}, cpt_dna {cpt_dna:.3}, ratio {ratio:.3}"),
    )
}

// 6 ---------------------------------------------------------------------

fn criterion_6() -> Verdict {
    let n = fit_truncation(50, 1.6);
    verdict(n == 40, format!("fit_truncation(50, 1.6) = {n}"))
}

// 7 ---------------------------------------------------------------------

fn grad_check(cfg: &ModelConfig, lm: bool, seed: u64) -> f64 {
    let mut rng = Seed(seed).rng("acceptance/gradcheck", 0);
    let mut p = Params::<f64>::init(cfg, Seed(seed)).unwrap();
    for x in p.as_flat_mut() {
        *x += rng.random_range(-0.3..0.3);
    }
    let v = cfg.vocab_size as u32;
    let batch: Vec<Example> = (0..3)
        .map(|_| {
            let len = rng.random_range(3..9);
            let mut ids: Vec<u32> = (0..len).map(|_| rng.random_range(5..v)).collect();
            let target = match (lm, cfg.arch) {
                (true, Arch::DecoderCausal) => Target::Lm((0..len - 1).map(|t| (t, ids[t + 1])).collect()),
                (true, Arch::EncoderBidir) => {
                    let pos = rng.random_range(0..len);
                    let t = Target::Lm(vec![(pos, ids[pos])]);
                    ids[pos] = MASK_ID;
                    t
                }
                (false, _) => {
                    ids.push(PAD_ID);
                    Target::Class(rng.random_range(0..2))
                }
            };
            Example { ids, target, dropout: None }
        })
        .collect();
    let (_, grad) = p.loss_and_grad(&batch).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let i = rng.random_range(0..p.num_params());
        let orig = p.as_flat()[i];
        p.as_flat_mut()[i] = orig + eps;
        let up = p.loss(&batch).unwrap();
        p.as_flat_mut()[i] = orig - eps;
        let down = p.loss(&batch).unwrap();
        p.as_flat_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-6));
    }
    worst
}

fn criterion_7() -> Verdict {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for (k, (v, d, l, h)) in [(12, 8, 1, 2), (15, 12, 2, 3), (10, 8, 2, 4)].into_iter().enumerate() {
        for arch in [Arch::DecoderCausal, Arch::EncoderBidir] {
            for lm in [true, false] {
                let cfg = ModelConfig {
                    arch,
                    vocab_size: v,
                    d_model: d,
                    n_layers: l,
                    n_heads: h,
                    d_ff: 2 * d,
                    max_seq_len: 12,
                    dropout: 0.0,
                };
                worst = worst.max(grad_check(&cfg, lm, 100 + k as u64));
                runs += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst < 1e-3 && secs < 300.0,
        format!("{runs} checks x 50 coordinates, max rel err {worst:.2e}, {secs:.1}s"),
    )
}

// 8 ---------------------------------------------------------------------

fn criterion_8() -> Verdict {
    let lines = english_lines();
    let tok = BpeTokenizer::train(&lines, 2000).unwrap();
    let ds =
        gen_text_pairs(&lines, &TextPairConfig { n: 2500, noise: 0.1, max_chars: Some(90), seed: Seed(8) }).unwrap();
    let parts = split(&ds, SplitFractions::default(), Seed(8)).unwrap();
    let vocab = genepair::Tokenizer::vocab_len(&tok);

    // Overfit 32 pairs with the default tiny decoder.
    let small: Vec<PairRecord> = parts.train.records[..32].to_vec();
    let mut p = Params::<f64>::init(&ModelConfig::tiny(Arch::DecoderCausal, vocab), Seed(81)).unwrap();
    let tc = TrainConfig { lr: 1e-3, batch_size: 32, steps: 500, seed: Seed(82), ..TrainConfig::finetune() };
    finetune(&mut p, &tok, &small, &tc, |_| {}).unwrap();
    let overfit = accuracy_on(&p, &tok, &small).unwrap();

    // Fine-tune on 2000 pairs and score the held-out dev split.
    let t0 = Instant::now();
    let train = &parts.train.records;
    let mut p = Params::<f64>::init(&ModelConfig::tiny(Arch::DecoderCausal, vocab), Seed(83)).unwrap();
    let mut tc = TrainConfig { lr: 1e-3, batch_size: 16, seed: Seed(84), ..TrainConfig::finetune() };
    tc.steps = tc.steps_for_epochs(train.len(), 3);
    finetune(&mut p, &tok, train, &tc, |_| {}).unwrap();
    let dev = accuracy_on(&p, &tok, &parts.dev.records).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        overfit == 1.0 && train.len() == 2000 && dev >= 0.85 && secs < 600.0,
        format!(
            "32-pair train accuracy {overfit:.3} after 500 steps; {} train pairs -> dev accuracy {dev:.3} (n={}) in {secs:.0}s",
            train.len(),
            parts.dev.records.len()
        ),
    )
}

// 9 ---------------------------------------------------------------------

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let r = genepair(&["grid", "--grid", s(&fixture("grid/desk_grid.json")), "--out-dir", s(dir.path())]);
    let elapsed = t0.elapsed();
    if !r.status.success() {
        return verdict(false, format!("grid failed: {}", String::from_utf8_lossy(&r.stderr)));
    }
    println!("{}", String::from_utf8_lossy(&r.stdout));
    let report = parse_report_csv(&std::fs::read_to_string(dir.path().join("report.csv")).unwrap()).unwrap();
    let mut pass = elapsed < Duration::from_secs(1800) && !report.cells.is_empty();
    let mut counts = [0usize; 3];
    for c in &report.cells {
        let Ok(e) = &c.outcome else {
            pass = false;
            continue;
        };
        match c.test.as_str() {
            "test-en" => {
                counts[0] += 1;
                pass &= e.p_value_vs_random < 0.01 && e.accuracy > 0.5;
            }
            "test-dnaprot" => {
                counts[1] += 1;
                pass &= e.random_indistinguishable;
            }
            "test-dna" => {
                counts[2] += 1;
                pass &= e.n > 0 && e.accuracy.is_finite() && (0.0..=1.0).contains(&e.p_value_vs_random);
            }
            _ => {}
        }
    }
    pass &= counts.iter().all(|&k| k > 0);
    verdict(
        pass,
        format!(
            "{} cells ({} text, {} DNA-protein, {} DNA) in {:.0}s",
            report.cells.len(),
            counts[0],
            counts[1],
            counts[2],
            elapsed.as_secs_f64()
        ),
    )
}

// 10 --------------------------------------------------------------------

/// Two-sided exact binomial p-value at p0 = 1/2 from integer binomial
/// coefficients.
fn exact_p(k: u64, n: u64) -> f64 {
    let mut coef = BigUint::from(1u32);
    let mut row = vec![coef.clone()];
    for i in 0..n {
        coef = coef * BigUint::from(n - i) / BigUint::from(i + 1);
        row.push(coef.clone());
    }
    let lower: BigUint = row[..=k as usize].iter().sum();
    let upper: BigUint = row[k as usize..].iter().sum();
    let tail = lower.min(upper) * BigUint::from(2u32);
    let total = BigUint::from(1u32) << n;
    let ratio = tail.to_string().parse::<f64>().unwrap() / total.to_string().parse::<f64>().unwrap();
    ratio.min(1.0)
}

fn criterion_10() -> Verdict {
    let p50 = binomial_test(50, 100).unwrap();
    let p60 = binomial_test(60, 100).unwrap();
    let oracle60 = exact_p(60, 100);

    let mut rng = Seed(10).rng("acceptance/harness", 0);
    let golds: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
    let good: Vec<u8> = golds.iter().map(|&g| if rng.random_bool(0.85) { g } else { 1 - g }).collect();
    let inverted: Vec<u8> = good.iter().map(|&p| 1 - p).collect();
    let swapped = evaluate(&inverted, &golds).unwrap();
    let direct = evaluate(&good, &golds).unwrap();

    let mut sums_ok = true;
    for n in [1usize, 7, 100, 1000] {
        let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let golds: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let c = confusion(&preds, &golds).unwrap();
        sums_ok &= c.counts.iter().flatten().sum::<u64>() == n as u64;
    }
    let pass = p50 == 1.0
        && (p60 - oracle60).abs() < 1e-3
        && (oracle60 - 0.057).abs() < 1e-3
        && swapped.label_swap_detected
        && !direct.label_swap_detected
        && sums_ok;
    verdict(
        pass,
        format!(
            "p(50,100)={p50}; p(60,100)={p60:.6} vs oracle {oracle60:.6}; inverted eval swap={} (acc {:.3}); confusion sums ok: {sums_ok}",
            swapped.label_swap_detected, swapped.accuracy
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Verdict); 10] = [
        (1, "alignment oracle equivalence", criterion_1),
        (2, "lambda root-finding", criterion_2),
        (3, "dataset verification closure", criterion_3),
        (4, "codon table", criterion_4),
        (5, "token-budget asymmetry", criterion_5),
        (6, "truncation rule", criterion_6),
        (7, "gradient correctness", criterion_7),
        (8, "optimization sanity", criterion_8),
        (9, "transfer-experiment grid", criterion_9),
        (10, "harness self-checks", criterion_10),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut unexpected = Vec::new();
    let mut lines = Vec::new();
    for (id, name, f) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let status = if v.pass { "PASS" } else { "FAIL" };
        let line = format!("criterion {id:>2} {status} [{name}] {} ({:.1}s)", v.detail, t0.elapsed().as_secs_f64());
        println!("{line}");
        lines.push(line);
        if !v.pass && !KNOWN_UNMET.contains(&id) {
            unexpected.push(id);
        }
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{l}");
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
