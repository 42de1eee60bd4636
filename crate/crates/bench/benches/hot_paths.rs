use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use genepair::align::{smith_waterman, smith_waterman_banded_score};
use genepair::datasetgen::{gen_dna_pairs, DnaPairConfig};
use genepair::evalharness::binomial_test;
use genepair::model::{Example, Target};
use genepair::seqcore::{random_dna, read_fasta};
use genepair::toklab::{encode_pair, PairMode};
use genepair::{Arch, BpeTokenizer, ModelConfig, PairRecord, Params, ScoringScheme, Seed, Tokenizer};

const ENGLISH: &str = include_str!("../../../fixtures/english.txt");
const CDS: &str = include_str!("../../../fixtures/cds.fasta");

fn alignment(c: &mut Criterion) {
    let scheme = ScoringScheme::default();
    for len in [40, 200] {
        let a = random_dna(len, Seed(1)).unwrap();
        let b = random_dna(len, Seed(2)).unwrap();
        c.bench_function(&format!("smith_waterman_{len}x{len}"), |bch| {
            bch.iter(|| smith_waterman(black_box(&a), black_box(&b), &scheme))
        });
    }
    let a = random_dna(1000, Seed(3)).unwrap();
    let b = random_dna(1000, Seed(4)).unwrap();
    c.bench_function("banded_score_1000_band16", |bch| {
        bch.iter(|| smith_waterman_banded_score(black_box(a.as_bytes()), black_box(b.as_bytes()), &scheme, 16))
    });
}

fn dataset(c: &mut Criterion) {
    let sources = read_fasta(CDS.as_bytes()).unwrap();
    let cfg = DnaPairConfig { n: 100, seed: Seed(5), ..DnaPairConfig::default() };
    c.bench_function("gen_dna_pairs_100", |bch| bch.iter(|| gen_dna_pairs(black_box(&sources), &cfg).unwrap()));
}

fn tokenizer(c: &mut Criterion) {
    let lines: Vec<&str> = ENGLISH.lines().take(3000).collect();
    let tok = BpeTokenizer::train(&lines, 500).unwrap();
    let sample = lines[..200].join(" ");
    c.bench_function("bpe_encode_200_sentences", |bch| bch.iter(|| tok.encode(black_box(&sample))));
    let mut g = c.benchmark_group("bpe_train");
    g.sample_size(10);
    g.bench_function("bpe_train_3000_lines_vocab500", |bch| {
        bch.iter(|| BpeTokenizer::train(black_box(&lines), 500).unwrap())
    });
    g.finish();
}

fn model(c: &mut Criterion) {
    let lines: Vec<&str> = ENGLISH.lines().take(2000).collect();
    let tok = BpeTokenizer::train(&lines, 300).unwrap();
    for arch in [Arch::DecoderCausal, Arch::EncoderBidir] {
        let cfg = ModelConfig::tiny(arch, tok.vocab_len());
        let params = Params::<f64>::init(&cfg, Seed(6)).unwrap();
        let batch: Vec<Example> = lines
            .chunks(2)
            .take(16)
            .enumerate()
            .map(|(i, w)| {
                let rec = PairRecord { sentence1: w[0].into(), sentence2: w[1].into(), label: (i % 2) as u8 };
                let mode: PairMode = arch.pair_mode();
                Example {
                    ids: encode_pair(&tok, &rec, mode, cfg.max_seq_len),
                    target: Target::Class(rec.label),
                    dropout: None,
                }
            })
            .collect();
        c.bench_function(&format!("loss_and_grad_{arch:?}_batch16"), |bch| {
            bch.iter(|| params.loss_and_grad(black_box(&batch)).unwrap())
        });
    }
}

fn harness(c: &mut Criterion) {
    c.bench_function("binomial_test_n10000", |bch| {
        bch.iter(|| binomial_test(black_box(5123), black_box(10_000)).unwrap())
    });
}

criterion_group!(benches, alignment, dataset, tokenizer, model, harness);
criterion_main!(benches);
