//! Benchmark toolkit for natural-language to gene-language transfer
//! experiments on sequence-pair classification.
//!
//! The pipeline: generate alignment-verified DNA-pair and coding DNA–protein
//! pair datasets ([`datasetgen`]), measure and align token budgets across text
//! and DNA ([`toklab`]), train tiny transformer classifiers ([`model`]) and
//! evaluate them with accuracy, confusion matrices and exact binomial tests
//! against chance ([`evalharness`]).

pub mod align;
pub mod datasetgen;
pub mod evalharness;
pub mod model;
pub mod seqcore;
pub mod toklab;

pub use align::{AlignmentResult, Homology, HomologyConfig, KarlinParams, ScoringScheme};
pub use datasetgen::{DatasetManifest, PairDataset, PairRecord, Task};
pub use evalharness::{Confusion, EvalReport, ExperimentGrid, GridReport, GridSpec};
pub use model::{Arch, ModelConfig, Params, TrainConfig};
pub use seqcore::{DnaSeq, FastaRecord, ProteinSeq, Seed};
pub use toklab::{AnyTokenizer, BpeTokenizer, PairMode, TokenStats, Tokenizer, WordPieceTokenizer};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
