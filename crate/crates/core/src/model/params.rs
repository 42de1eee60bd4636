use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, Scalar};
use crate::seqcore::Seed;

const INIT_STD: f64 = 0.02;

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }

    /// Layer-norm gains start at 1, everything else is random or zero.
    fn init(&self) -> Init {
        let leaf = self.name.rsplit('.').next().unwrap_or("");
        match leaf {
            "ln1_g" | "ln2_g" | "lnf_g" => Init::One,
            l if l.starts_with('b') || l.ends_with("_b") => Init::Zero,
            _ => Init::Normal,
        }
    }

    /// Biases and layer-norm parameters are exempt from weight decay.
    pub fn decays(&self) -> bool {
        self.init() == Init::Normal
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Zero,
    One,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Offsets {
    pub tok: usize,
    pub pos: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub lm: usize,
    pub cls_w: usize,
    pub cls_b: usize,
}

pub(crate) fn layout(cfg: &ModelConfig) -> (Vec<TensorSpec>, Offsets) {
    let (v, d, f, l) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
    let mut specs = Vec::new();
    let mut at = 0;
    let mut push = |name: String, rows: usize, cols: usize| {
        let offset = at;
        specs.push(TensorSpec { name, offset, rows, cols });
        at += rows * cols;
        offset
    };
    let tok = push("tok_emb".into(), v, d);
    let pos = push("pos_emb".into(), l, d);
    let layers = (0..cfg.n_layers)
        .map(|i| {
            let mut p = |leaf: &str, r, c| push(format!("layer{i}.{leaf}"), r, c);
            LayerOffsets {
                ln1_g: p("ln1_g", 1, d),
                ln1_b: p("ln1_b", 1, d),
                w_qkv: p("w_qkv", d, 3 * d),
                b_qkv: p("b_qkv", 1, 3 * d),
                w_o: p("w_o", d, d),
                b_o: p("b_o", 1, d),
                ln2_g: p("ln2_g", 1, d),
                ln2_b: p("ln2_b", 1, d),
                w1: p("w_ff1", d, f),
                b1: p("b_ff1", 1, f),
                w2: p("w_ff2", f, d),
                b2: p("b_ff2", 1, d),
            }
        })
        .collect();
    let lnf_g = push("lnf_g".into(), 1, d);
    let lnf_b = push("lnf_b".into(), 1, d);
    let lm = push("lm_head".into(), v, d);
    let cls_w = push("cls_w".into(), d, 2);
    let cls_b = push("cls_b".into(), 1, 2);
    (specs, Offsets { tok, pos, layers, lnf_g, lnf_b, lm, cls_w, cls_b })
}

/// Model parameters: config plus one flat buffer in declared tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    cfg: ModelConfig,
    pub(crate) data: Vec<S>,
    specs: Vec<TensorSpec>,
    pub(crate) off: Offsets,
}

impl<S: Scalar> Params<S> {
    /// Weights ~ Normal(0, 0.02), layer-norm gains 1, biases 0. Each tensor
    /// draws from its own derived stream.
    pub fn init(cfg: &ModelConfig, seed: Seed) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (specs, off) = layout(cfg);
        let total = specs.last().map(|s| s.offset + s.numel()).unwrap_or(0);
        let mut data = vec![S::zero(); total];
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (i, spec) in specs.iter().enumerate() {
            let dst = &mut data[spec.range()];
            match spec.init() {
                Init::One => dst.fill(S::one()),
                Init::Zero => {}
                Init::Normal => {
                    let mut rng = seed.rng(&format!("init/{}", spec.name), i as u64);
                    for x in dst.iter_mut() {
                        *x = S::c(normal.sample(&mut rng));
                    }
                }
            }
        }
        Ok(Params { cfg: cfg.clone(), data, specs, off })
    }

    /// Rebuilds a parameter set from a config and raw values in layout order.
    pub fn from_flat(cfg: &ModelConfig, values: Vec<S>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (specs, off) = layout(cfg);
        let total = specs.last().map(|s| s.offset + s.numel()).unwrap_or(0);
        if values.len() != total {
            return Err(ModelError::BadConfig(format!("expected {total} values, got {}", values.len())));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::BadConfig("non-finite parameter".into()));
        }
        Ok(Params { cfg: cfg.clone(), data: values, specs, off })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensor(&self, name: &str) -> Option<&[S]> {
        self.specs.iter().find(|s| s.name == name).map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [S]> {
        let r = self.specs.iter().find(|s| s.name == name)?.range();
        Some(&mut self.data[r])
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_flat(&self) -> &[S] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            cfg: self.cfg.clone(),
            data: self.data.iter().map(|x| T::c(x.f64())).collect(),
            specs: self.specs.clone(),
            off: self.off.clone(),
        }
    }

    /// Appends `n_new` vocabulary rows to the token embedding and the LM
    /// head, drawn from Normal(0, 0.02). Every existing value is kept
    /// bitwise.
    pub fn extend_vocab(&self, n_new: usize, seed: Seed) -> Params<S> {
        if n_new == 0 {
            return self.clone();
        }
        let mut cfg = self.cfg.clone();
        cfg.vocab_size += n_new;
        let (specs, off) = layout(&cfg);
        let d = cfg.d_model;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut rng = seed.rng("extend-vocab", self.cfg.vocab_size as u64);
        let mut data = Vec::with_capacity(specs.last().map(|s| s.offset + s.numel()).unwrap_or(0));
        for (new, old) in specs.iter().zip(&self.specs) {
            debug_assert_eq!(new.name, old.name);
            data.extend_from_slice(&self.data[old.range()]);
            if new.rows != old.rows {
                data.extend((0..n_new * d).map(|_| S::c(normal.sample(&mut rng))));
            }
        }
        Params { cfg, data, specs, off }
    }
}
