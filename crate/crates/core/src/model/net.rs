use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::params::{LayerOffsets, Params};
use super::{Arch, ModelError, Scalar};
use crate::seqcore::Seed;
use crate::toklab::PAD_ID;

const LN_EPS: f64 = 1e-5;
/// Examples per gradient chunk. Chunks run in parallel and are reduced in
/// index order, so the summed gradient does not depend on thread count.
const CHUNK: usize = 4;

/// What an example is scored against.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// `(position, token)` pairs: the logits at `position` must predict
    /// `token`.
    Lm(Vec<(usize, u32)>),
    Class(u8),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub target: Target,
    /// Dropout stream for this example; `None` disables dropout.
    pub dropout: Option<Seed>,
}

struct LnTrace<S> {
    xhat: Vec<S>,
    rstd: Vec<S>,
    out: Vec<S>,
}

struct LayerTrace<S> {
    ln1: LnTrace<S>,
    qkv: Vec<S>,
    probs: Vec<S>,
    attn: Vec<S>,
    drop1: Option<Vec<S>>,
    ln2: LnTrace<S>,
    pre: Vec<S>,
    act: Vec<S>,
    drop2: Option<Vec<S>>,
}

pub(crate) struct Trace<S> {
    ids: Vec<u32>,
    drop0: Option<Vec<S>>,
    layers: Vec<LayerTrace<S>>,
    lnf: LnTrace<S>,
}

impl<S> Trace<S> {
    pub(crate) fn len(&self) -> usize {
        self.ids.len()
    }
}

fn layer_norm<S: Scalar>(x: &[S], d: usize, g: &[S], b: &[S]) -> LnTrace<S> {
    let t = x.len() / d;
    let mut xhat = vec![S::zero(); x.len()];
    let mut out = vec![S::zero(); x.len()];
    let mut rstd = vec![S::zero(); t];
    let n = S::c(d as f64);
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().copied().sum::<S>() / n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
        let rs = S::one() / (var + S::c(LN_EPS)).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (row[i] - mu) * rs;
            xhat[r * d + i] = xh;
            out[r * d + i] = g[i] * xh + b[i];
        }
    }
    LnTrace { xhat, rstd, out }
}

/// Accumulates gain/bias gradients and returns the input gradient.
fn layer_norm_back<S: Scalar>(tr: &LnTrace<S>, dy: &[S], d: usize, g: &[S], dg: &mut [S], db: &mut [S]) -> Vec<S> {
    let t = dy.len() / d;
    let mut dx = vec![S::zero(); dy.len()];
    let n = S::c(d as f64);
    let mut dxhat = vec![S::zero(); d];
    for r in 0..t {
        let (dyr, xh) = (&dy[r * d..(r + 1) * d], &tr.xhat[r * d..(r + 1) * d]);
        let (mut m1, mut m2) = (S::zero(), S::zero());
        for i in 0..d {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            dxhat[i] = dyr[i] * g[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xh[i];
        }
        m1 /= n;
        m2 /= n;
        for i in 0..d {
            dx[r * d + i] = tr.rstd[r] * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
    dx
}

/// `x (t × n_in) · w (n_in × n_out) + b`.
fn linear<S: Scalar>(x: &[S], n_in: usize, w: &[S], b: &[S], n_out: usize) -> Vec<S> {
    let t = x.len() / n_in;
    let mut y = Vec::with_capacity(t * n_out);
    for _ in 0..t {
        y.extend_from_slice(b);
    }
    for r in 0..t {
        let yr = &mut y[r * n_out..(r + 1) * n_out];
        for (i, &xi) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
            let wr = &w[i * n_out..(i + 1) * n_out];
            for (yo, &wo) in yr.iter_mut().zip(wr) {
                *yo += xi * wo;
            }
        }
    }
    y
}

/// Backward of [`linear`]: accumulates into `dw`, `db`, returns `dx`.
fn linear_back<S: Scalar>(x: &[S], n_in: usize, w: &[S], dy: &[S], n_out: usize, dw: &mut [S], db: &mut [S]) -> Vec<S> {
    let t = x.len() / n_in;
    let mut dx = vec![S::zero(); t * n_in];
    for r in 0..t {
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        for (dbo, &g) in db.iter_mut().zip(dyr) {
            *dbo += g;
        }
        for i in 0..n_in {
            let xi = x[r * n_in + i];
            let wr = &w[i * n_out..(i + 1) * n_out];
            let dwr = &mut dw[i * n_out..(i + 1) * n_out];
            let mut acc = S::zero();
            for o in 0..n_out {
                dwr[o] += xi * dyr[o];
                acc += dyr[o] * wr[o];
            }
            dx[r * n_in + i] = acc;
        }
    }
    dx
}

fn gelu<S: Scalar>(u: S) -> S {
    let c = S::c((2.0 / std::f64::consts::PI).sqrt());
    let k = S::c(0.044715);
    S::c(0.5) * u * (S::one() + (c * (u + k * u * u * u)).tanh())
}

fn gelu_grad<S: Scalar>(u: S) -> S {
    let c = S::c((2.0 / std::f64::consts::PI).sqrt());
    let k = S::c(0.044715);
    let th = (c * (u + k * u * u * u)).tanh();
    S::c(0.5) * (S::one() + th) + S::c(0.5) * u * (S::one() - th * th) * c * (S::one() + S::c(3.0) * k * u * u)
}

fn dropout_mask<S: Scalar>(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<S> {
    let keep = S::c(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.random::<f64>() < p { S::zero() } else { keep }).collect()
}

fn apply_mask<S: Scalar>(x: &mut [S], mask: &Option<Vec<S>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

impl<S: Scalar> Params<S> {
    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        let cfg = self.config();
        if ids.len() > cfg.max_seq_len {
            return Err(ModelError::TooLong { len: ids.len(), max: cfg.max_seq_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::IdOutOfRange { id, vocab: cfg.vocab_size });
        }
        Ok(())
    }

    fn allowed(&self, ids: &[u32], i: usize, j: usize) -> bool {
        match self.config().arch {
            Arch::DecoderCausal => j <= i,
            Arch::EncoderBidir => ids[j] != PAD_ID,
        }
    }

    /// Runs the trunk and keeps everything the backward pass needs.
    pub(crate) fn trace(&self, ids: &[u32], dropout: Option<Seed>) -> Trace<S> {
        let cfg = self.config();
        let (d, h, dh, f) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff);
        let t = ids.len();
        let p = &self.data;
        let o = &self.off;
        let mut rng = dropout.filter(|_| cfg.dropout > 0.0).map(|s| s.rng("dropout", 0));
        let mut mask = |n: usize| rng.as_mut().map(|r| dropout_mask::<S>(n, cfg.dropout, r));

        let mut x = vec![S::zero(); t * d];
        for (r, &id) in ids.iter().enumerate() {
            let e = &p[o.tok + id as usize * d..][..d];
            let pe = &p[o.pos + r * d..][..d];
            for i in 0..d {
                x[r * d + i] = e[i] + pe[i];
            }
        }
        let drop0 = mask(t * d);
        apply_mask(&mut x, &drop0);

        let scale = S::c(1.0 / (dh as f64).sqrt());
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lo in &o.layers {
            let ln1 = layer_norm(&x, d, &p[lo.ln1_g..][..d], &p[lo.ln1_b..][..d]);
            let qkv = linear(&ln1.out, d, &p[lo.w_qkv..][..d * 3 * d], &p[lo.b_qkv..][..3 * d], 3 * d);
            let mut probs = vec![S::zero(); h * t * t];
            let mut attn = vec![S::zero(); t * d];
            for hh in 0..h {
                for i in 0..t {
                    let q = &qkv[i * 3 * d + hh * dh..][..dh];
                    let row = &mut probs[(hh * t + i) * t..][..t];
                    let mut max = S::neg_infinity();
                    for j in 0..t {
                        if self.allowed(ids, i, j) {
                            let k = &qkv[j * 3 * d + d + hh * dh..][..dh];
                            let s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<S>() * scale;
                            row[j] = s;
                            max = max.max(s);
                        }
                    }
                    let mut total = S::zero();
                    for j in 0..t {
                        if self.allowed(ids, i, j) {
                            row[j] = (row[j] - max).exp();
                            total += row[j];
                        } else {
                            row[j] = S::zero();
                        }
                    }
                    let out = &mut attn[i * d + hh * dh..][..dh];
                    for j in 0..t {
                        row[j] /= total;
                        if row[j] != S::zero() {
                            let v = &qkv[j * 3 * d + 2 * d + hh * dh..][..dh];
                            for (a, &b) in out.iter_mut().zip(v) {
                                *a += row[j] * b;
                            }
                        }
                    }
                }
            }
            let mut branch = linear(&attn, d, &p[lo.w_o..][..d * d], &p[lo.b_o..][..d], d);
            let drop1 = mask(t * d);
            apply_mask(&mut branch, &drop1);
            for (a, b) in x.iter_mut().zip(&branch) {
                *a += *b;
            }

            let ln2 = layer_norm(&x, d, &p[lo.ln2_g..][..d], &p[lo.ln2_b..][..d]);
            let pre = linear(&ln2.out, d, &p[lo.w1..][..d * f], &p[lo.b1..][..f], f);
            let act: Vec<S> = pre.iter().map(|&u| gelu(u)).collect();
            let mut branch = linear(&act, f, &p[lo.w2..][..f * d], &p[lo.b2..][..d], d);
            let drop2 = mask(t * d);
            apply_mask(&mut branch, &drop2);
            for (a, b) in x.iter_mut().zip(&branch) {
                *a += *b;
            }
            layers.push(LayerTrace { ln1, qkv, probs, attn, drop1, ln2, pre, act, drop2 });
        }
        let lnf = layer_norm(&x, d, &p[o.lnf_g..][..d], &p[o.lnf_b..][..d]);
        Trace { ids: ids.to_vec(), drop0, layers, lnf }
    }

    /// Backpropagates a gradient on the final hidden states into `grad`.
    pub(crate) fn backward(&self, tr: &Trace<S>, dh_final: &[S], grad: &mut [S]) {
        let cfg = self.config();
        let (d, h, dh, f) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff);
        let t = tr.len();
        let p = &self.data;
        let o = &self.off;
        let scale = S::c(1.0 / (dh as f64).sqrt());

        let mut dx = {
            let (dg, db) = split2(grad, o.lnf_g, o.lnf_b, d);
            layer_norm_back(&tr.lnf, dh_final, d, &p[o.lnf_g..][..d], dg, db)
        };

        for (lo, lt) in o.layers.iter().zip(&tr.layers).rev() {
            let LayerOffsets { ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w1, b1, w2, b2 } = *lo;
            // Feed-forward branch.
            let mut dbranch = dx.clone();
            apply_mask(&mut dbranch, &lt.drop2);
            let dact = {
                let (dw, db) = split2(grad, w2, b2, f * d);
                linear_back(&lt.act, f, &p[w2..][..f * d], &dbranch, d, dw, &mut db[..d])
            };
            let dpre: Vec<S> = dact.iter().zip(&lt.pre).map(|(&g, &u)| g * gelu_grad(u)).collect();
            let dln2 = {
                let (dw, db) = split2(grad, w1, b1, d * f);
                linear_back(&lt.ln2.out, d, &p[w1..][..d * f], &dpre, f, dw, &mut db[..f])
            };
            let dx_ln2 = {
                let (dg, db) = split2(grad, ln2_g, ln2_b, d);
                layer_norm_back(&lt.ln2, &dln2, d, &p[ln2_g..][..d], dg, db)
            };
            for (a, b) in dx.iter_mut().zip(&dx_ln2) {
                *a += *b;
            }

            // Attention branch.
            let mut dbranch = dx.clone();
            apply_mask(&mut dbranch, &lt.drop1);
            let dattn = {
                let (dw, db) = split2(grad, w_o, b_o, d * d);
                linear_back(&lt.attn, d, &p[w_o..][..d * d], &dbranch, d, dw, &mut db[..d])
            };
            let mut dqkv = vec![S::zero(); t * 3 * d];
            let mut dp = vec![S::zero(); t];
            for hh in 0..h {
                for i in 0..t {
                    let probs = &lt.probs[(hh * t + i) * t..][..t];
                    let dout = &dattn[i * d + hh * dh..][..dh];
                    let mut dot = S::zero();
                    for j in 0..t {
                        if probs[j] == S::zero() {
                            dp[j] = S::zero();
                            continue;
                        }
                        let v = &lt.qkv[j * 3 * d + 2 * d + hh * dh..][..dh];
                        dp[j] = dout.iter().zip(v).map(|(&a, &b)| a * b).sum();
                        dot += probs[j] * dp[j];
                        let dv = &mut dqkv[j * 3 * d + 2 * d + hh * dh..][..dh];
                        for (a, &b) in dv.iter_mut().zip(dout) {
                            *a += probs[j] * b;
                        }
                    }
                    for j in 0..t {
                        if probs[j] == S::zero() {
                            continue;
                        }
                        let ds = probs[j] * (dp[j] - dot) * scale;
                        for c in 0..dh {
                            let q = lt.qkv[i * 3 * d + hh * dh + c];
                            let k = lt.qkv[j * 3 * d + d + hh * dh + c];
                            dqkv[i * 3 * d + hh * dh + c] += ds * k;
                            dqkv[j * 3 * d + d + hh * dh + c] += ds * q;
                        }
                    }
                }
            }
            let dln1 = {
                let (dw, db) = split2(grad, w_qkv, b_qkv, d * 3 * d);
                linear_back(&lt.ln1.out, d, &p[w_qkv..][..d * 3 * d], &dqkv, 3 * d, dw, &mut db[..3 * d])
            };
            let dx_ln1 = {
                let (dg, db) = split2(grad, ln1_g, ln1_b, d);
                layer_norm_back(&lt.ln1, &dln1, d, &p[ln1_g..][..d], dg, db)
            };
            for (a, b) in dx.iter_mut().zip(&dx_ln1) {
                *a += *b;
            }
        }

        apply_mask(&mut dx, &tr.drop0);
        for (r, &id) in tr.ids.iter().enumerate() {
            let src = &dx[r * d..(r + 1) * d];
            for (g, &v) in grad[o.tok + id as usize * d..][..d].iter_mut().zip(src) {
                *g += v;
            }
            for (g, &v) in grad[o.pos + r * d..][..d].iter_mut().zip(src) {
                *g += v;
            }
        }
    }

    fn lm_row(&self, hidden: &[S]) -> Vec<S> {
        let (v, d) = (self.config().vocab_size, self.config().d_model);
        let lm = &self.data[self.off.lm..][..v * d];
        lm.chunks_exact(d).map(|w| w.iter().zip(hidden).map(|(&a, &b)| a * b).sum()).collect()
    }

    fn cls_logits(&self, hidden: &[S]) -> [S; 2] {
        let d = self.config().d_model;
        let w = &self.data[self.off.cls_w..][..2 * d];
        let b = &self.data[self.off.cls_b..][..2];
        let mut out = [b[0], b[1]];
        for i in 0..d {
            out[0] += hidden[i] * w[2 * i];
            out[1] += hidden[i] * w[2 * i + 1];
        }
        out
    }

    /// Next-token (decoder) or per-position (encoder) logits for every
    /// position, `len × vocab_size`. Dropout is off.
    pub fn forward_lm(&self, ids: &[u32]) -> Result<Vec<Vec<S>>, ModelError> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(ModelError::Empty);
        }
        let tr = self.trace(ids, None);
        let d = self.config().d_model;
        Ok(tr.lnf.out.chunks_exact(d).map(|row| self.lm_row(row)).collect())
    }

    /// Position the classification head reads: last real token for the
    /// decoder, `[CLS]` (position 0) for the encoder.
    fn pool_position(&self, len: usize) -> usize {
        match self.config().arch {
            Arch::DecoderCausal => len - 1,
            Arch::EncoderBidir => 0,
        }
    }

    /// Two class logits for an `encode_pair` id sequence. Trailing padding
    /// is dropped before the trunk runs, so padding never changes the output.
    pub fn forward_classify(&self, ids: &[u32]) -> Result<[S; 2], ModelError> {
        self.check_ids(ids)?;
        let ids = strip_padding(ids);
        if ids.is_empty() {
            return Err(ModelError::AllPadding);
        }
        let tr = self.trace(ids, None);
        let d = self.config().d_model;
        let at = self.pool_position(ids.len());
        Ok(self.cls_logits(&tr.lnf.out[at * d..][..d]))
    }

    /// Loss of one example and, when `grad` is given, its gradient scaled
    /// by `weight` accumulated into `grad`.
    fn example_loss(&self, ex: &Example, weight: S, grad: Option<&mut [S]>) -> Result<S, ModelError> {
        self.check_ids(&ex.ids)?;
        let d = self.config().d_model;
        match &ex.target {
            Target::Class(label) => {
                let ids = strip_padding(&ex.ids);
                if ids.is_empty() {
                    return Err(ModelError::AllPadding);
                }
                let tr = self.trace(ids, ex.dropout);
                let at = self.pool_position(ids.len());
                let hidden = &tr.lnf.out[at * d..][..d];
                let probs = super::softmax(&self.cls_logits(hidden));
                let y = usize::from(*label == 1);
                let loss = -probs[y].ln();
                if let Some(grad) = grad {
                    let mut dl = [probs[0] * weight, probs[1] * weight];
                    dl[y] -= weight;
                    let mut dh = vec![S::zero(); ids.len() * d];
                    let o = &self.off;
                    let w = &self.data[o.cls_w..][..2 * d];
                    for i in 0..d {
                        grad[o.cls_w + 2 * i] += hidden[i] * dl[0];
                        grad[o.cls_w + 2 * i + 1] += hidden[i] * dl[1];
                        dh[at * d + i] = w[2 * i] * dl[0] + w[2 * i + 1] * dl[1];
                    }
                    grad[o.cls_b] += dl[0];
                    grad[o.cls_b + 1] += dl[1];
                    self.backward(&tr, &dh, grad);
                }
                Ok(loss)
            }
            Target::Lm(targets) => {
                if targets.is_empty() || ex.ids.is_empty() {
                    return Err(ModelError::Empty);
                }
                let v = self.config().vocab_size;
                for &(pos, tok) in targets {
                    if pos >= ex.ids.len() {
                        return Err(ModelError::TooLong { len: pos + 1, max: ex.ids.len() });
                    }
                    if tok as usize >= v {
                        return Err(ModelError::IdOutOfRange { id: tok, vocab: v });
                    }
                }
                let tr = self.trace(&ex.ids, ex.dropout);
                let per = S::one() / S::c(targets.len() as f64);
                let mut loss = S::zero();
                let mut dh = grad.as_ref().map(|_| vec![S::zero(); ex.ids.len() * d]);
                let mut dlm = Vec::new();
                for &(pos, tok) in targets {
                    let hidden = &tr.lnf.out[pos * d..][..d];
                    let probs = super::softmax(&self.lm_row(hidden));
                    loss += -probs[tok as usize].ln() * per;
                    if let Some(dh) = dh.as_mut() {
                        let lm = &self.data[self.off.lm..][..v * d];
                        let dhr = &mut dh[pos * d..][..d];
                        for (k, (&pk, w)) in probs.iter().zip(lm.chunks_exact(d)).enumerate() {
                            let g = (pk - if k == tok as usize { S::one() } else { S::zero() }) * per * weight;
                            for (a, &b) in dhr.iter_mut().zip(w) {
                                *a += g * b;
                            }
                            dlm.push((k, pos, g));
                        }
                    }
                }
                if let (Some(grad), Some(dh)) = (grad, dh) {
                    let lm_off = self.off.lm;
                    for (k, pos, g) in dlm {
                        let hidden = &tr.lnf.out[pos * d..][..d];
                        for (a, &b) in grad[lm_off + k * d..][..d].iter_mut().zip(hidden) {
                            *a += g * b;
                        }
                    }
                    self.backward(&tr, &dh, grad);
                }
                Ok(loss)
            }
        }
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, batch: &[Example]) -> Result<S, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Empty);
        }
        let w = S::one() / S::c(batch.len() as f64);
        let parts: Vec<S> = batch.par_iter().map(|ex| self.example_loss(ex, w, None)).collect::<Result<_, _>>()?;
        let loss = parts.into_iter().fold(S::zero(), |a, b| a + b) * w;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        Ok(loss)
    }

    /// Mean cross-entropy over the batch and its gradient with respect to
    /// every parameter, in flat layout order.
    pub fn loss_and_grad(&self, batch: &[Example]) -> Result<(S, Vec<S>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Empty);
        }
        let n = self.num_params();
        let w = S::one() / S::c(batch.len() as f64);
        let parts: Vec<(S, Vec<S>)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![S::zero(); n];
                let mut l = S::zero();
                for ex in chunk {
                    l += self.example_loss(ex, w, Some(&mut g))?;
                }
                Ok((l, g))
            })
            .collect::<Result<_, ModelError>>()?;
        let mut parts = parts.into_iter();
        let (mut loss, mut grad) = parts.next().expect("non-empty batch");
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let loss = loss * w;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss);
        }
        Ok((loss, grad))
    }
}

fn split2<S>(grad: &mut [S], a: usize, b: usize, len_a: usize) -> (&mut [S], &mut [S]) {
    debug_assert!(a + len_a <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + len_a], hi)
}

pub(crate) fn strip_padding(ids: &[u32]) -> &[u32] {
    let end = ids.iter().rposition(|&id| id != PAD_ID).map_or(0, |i| i + 1);
    &ids[..end]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Params};
    use rand::SeedableRng;

    fn cfg(arch: Arch, v: usize, d: usize, layers: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            arch,
            vocab_size: v,
            d_model: d,
            n_layers: layers,
            n_heads: heads,
            d_ff: 2 * d,
            max_seq_len: 12,
            dropout: 0.0,
        }
    }

    fn random_ids(rng: &mut ChaCha8Rng, len: usize, v: usize) -> Vec<u32> {
        (0..len).map(|_| rng.random_range(5..v as u32)).collect()
    }

    /// Perturbs weights away from the tiny init so the check exercises
    /// non-trivial curvature.
    fn roughen(p: &mut Params<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in p.as_flat_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }

    fn batch(rng: &mut ChaCha8Rng, arch: Arch, lm: bool, v: usize) -> Vec<Example> {
        (0..3)
            .map(|_| {
                let len = rng.random_range(3..10);
                let mut ids = random_ids(rng, len, v);
                let target = if lm {
                    match arch {
                        Arch::DecoderCausal => Target::Lm((0..len - 1).map(|t| (t, ids[t + 1])).collect()),
                        Arch::EncoderBidir => {
                            let pos = rng.random_range(0..len);
                            let t = Target::Lm(vec![(pos, ids[pos])]);
                            ids[pos] = crate::toklab::MASK_ID;
                            t
                        }
                    }
                } else {
                    ids.extend([PAD_ID, PAD_ID]);
                    Target::Class(rng.random_range(0..2))
                };
                Example { ids, target, dropout: None }
            })
            .collect()
    }

    fn grad_check(c: &ModelConfig, lm: bool, seed: u64) -> f64 {
        let mut p = Params::<f64>::init(c, Seed(seed)).unwrap();
        roughen(&mut p, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let b = batch(&mut rng, c.arch, lm, c.vocab_size);
        let (_, g) = p.loss_and_grad(&b).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let i = rng.random_range(0..p.num_params());
            let orig = p.as_flat()[i];
            p.as_flat_mut()[i] = orig + eps;
            let up = p.loss(&b).unwrap();
            p.as_flat_mut()[i] = orig - eps;
            let down = p.loss(&b).unwrap();
            p.as_flat_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (fd - g[i]).abs() / (fd.abs() + g[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, (v, d, l, h)) in [(11, 8, 1, 2), (13, 12, 2, 3), (9, 4, 1, 1)].into_iter().enumerate() {
            for arch in [Arch::DecoderCausal, Arch::EncoderBidir] {
                for lm in [true, false] {
                    let err = grad_check(&cfg(arch, v, d, l, h), lm, k as u64 * 7 + 1);
                    assert!(err < 1e-3, "{arch:?} lm={lm} config {k}: {err}");
                }
            }
        }
    }

    #[test]
    fn causal_mask() {
        let p = Params::<f64>::init(&cfg(Arch::DecoderCausal, 20, 8, 2, 2), Seed(3)).unwrap();
        let a = vec![5, 6, 7, 8, 9, 10];
        let mut b = a.clone();
        b[3] = 15;
        let (la, lb) = (p.forward_lm(&a).unwrap(), p.forward_lm(&b).unwrap());
        assert_eq!(la[..3], lb[..3]);
        assert_ne!(la[3], lb[3]);
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut p = Params::<f64>::init(&cfg(Arch::EncoderBidir, 20, 8, 1, 2), Seed(3)).unwrap();
        roughen(&mut p, 1);
        for row in p.forward_lm(&[5, 6, 7, 8]).unwrap() {
            assert!((crate::model::softmax(&row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_uniform_lm_loss() {
        let mut p = Params::<f64>::init(&cfg(Arch::DecoderCausal, 17, 8, 1, 2), Seed(3)).unwrap();
        p.tensor_mut("lm_head").unwrap().fill(0.0);
        let ex = Example { ids: vec![5, 5, 5, 5], target: Target::Lm(vec![(0, 5), (1, 5), (2, 5)]), dropout: None };
        assert!((p.loss(&[ex]).unwrap() - (17f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_classifier_loss_is_ln2() {
        let mut p = Params::<f64>::init(&cfg(Arch::DecoderCausal, 17, 8, 1, 2), Seed(3)).unwrap();
        p.tensor_mut("cls_w").unwrap().fill(0.0);
        let ex = Example { ids: vec![5, 6, 7], target: Target::Class(1), dropout: None };
        assert!((p.loss(&[ex]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn duplicated_example_has_same_mean_loss() {
        let p = Params::<f64>::init(&cfg(Arch::EncoderBidir, 17, 8, 1, 2), Seed(3)).unwrap();
        let ex = Example { ids: vec![2, 6, 3, 7, 3], target: Target::Class(0), dropout: None };
        let one = p.loss_and_grad(&[ex.clone()]).unwrap();
        let two = p.loss_and_grad(&[ex.clone(), ex]).unwrap();
        assert!((one.0 - two.0).abs() < 1e-15);
        for (a, b) in one.1.iter().zip(&two.1) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn padding_invariance() {
        for arch in [Arch::DecoderCausal, Arch::EncoderBidir] {
            let mut p = Params::<f64>::init(&cfg(arch, 17, 8, 2, 2), Seed(4)).unwrap();
            roughen(&mut p, 2);
            let ids = vec![2, 6, 7, 3, 8, 3];
            let base = p.forward_classify(&ids).unwrap();
            for k in 1..=6 {
                let mut padded = ids.clone();
                padded.extend(std::iter::repeat_n(PAD_ID, k));
                assert_eq!(p.forward_classify(&padded).unwrap(), base);
            }
            assert_eq!(p.forward_classify(&[PAD_ID; 4]), Err(ModelError::AllPadding));
        }
    }

    #[test]
    fn input_validation() {
        let p = Params::<f64>::init(&cfg(Arch::DecoderCausal, 17, 8, 1, 2), Seed(4)).unwrap();
        assert_eq!(p.forward_lm(&[40]), Err(ModelError::IdOutOfRange { id: 40, vocab: 17 }));
        assert_eq!(p.forward_lm(&[5; 13]), Err(ModelError::TooLong { len: 13, max: 12 }));
        assert_eq!(p.loss_and_grad(&[]).unwrap_err(), ModelError::Empty);
    }

    #[test]
    fn gradient_independent_of_thread_count() {
        let mut p = Params::<f64>::init(&cfg(Arch::DecoderCausal, 17, 8, 1, 2), Seed(4)).unwrap();
        p.as_flat_mut()[0] += 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b: Vec<Example> = (0..11).flat_map(|_| batch(&mut rng, Arch::DecoderCausal, false, 17)).collect();
        let one =
            rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| p.loss_and_grad(&b).unwrap());
        let many =
            rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| p.loss_and_grad(&b).unwrap());
        assert_eq!(one, many);
    }

    #[test]
    fn dropout_changes_output_only_when_seeded() {
        let mut c = cfg(Arch::DecoderCausal, 17, 8, 1, 2);
        c.dropout = 0.5;
        let p = Params::<f64>::init(&c, Seed(4)).unwrap();
        let ex = |s| Example { ids: vec![5, 6, 7], target: Target::Class(1), dropout: s };
        let off = p.loss(&[ex(None)]).unwrap();
        assert_eq!(off, p.loss(&[ex(None)]).unwrap());
        assert_ne!(off, p.loss(&[ex(Some(Seed(1)))]).unwrap());
        assert_eq!(p.loss(&[ex(Some(Seed(1)))]).unwrap(), p.loss(&[ex(Some(Seed(1)))]).unwrap());
    }
}
