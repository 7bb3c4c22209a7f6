//! Post-layer-norm transformer encoder with a sigmoid head on the first
//! position. Every attention reduction runs in a canonical order, so the
//! output is bitwise independent of how unordered input slots are arranged
//! (slots are unordered when nothing but the positional embedding would
//! distinguish them, and the policy turned it off).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_params_fields;
use crate::math::{self, Matrix, Params};
use crate::scalar::{cast, Scalar};
use crate::vocab::PAD;

use super::RerankInput;

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let u = cast::<S>(GELU_C) * (x + cast::<S>(GELU_A) * x * x * x);
    cast::<S>(0.5) * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = cast::<S>(0.5);
    let c = cast::<S>(GELU_C);
    let a = cast::<S>(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + cast::<S>(3.0) * a * x * x)
}

/// Numerically stable logistic function; strictly inside (0, 1) for finite z.
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Stable binary cross-entropy on the raw logit.
pub fn bce_with_logit<S: Scalar>(z: S, y: S) -> S {
    z.max(S::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl TransformerConfig {
    /// Desk-scale defaults; the architecture family, not the size, is the point.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        TransformerConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq_len: 256,
            vocab_size,
            dropout: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.heads == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.max_seq_len == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<S> {
    pub gain: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> LayerNorm<S> {
    fn identity(d: usize) -> Self {
        LayerNorm { gain: vec![S::one(); d], bias: vec![S::zero(); d] }
    }

    /// Writes y and returns (xhat, inv_std) for the backward pass.
    fn forward_row(&self, x: &[S], y: &mut [S]) -> (Vec<S>, S) {
        let n = cast::<S>(x.len() as f64);
        let mean = x.iter().copied().sum::<S>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let inv_std = S::one() / (var + cast::<S>(LN_EPS)).sqrt();
        let mut xhat = Vec::with_capacity(x.len());
        for ((&v, &g), (&b, o)) in x.iter().zip(&self.gain).zip(self.bias.iter().zip(y.iter_mut())) {
            let h = (v - mean) * inv_std;
            xhat.push(h);
            *o = h * g + b;
        }
        (xhat, inv_std)
    }

    fn backward_row(&self, xhat: &[S], inv_std: S, dy: &[S], g: &mut Self, dx: &mut [S]) {
        let n = cast::<S>(xhat.len() as f64);
        let mut sum_dg = S::zero();
        let mut sum_dgx = S::zero();
        for ((&d, &gn), &h) in dy.iter().zip(&self.gain).zip(xhat) {
            sum_dg += d * gn;
            sum_dgx += d * gn * h;
        }
        for (i, ((&d, &gn), &h)) in dy.iter().zip(&self.gain).zip(xhat).enumerate() {
            g.gain[i] += d * h;
            g.bias[i] += d;
            dx[i] = (d * gn - sum_dg / n - h * sum_dgx / n) * inv_std;
        }
    }
}

impl_params_fields!(LayerNorm, gain, bias);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer<S> {
    pub wq: Matrix<S>,
    pub bq: Vec<S>,
    pub wk: Matrix<S>,
    pub bk: Vec<S>,
    pub wv: Matrix<S>,
    pub bv: Vec<S>,
    pub wo: Matrix<S>,
    pub bo: Vec<S>,
    pub ln_attn: LayerNorm<S>,
    pub w1: Matrix<S>,
    pub b1: Vec<S>,
    pub w2: Matrix<S>,
    pub b2: Vec<S>,
    pub ln_ffn: LayerNorm<S>,
}

impl_params_fields!(EncoderLayer, wq, bq, wk, bk, wv, bv, wo, bo, ln_attn, w1, b1, w2, b2, ln_ffn);

fn uniform_vec<S: Scalar, R: Rng>(n: usize, bound: f64, rng: &mut R) -> Vec<S> {
    (0..n).map(|_| cast::<S>(rng.gen_range(-bound..=bound))).collect()
}

impl<S: Scalar> EncoderLayer<S> {
    fn new<R: Rng>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        let bd = 1.0 / (d as f64).sqrt();
        let bf = 1.0 / (d_ff as f64).sqrt();
        EncoderLayer {
            wq: Matrix::uniform(d, d, bd, rng),
            bq: uniform_vec(d, bd, rng),
            wk: Matrix::uniform(d, d, bd, rng),
            bk: uniform_vec(d, bd, rng),
            wv: Matrix::uniform(d, d, bd, rng),
            bv: uniform_vec(d, bd, rng),
            wo: Matrix::uniform(d, d, bd, rng),
            bo: uniform_vec(d, bd, rng),
            ln_attn: LayerNorm::identity(d),
            w1: Matrix::uniform(d_ff, d, bd, rng),
            b1: uniform_vec(d_ff, bd, rng),
            w2: Matrix::uniform(d, d_ff, bf, rng),
            b2: uniform_vec(d, bf, rng),
            ln_ffn: LayerNorm::identity(d),
        }
    }
}

/// Cross-attention reranker scoring one (mention, candidate) input as the
/// probability of a true link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerModel<S> {
    pub cfg: TransformerConfig,
    pub tok: Matrix<S>,
    pub seg: Matrix<S>,
    pub pos: Matrix<S>,
    pub emb_ln: LayerNorm<S>,
    pub layers: Vec<EncoderLayer<S>>,
    pub head_w: Vec<S>,
    pub head_b: Vec<S>,
}

impl<S: Scalar> Params<S> for RerankerModel<S> {
    fn param_count(&self) -> usize {
        self.tok.param_count()
            + self.seg.param_count()
            + self.pos.param_count()
            + self.emb_ln.param_count()
            + self.layers.iter().map(|l| l.param_count()).sum::<usize>()
            + self.head_w.len()
            + self.head_b.len()
    }

    fn for_each_param(&self, f: &mut dyn FnMut(S)) {
        self.tok.for_each_param(f);
        self.seg.for_each_param(f);
        self.pos.for_each_param(f);
        self.emb_ln.for_each_param(f);
        for l in &self.layers {
            l.for_each_param(f);
        }
        self.head_w.for_each_param(f);
        self.head_b.for_each_param(f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut S)) {
        self.tok.for_each_param_mut(f);
        self.seg.for_each_param_mut(f);
        self.pos.for_each_param_mut(f);
        self.emb_ln.for_each_param_mut(f);
        for l in &mut self.layers {
            l.for_each_param_mut(f);
        }
        self.head_w.for_each_param_mut(f);
        self.head_b.for_each_param_mut(f);
    }

    fn add_scaled_params(&mut self, other: &Self, c: S) {
        self.tok.add_scaled_params(&other.tok, c);
        self.seg.add_scaled_params(&other.seg, c);
        self.pos.add_scaled_params(&other.pos, c);
        self.emb_ln.add_scaled_params(&other.emb_ln, c);
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.add_scaled_params(o, c);
        }
        self.head_w.add_scaled_params(&other.head_w, c);
        self.head_b.add_scaled_params(&other.head_b, c);
    }
}

struct LnRows<S> {
    xhat: Matrix<S>,
    inv_std: Vec<S>,
}

pub(crate) struct LayerCache<S> {
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    /// One row-stochastic matrix per head; row i holds query i's weights.
    probs: Vec<Matrix<S>>,
    attn_cat: Matrix<S>,
    attn_drop: Option<Matrix<S>>,
    res1: LnRows<S>,
    h1: Matrix<S>,
    ffn_pre: Matrix<S>,
    gelu_out: Matrix<S>,
    ffn_drop: Option<Matrix<S>>,
    res2: LnRows<S>,
    h2: Matrix<S>,
}

pub(crate) struct Cache<S> {
    active: Vec<bool>,
    emb_drop: Option<Matrix<S>>,
    emb: LnRows<S>,
    h0: Matrix<S>,
    layers: Vec<LayerCache<S>>,
}

/// out += sum_j weights[j] * values[j], accumulated in an order determined
/// only by the contribution values themselves, never by slot position.
fn canonical_mix<S: Scalar>(weights: &[S], values: &Matrix<S>, off: usize, d_head: usize, out: &mut [S]) {
    let mut idx: Vec<usize> = (0..weights.len()).filter(|&j| weights[j] != S::zero()).collect();
    idx.sort_unstable_by(|&a, &b| {
        match weights[a].partial_cmp(&weights[b]) {
            Some(std::cmp::Ordering::Equal) | None => {
                let va = &values.row(a)[off..off + d_head];
                let vb = &values.row(b)[off..off + d_head];
                va.iter()
                    .zip(vb)
                    .find_map(|(x, y)| x.partial_cmp(y).filter(|o| *o != std::cmp::Ordering::Equal))
                    .unwrap_or(std::cmp::Ordering::Equal)
            }
            Some(o) => o,
        }
    });
    for &j in &idx {
        let w = weights[j];
        for (o, &vv) in out.iter_mut().zip(&values.row(j)[off..off + d_head]) {
            *o += w * vv;
        }
    }
}

fn sample_drop<S: Scalar>(rows: usize, cols: usize, active: &[bool], p: f64, rng: &mut ChaCha8Rng) -> Matrix<S> {
    let keep = cast::<S>(1.0 / (1.0 - p));
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        if !active[i] {
            continue;
        }
        for x in m.row_mut(i) {
            if !rng.gen_bool(p) {
                *x = keep;
            }
        }
    }
    m
}

fn mul_rows<S: Scalar>(x: &mut Matrix<S>, mask: &Matrix<S>, active: &[bool]) {
    for i in 0..x.rows() {
        if !active[i] {
            continue;
        }
        for (v, &m) in x.row_mut(i).iter_mut().zip(mask.row(i)) {
            *v *= m;
        }
    }
}

impl<S: Scalar> RerankerModel<S> {
    pub fn new(cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let bd = 1.0 / (d as f64).sqrt();
        let tok = Matrix::uniform(cfg.vocab_size, d, bd, &mut rng);
        let seg = Matrix::uniform(2, d, bd, &mut rng);
        let pos = Matrix::uniform(cfg.max_seq_len, d, bd, &mut rng);
        let emb_ln = LayerNorm::identity(d);
        let layers = (0..cfg.layers).map(|_| EncoderLayer::new(d, cfg.d_ff, &mut rng)).collect();
        let head_w = uniform_vec(d, bd, &mut rng);
        let head_b = uniform_vec(1, bd, &mut rng);
        Ok(RerankerModel { cfg, tok, seg, pos, emb_ln, layers, head_w, head_b })
    }

    fn validate_input(&self, input: &RerankInput) -> Result<()> {
        let t = input.tokens.len();
        if t == 0 || t != input.segments.len() || t != input.positional.len() {
            return Err(Error::RerankInput(format!(
                "ragged input: {} tokens, {} segments, {} positional flags",
                t,
                input.segments.len(),
                input.positional.len()
            )));
        }
        if t > self.cfg.max_seq_len {
            return Err(Error::RerankInput(format!(
                "sequence length {t} exceeds max {}",
                self.cfg.max_seq_len
            )));
        }
        if let Some(&bad) = input.tokens.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::RerankInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        if input.segments.iter().any(|&s| s > 1) {
            return Err(Error::RerankInput("segment ids must be 0 or 1".into()));
        }
        Ok(())
    }

    fn affine_rows(w: &Matrix<S>, b: &[S], x: &Matrix<S>, active: &[bool]) -> Matrix<S> {
        let mut out = Matrix::zeros(x.rows(), w.rows());
        for i in 0..x.rows() {
            if !active[i] {
                continue;
            }
            let mut y = w.matvec(x.row(i));
            math::add_assign(&mut y, b);
            out.row_mut(i).copy_from_slice(&y);
        }
        out
    }

    pub(crate) fn run(&self, input: &RerankInput, mut drop_rng: Option<&mut ChaCha8Rng>) -> Result<(S, Cache<S>)> {
        self.validate_input(input)?;
        let t_len = input.tokens.len();
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let d_head = d / heads;
        let inv_sqrt = S::one() / cast::<S>((d_head as f64).sqrt());
        let active: Vec<bool> = input.tokens.iter().map(|&t| t != PAD).collect();
        if !active[0] {
            return Err(Error::RerankInput("input starts with padding".into()));
        }

        let mut x = Matrix::zeros(t_len, d);
        for i in 0..t_len {
            if !active[i] {
                continue;
            }
            let row = x.row_mut(i);
            row.copy_from_slice(self.tok.row(input.tokens[i] as usize));
            math::add_assign(row, self.seg.row(input.segments[i] as usize));
            if input.positional[i] {
                math::add_assign(row, self.pos.row(i));
            }
        }

        let mut h0 = Matrix::zeros(t_len, d);
        let mut emb_xhat = Matrix::zeros(t_len, d);
        let mut emb_inv = vec![S::zero(); t_len];
        for i in 0..t_len {
            if !active[i] {
                continue;
            }
            let (xhat, inv) = self.emb_ln.forward_row(x.row(i), h0.row_mut(i));
            emb_xhat.row_mut(i).copy_from_slice(&xhat);
            emb_inv[i] = inv;
        }
        let emb_drop = drop_rng.as_deref_mut().map(|rng| {
            let m = sample_drop(t_len, d, &active, self.cfg.dropout, rng);
            mul_rows(&mut h0, &m, &active);
            m
        });

        let mut h = h0.clone();
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        let mut scratch: Vec<S> = Vec::new();
        for layer in &self.layers {
            let q = Self::affine_rows(&layer.wq, &layer.bq, &h, &active);
            let k = Self::affine_rows(&layer.wk, &layer.bk, &h, &active);
            let v = Self::affine_rows(&layer.wv, &layer.bv, &h, &active);

            let mut probs = Vec::with_capacity(heads);
            let mut attn_cat = Matrix::zeros(t_len, d);
            for head in 0..heads {
                let off = head * d_head;
                let mut p_mat = Matrix::zeros(t_len, t_len);
                for i in 0..t_len {
                    if !active[i] {
                        continue;
                    }
                    let qi = &q.row(i)[off..off + d_head];
                    let logits: Vec<S> = (0..t_len)
                        .map(|j| {
                            if active[j] {
                                math::dot(qi, &k.row(j)[off..off + d_head]) * inv_sqrt
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    let p = math::masked_softmax(&logits, &active, &mut scratch);
                    canonical_mix(&p, &v, off, d_head, &mut attn_cat.row_mut(i)[off..off + d_head]);
                    p_mat.row_mut(i).copy_from_slice(&p);
                }
                probs.push(p_mat);
            }

            let mut attn_out = Self::affine_rows(&layer.wo, &layer.bo, &attn_cat, &active);
            let attn_drop = drop_rng.as_deref_mut().map(|rng| {
                let m = sample_drop(t_len, d, &active, self.cfg.dropout, rng);
                mul_rows(&mut attn_out, &m, &active);
                m
            });

            let mut h1 = Matrix::zeros(t_len, d);
            let mut xhat1 = Matrix::zeros(t_len, d);
            let mut inv1 = vec![S::zero(); t_len];
            for i in 0..t_len {
                if !active[i] {
                    continue;
                }
                let mut r: Vec<S> = h.row(i).to_vec();
                math::add_assign(&mut r, attn_out.row(i));
                let (xh, inv) = layer.ln_attn.forward_row(&r, h1.row_mut(i));
                xhat1.row_mut(i).copy_from_slice(&xh);
                inv1[i] = inv;
            }

            let ffn_pre = Self::affine_rows(&layer.w1, &layer.b1, &h1, &active);
            let mut gelu_out = Matrix::zeros(t_len, self.cfg.d_ff);
            for i in 0..t_len {
                if !active[i] {
                    continue;
                }
                for (g, &p) in gelu_out.row_mut(i).iter_mut().zip(ffn_pre.row(i)) {
                    *g = gelu(p);
                }
            }
            let mut ffn_out = Self::affine_rows(&layer.w2, &layer.b2, &gelu_out, &active);
            let ffn_drop = drop_rng.as_deref_mut().map(|rng| {
                let m = sample_drop(t_len, d, &active, self.cfg.dropout, rng);
                mul_rows(&mut ffn_out, &m, &active);
                m
            });

            let mut h2 = Matrix::zeros(t_len, d);
            let mut xhat2 = Matrix::zeros(t_len, d);
            let mut inv2 = vec![S::zero(); t_len];
            for i in 0..t_len {
                if !active[i] {
                    continue;
                }
                let mut r: Vec<S> = h1.row(i).to_vec();
                math::add_assign(&mut r, ffn_out.row(i));
                let (xh, inv) = layer.ln_ffn.forward_row(&r, h2.row_mut(i));
                xhat2.row_mut(i).copy_from_slice(&xh);
                inv2[i] = inv;
            }

            layer_caches.push(LayerCache {
                q,
                k,
                v,
                probs,
                attn_cat,
                attn_drop,
                res1: LnRows { xhat: xhat1, inv_std: inv1 },
                h1,
                ffn_pre,
                gelu_out,
                ffn_drop,
                res2: LnRows { xhat: xhat2, inv_std: inv2 },
                h2: h2.clone(),
            });
            h = h2;
        }

        let logit = math::dot(&self.head_w, h.row(0)) + self.head_b[0];
        Ok((
            logit,
            Cache {
                active,
                emb_drop,
                emb: LnRows { xhat: emb_xhat, inv_std: emb_inv },
                h0,
                layers: layer_caches,
            },
        ))
    }

    /// Match probability for one input; inference mode, no dropout.
    pub fn forward(&self, input: &RerankInput) -> Result<S> {
        let (logit, _) = self.run(input, None)?;
        Ok(sigmoid(logit))
    }

    /// Binary cross-entropy against `label` for one input, plus its full
    /// parameter gradient. Inference mode (no dropout), so the loss is a
    /// deterministic function of the parameters.
    pub fn loss_and_grad(&self, input: &RerankInput, label: S) -> Result<(S, Self)> {
        let (logit, cache) = self.run(input, None)?;
        let mut grads = self.zeroed();
        self.backward(input, &cache, sigmoid(logit) - label, &mut grads);
        Ok((bce_with_logit(logit, label), grads))
    }

    /// Accumulates gradients of `d_logit * logit` into `grads`.
    pub(crate) fn backward(&self, input: &RerankInput, cache: &Cache<S>, d_logit: S, grads: &mut Self) {
        let t_len = input.tokens.len();
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let d_head = d / heads;
        let inv_sqrt = S::one() / cast::<S>((d_head as f64).sqrt());
        let active = &cache.active;

        let last_h = cache.layers.last().map_or(&cache.h0, |l| &l.h2);
        let mut d_h = Matrix::zeros(t_len, d);
        for (o, &w) in d_h.row_mut(0).iter_mut().zip(&self.head_w) {
            *o = d_logit * w;
        }
        for (g, &hv) in grads.head_w.iter_mut().zip(last_h.row(0)) {
            *g += d_logit * hv;
        }
        grads.head_b[0] += d_logit;

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let cache_l = &cache.layers[li];
            let x_in = if li == 0 { &cache.h0 } else { &cache.layers[li - 1].h2 };
            let gl = &mut grads.layers[li];

            // ln_ffn
            let mut d_res2 = Matrix::zeros(t_len, d);
            for i in 0..t_len {
                if !active[i] {
                    continue;
                }
                layer.ln_ffn.backward_row(
                    cache_l.res2.xhat.row(i),
                    cache_l.res2.inv_std[i],
                    d_h.row(i),
                    &mut gl.ln_ffn,
                    d_res2.row_mut(i),
                );
            }

            // residual: res2 = h1 + ffn_out
            let mut d_h1 = d_res2.clone();
            let mut d_ffn_out = d_res2;
            if let Some(mask) = &cache_l.ffn_drop {
                mul_rows(&mut d_ffn_out, mask, active);
            }

            // ffn_out = w2 * gelu_out + b2
            let mut d_gelu = Matrix::zeros(t_len, self.cfg.d_ff);
            for i in 0..t_len {
                if !active[i] {
                    continue;
                }
                gl.w2.add_outer(d_ffn_out.row(i), cache_l.gelu_out.row(i));
                math::add_assign(&mut gl.b2, d_ffn_out.row(i));
                d_gelu.row_mut(i).copy_from_slice(&layer.w2.matvec_t(d_ffn_out.row(i)));
            }

            // gelu_out = gelu(ffn_pre); ffn_pre = w1 * h1 + b1
            for i in 0..t_len {
                if !active[i] {
                    continue;
                }
                let d_pre: Vec<S> = d_gelu
                    .row(i)
                    .iter()
                    .zip(cache_l.ffn_pre.row(i))
                    .map(|(&dg, &p)| dg * gelu_grad(p))
                    .collect();
                gl.w1.add_outer(&d_pre, cache_l.h1.row(i));
                math::add_assign(&mut gl.b1, &d_pre);
                math::add_assign(d_h1.row_mut(i), &layer.w1.matvec_t(&d_pre));
            }

            // ln_attn
            let mut d_res1 = Matrix::zeros(t_len, d);
            for i in 0..t_len {
                if !active[i] {
                    continue;
                }
                layer.ln_attn.backward_row(
                    cache_l.res1.xhat.row(i),
                    cache_l.res1.inv_std[i],
                    d_h1.row(i),
                    &mut gl.ln_attn,
                    d_res1.row_mut(i),
                );
            }

            // residual: res1 = x_in + attn_out
            let mut d_x = d_res1.clone();
            let mut d_attn_out = d_res1;
            if let Some(mask) = &cache_l.attn_drop {
                mul_rows(&mut d_attn_out, mask, active);
            }

            // attn_out = wo * attn_cat + bo
            let mut d_cat = Matrix::zeros(t_len, d);
            for i in 0..t_len {
                if !active[i] {
                    continue;
                }
                gl.wo.add_outer(d_attn_out.row(i), cache_l.attn_cat.row(i));
                math::add_assign(&mut gl.bo, d_attn_out.row(i));
                d_cat.row_mut(i).copy_from_slice(&layer.wo.matvec_t(d_attn_out.row(i)));
            }

            // attention per head
            let mut d_q = Matrix::zeros(t_len, d);
            let mut d_k = Matrix::zeros(t_len, d);
            let mut d_v = Matrix::zeros(t_len, d);
            for head in 0..heads {
                let off = head * d_head;
                let p_mat = &cache_l.probs[head];
                for i in 0..t_len {
                    if !active[i] {
                        continue;
                    }
                    let d_out = &d_cat.row(i)[off..off + d_head];
                    let p_row = p_mat.row(i);
                    // dP and softmax backward fused per query row
                    let mut d_p = vec![S::zero(); t_len];
                    let mut inner = S::zero();
                    for j in 0..t_len {
                        if !active[j] {
                            continue;
                        }
                        let dp = math::dot(d_out, &cache_l.v.row(j)[off..off + d_head]);
                        d_p[j] = dp;
                        inner += dp * p_row[j];
                        // dV_j += P[i][j] * d_out
                        for (g, &o) in d_v.row_mut(j)[off..off + d_head].iter_mut().zip(d_out) {
                            *g += p_row[j] * o;
                        }
                    }
                    for j in 0..t_len {
                        if !active[j] {
                            continue;
                        }
                        let d_logit_ij = p_row[j] * (d_p[j] - inner) * inv_sqrt;
                        for (g, &kv) in d_q.row_mut(i)[off..off + d_head]
                            .iter_mut()
                            .zip(&cache_l.k.row(j)[off..off + d_head])
                        {
                            *g += d_logit_ij * kv;
                        }
                        for (g, &qv) in d_k.row_mut(j)[off..off + d_head]
                            .iter_mut()
                            .zip(&cache_l.q.row(i)[off..off + d_head])
                        {
                            *g += d_logit_ij * qv;
                        }
                    }
                }
            }

            // q = wq * x_in + bq (same for k, v)
            for i in 0..t_len {
                if !active[i] {
                    continue;
                }
                gl.wq.add_outer(d_q.row(i), x_in.row(i));
                math::add_assign(&mut gl.bq, d_q.row(i));
                math::add_assign(d_x.row_mut(i), &layer.wq.matvec_t(d_q.row(i)));
                gl.wk.add_outer(d_k.row(i), x_in.row(i));
                math::add_assign(&mut gl.bk, d_k.row(i));
                math::add_assign(d_x.row_mut(i), &layer.wk.matvec_t(d_k.row(i)));
                gl.wv.add_outer(d_v.row(i), x_in.row(i));
                math::add_assign(&mut gl.bv, d_v.row(i));
                math::add_assign(d_x.row_mut(i), &layer.wv.matvec_t(d_v.row(i)));
            }

            d_h = d_x;
        }

        // embeddings
        if let Some(mask) = &cache.emb_drop {
            mul_rows(&mut d_h, mask, active);
        }
        for i in 0..t_len {
            if !active[i] {
                continue;
            }
            let mut d_x = vec![S::zero(); d];
            self.emb_ln.backward_row(
                cache.emb.xhat.row(i),
                cache.emb.inv_std[i],
                d_h.row(i),
                &mut grads.emb_ln,
                &mut d_x,
            );
            math::add_assign(grads.tok.row_mut(input.tokens[i] as usize), &d_x);
            math::add_assign(grads.seg.row_mut(input.segments[i] as usize), &d_x);
            if input.positional[i] {
                math::add_assign(grads.pos.row_mut(i), &d_x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reranker::{BlockSpans, RerankInput};
    use rand::seq::SliceRandom;

    fn tiny_cfg() -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 16,
            vocab_size: 24,
            dropout: 0.0,
            seed: 11,
        }
    }

    fn input(tokens: Vec<u32>, seg_boundary: usize) -> RerankInput {
        let n = tokens.len();
        RerankInput {
            segments: (0..n).map(|i| u8::from(i >= seg_boundary)).collect(),
            positional: vec![true; n],
            tokens,
            spans: BlockSpans::default(),
        }
    }

    #[test]
    fn output_is_a_probability() {
        let model = RerankerModel::<f64>::new(tiny_cfg()).unwrap();
        for toks in [vec![2, 7, 9, 3, 5, 3, 8, 3], vec![2, 23, 3], vec![2, 6, 6, 6, 6, 6, 3]] {
            let p = model.forward(&input(toks, 2)).unwrap();
            assert!(p > 0.0 && p < 1.0, "probability {p} outside (0, 1)");
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = tiny_cfg();
        cfg.heads = 3;
        assert!(RerankerModel::<f64>::new(cfg).is_err());
        let mut cfg = tiny_cfg();
        cfg.dropout = 1.0;
        assert!(RerankerModel::<f64>::new(cfg).is_err());
        let mut cfg = tiny_cfg();
        cfg.layers = 0;
        assert!(RerankerModel::<f64>::new(cfg).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = RerankerModel::<f64>::new(tiny_cfg()).unwrap();
        let b = RerankerModel::<f64>::new(tiny_cfg()).unwrap();
        assert_eq!(a, b);
        let mut other = tiny_cfg();
        other.seed = 12;
        let c = RerankerModel::<f64>::new(other).unwrap();
        assert_ne!(a.flatten_params(), c.flatten_params());
    }

    #[test]
    fn appending_padding_leaves_the_probability_unchanged() {
        let model = RerankerModel::<f64>::new(tiny_cfg()).unwrap();
        let base = input(vec![2, 7, 9, 3, 5, 3, 8, 3], 4);
        let p0 = model.forward(&base).unwrap();
        let mut padded = base.clone();
        for _ in 0..5 {
            padded.tokens.push(PAD);
            padded.segments.push(1);
            padded.positional.push(true);
        }
        let p1 = model.forward(&padded).unwrap();
        assert!((p0 - p1).abs() <= 1e-6, "padding shifted probability by {}", (p0 - p1).abs());
    }

    fn bow_input(order: &[u32], positional_bow: bool) -> RerankInput {
        let mut tokens = vec![2, 6, 7, 3];
        let bow_start = tokens.len();
        tokens.extend_from_slice(order);
        let bow_end = tokens.len();
        tokens.extend_from_slice(&[3, 5, 3, 20, 3]);
        let n = tokens.len();
        let mut positional = vec![true; n];
        if !positional_bow {
            for p in &mut positional[bow_start..bow_end] {
                *p = false;
            }
        }
        RerankInput {
            segments: (0..n).map(|i| u8::from(i >= bow_end + 1)).collect(),
            positional,
            tokens,
            spans: BlockSpans::default(),
        }
    }

    #[test]
    fn unpositioned_bow_block_is_bitwise_permutation_invariant() {
        let model = RerankerModel::<f64>::new(tiny_cfg()).unwrap();
        let mut order = vec![10u32, 11, 12, 13, 14];
        let p0 = model.forward(&bow_input(&order, false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..10 {
            order.shuffle(&mut rng);
            let p = model.forward(&bow_input(&order, false)).unwrap();
            assert_eq!(p.to_bits(), p0.to_bits(), "order {order:?} changed the probability");
        }
    }

    #[test]
    fn positioned_bow_block_is_order_sensitive() {
        let model = RerankerModel::<f64>::new(tiny_cfg()).unwrap();
        let p0 = model.forward(&bow_input(&[10, 11, 12, 13, 14], true)).unwrap();
        let p1 = model.forward(&bow_input(&[14, 11, 12, 13, 10], true)).unwrap();
        assert_ne!(p0.to_bits(), p1.to_bits());
    }

    #[test]
    fn rejects_malformed_inputs() {
        let model = RerankerModel::<f64>::new(tiny_cfg()).unwrap();
        let oov = input(vec![2, 24, 3], 1);
        assert!(model.forward(&oov).is_err());
        let mut ragged = input(vec![2, 7, 3], 1);
        ragged.segments.pop();
        assert!(model.forward(&ragged).is_err());
        let long = input(vec![6; 17], 1);
        assert!(model.forward(&long).is_err());
        let mut bad_seg = input(vec![2, 7, 3], 1);
        bad_seg.segments[1] = 2;
        assert!(model.forward(&bad_seg).is_err());
        let pad_first = input(vec![0, 7, 3], 1);
        assert!(model.forward(&pad_first).is_err());
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = RerankerModel::<f64>::new(tiny_cfg()).unwrap();
        let cases = [
            (input(vec![2, 7, 9, 3, 5, 3, 8, 3], 4), 1.0),
            (input(vec![2, 10, 3, 6, 3, 0, 0, 0], 3), 0.0),
        ];
        let loss_of = |m: &RerankerModel<f64>| -> f64 {
            cases
                .iter()
                .map(|(x, y)| {
                    let (z, _) = m.run(x, None).unwrap();
                    bce_with_logit(z, *y)
                })
                .sum()
        };
        let mut grads = model.zeroed();
        for (x, y) in &cases {
            let (z, cache) = model.run(x, None).unwrap();
            model.backward(x, &cache, sigmoid(z) - y, &mut grads);
        }
        let flat = grads.flatten_params();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for (idx, &analytic) in flat.iter().enumerate() {
            let mut up = model.clone();
            up.nudge_param(idx, h);
            let mut down = model.clone();
            down.nudge_param(idx, -h);
            let fd = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
            if analytic.abs() < 1e-7 && fd.abs() < 1e-7 {
                continue;
            }
            let err = relative_error(analytic, fd);
            assert!(err < 1e-3, "param {idx}: analytic {analytic} vs finite difference {fd}");
            worst = worst.max(err);
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn dropout_draws_follow_the_seed() {
        let mut cfg = tiny_cfg();
        cfg.dropout = 0.3;
        let model = RerankerModel::<f64>::new(cfg).unwrap();
        let x = input(vec![2, 7, 9, 3, 5, 3, 8, 3], 4);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let (z1, _) = model.run(&x, Some(&mut r1)).unwrap();
        let (z2, _) = model.run(&x, Some(&mut r2)).unwrap();
        assert_eq!(z1.to_bits(), z2.to_bits());
    }
}
