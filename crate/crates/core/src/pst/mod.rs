//! Set transformer over weighted distance rows.
//!
//! A deterministic, CPU-only reference model: each structure arrives as a
//! weighted multiset of normalized distance rows plus a per-row species
//! embedding. Rows are embedded, passed through pre-layer-norm encoder
//! blocks whose attention uses the row weights inside the softmax, pooled by
//! the same weights, and mapped to a scalar. The weighting makes the whole
//! function invariant under splitting a row into equal-weight copies or
//! merging identical rows, so the prediction depends on the underlying
//! distribution rather than on how it happens to be tabulated.
//!
//! Gradients are hand-written reverse mode; no tape, no graph. `backward`
//! recomputes the forward caches and walks them once, which keeps the
//! parameter update path free of hidden state.

mod train;

pub use train::{
    build_input, normalize_columns, predict, species_embedding, train, Checkpoint, DatasetRecord,
    EmbeddingTable, EpochStats, NormStats, TrainOpts,
};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PstError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all attention weights are zero")]
    AllZeroWeights,
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("element {0} missing from embedding table")]
    MissingElement(u8),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PstConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoders: usize,
    pub attention_dropout: f64,
    pub dropout: f64,
    /// Columns per distance row.
    pub k: usize,
    /// Width of the species embedding fed alongside each row.
    pub species_dim: usize,
    pub seed: u64,
}

impl Default for PstConfig {
    fn default() -> Self {
        PstConfig {
            d_model: 128,
            heads: 4,
            encoders: 4,
            attention_dropout: 0.1,
            dropout: 0.0,
            k: 15,
            species_dim: 118,
            seed: 0,
        }
    }
}

impl PstConfig {
    pub fn validate(&self) -> Result<(), PstError> {
        if self.d_model == 0 || self.heads == 0 || self.k == 0 || self.species_dim == 0 {
            return Err(PstError::ShapeMismatch(
                "d_model, heads, k, and species_dim must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(PstError::ShapeMismatch(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        for (name, p) in [
            ("attention_dropout", self.attention_dropout),
            ("dropout", self.dropout),
        ] {
            if !(p.is_finite() && (0.0..1.0).contains(&p)) {
                return Err(PstError::ShapeMismatch(format!(
                    "{name} must lie in [0, 1), got {p}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub ln_gain: DVector<f64>,
    pub ln_bias: DVector<f64>,
    pub w_q: DMatrix<f64>,
    pub w_k: DMatrix<f64>,
    pub w_v: DMatrix<f64>,
    pub slp_w: DMatrix<f64>,
    pub slp_b: DVector<f64>,
}

/// All model parameters. The flat layout (see [`PstParams::flatten`]) is the
/// contract the optimizer and the checkpoints rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct PstParams {
    /// k x d embedding of the distance rows.
    pub w_s: DMatrix<f64>,
    /// species_dim x d embedding of the composition input.
    pub w_c: DMatrix<f64>,
    pub encoders: Vec<EncoderParams>,
    pub head_w: DVector<f64>,
    pub head_b: f64,
}

impl PstParams {
    /// Seeded uniform init in +-1/sqrt(fan_in) per matrix; gains start at 1,
    /// biases at 0.
    pub fn init(config: &PstConfig) -> Result<Self, PstError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            DMatrix::from_iterator(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.random_range(-bound..bound)),
            )
        };
        let w_s = uniform(config.k, d, config.k);
        let w_c = uniform(config.species_dim, d, config.species_dim);
        let mut encoders = Vec::with_capacity(config.encoders);
        for _ in 0..config.encoders {
            encoders.push(EncoderParams {
                ln_gain: DVector::from_element(d, 1.0),
                ln_bias: DVector::zeros(d),
                w_q: uniform(d, d, d),
                w_k: uniform(d, d, d),
                w_v: uniform(d, d, d),
                slp_w: uniform(d, d, d),
                slp_b: DVector::zeros(d),
            });
        }
        let bound = 1.0 / (d as f64).sqrt();
        let head_w = DVector::from_iterator(d, (0..d).map(|_| rng.random_range(-bound..bound)));
        Ok(PstParams {
            w_s,
            w_c,
            encoders,
            head_w,
            head_b: 0.0,
        })
    }

    pub fn zeros(config: &PstConfig) -> Result<Self, PstError> {
        config.validate()?;
        let d = config.d_model;
        Ok(PstParams {
            w_s: DMatrix::zeros(config.k, d),
            w_c: DMatrix::zeros(config.species_dim, d),
            encoders: (0..config.encoders)
                .map(|_| EncoderParams {
                    ln_gain: DVector::zeros(d),
                    ln_bias: DVector::zeros(d),
                    w_q: DMatrix::zeros(d, d),
                    w_k: DMatrix::zeros(d, d),
                    w_v: DMatrix::zeros(d, d),
                    slp_w: DMatrix::zeros(d, d),
                    slp_b: DVector::zeros(d),
                })
                .collect(),
            head_w: DVector::zeros(d),
            head_b: 0.0,
        })
    }

    pub fn validate(&self, config: &PstConfig) -> Result<(), PstError> {
        config.validate()?;
        let d = config.d_model;
        let check = |name: &str, rows: usize, cols: usize, m: &DMatrix<f64>| {
            if m.nrows() != rows || m.ncols() != cols {
                return Err(PstError::ShapeMismatch(format!(
                    "{name}: expected {rows}x{cols}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(())
        };
        check("w_s", config.k, d, &self.w_s)?;
        check("w_c", config.species_dim, d, &self.w_c)?;
        if self.encoders.len() != config.encoders {
            return Err(PstError::ShapeMismatch(format!(
                "{} encoder layers, config says {}",
                self.encoders.len(),
                config.encoders
            )));
        }
        for (i, e) in self.encoders.iter().enumerate() {
            check(&format!("encoder {i} w_q"), d, d, &e.w_q)?;
            check(&format!("encoder {i} w_k"), d, d, &e.w_k)?;
            check(&format!("encoder {i} w_v"), d, d, &e.w_v)?;
            check(&format!("encoder {i} slp_w"), d, d, &e.slp_w)?;
            for (name, v) in [
                ("ln_gain", &e.ln_gain),
                ("ln_bias", &e.ln_bias),
                ("slp_b", &e.slp_b),
            ] {
                if v.len() != d {
                    return Err(PstError::ShapeMismatch(format!(
                        "encoder {i} {name}: expected length {d}, got {}",
                        v.len()
                    )));
                }
            }
        }
        if self.head_w.len() != d {
            return Err(PstError::ShapeMismatch(format!(
                "head_w: expected length {d}, got {}",
                self.head_w.len()
            )));
        }
        Ok(())
    }

    /// Tensors in flat order: w_s, w_c, then per encoder (ln_gain, ln_bias,
    /// w_q, w_k, w_v, slp_w, slp_b), then head_w, head_b. Matrices are laid
    /// out column-major.
    pub fn tensor_spans(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut spans = Vec::new();
        let mut at = 0;
        let mut push = |name: String, len: usize, at: &mut usize| {
            spans.push((name, *at..*at + len));
            *at += len;
        };
        push("w_s".into(), self.w_s.len(), &mut at);
        push("w_c".into(), self.w_c.len(), &mut at);
        for (i, e) in self.encoders.iter().enumerate() {
            push(format!("encoder{i}.ln_gain"), e.ln_gain.len(), &mut at);
            push(format!("encoder{i}.ln_bias"), e.ln_bias.len(), &mut at);
            push(format!("encoder{i}.w_q"), e.w_q.len(), &mut at);
            push(format!("encoder{i}.w_k"), e.w_k.len(), &mut at);
            push(format!("encoder{i}.w_v"), e.w_v.len(), &mut at);
            push(format!("encoder{i}.slp_w"), e.slp_w.len(), &mut at);
            push(format!("encoder{i}.slp_b"), e.slp_b.len(), &mut at);
        }
        push("head_w".into(), self.head_w.len(), &mut at);
        push("head_b".into(), 1, &mut at);
        spans
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.w_s.iter());
        out.extend(self.w_c.iter());
        for e in &self.encoders {
            out.extend(e.ln_gain.iter());
            out.extend(e.ln_bias.iter());
            out.extend(e.w_q.iter());
            out.extend(e.w_k.iter());
            out.extend(e.w_v.iter());
            out.extend(e.slp_w.iter());
            out.extend(e.slp_b.iter());
        }
        out.extend(self.head_w.iter());
        out.push(self.head_b);
        out
    }

    pub fn from_flat(config: &PstConfig, flat: &[f64]) -> Result<Self, PstError> {
        let mut template = Self::zeros(config)?;
        let expected = template.flatten().len();
        if flat.len() != expected {
            return Err(PstError::ShapeMismatch(format!(
                "flat parameter vector: expected {expected} values, got {}",
                flat.len()
            )));
        }
        let mut at = 0;
        let take = |len: usize, at: &mut usize| {
            let s = &flat[*at..*at + len];
            *at += len;
            s.to_vec()
        };
        let fill_mat = |m: &mut DMatrix<f64>, vals: Vec<f64>| {
            m.iter_mut().zip(vals).for_each(|(dst, v)| *dst = v);
        };
        let fill_vec = |v: &mut DVector<f64>, vals: Vec<f64>| {
            v.iter_mut().zip(vals).for_each(|(dst, x)| *dst = x);
        };
        let n = template.w_s.len();
        fill_mat(&mut template.w_s, take(n, &mut at));
        let n = template.w_c.len();
        fill_mat(&mut template.w_c, take(n, &mut at));
        for e in &mut template.encoders {
            let n = e.ln_gain.len();
            fill_vec(&mut e.ln_gain, take(n, &mut at));
            let n = e.ln_bias.len();
            fill_vec(&mut e.ln_bias, take(n, &mut at));
            let n = e.w_q.len();
            fill_mat(&mut e.w_q, take(n, &mut at));
            let n = e.w_k.len();
            fill_mat(&mut e.w_k, take(n, &mut at));
            let n = e.w_v.len();
            fill_mat(&mut e.w_v, take(n, &mut at));
            let n = e.slp_w.len();
            fill_mat(&mut e.slp_w, take(n, &mut at));
            let n = e.slp_b.len();
            fill_vec(&mut e.slp_b, take(n, &mut at));
        }
        let n = template.head_w.len();
        fill_vec(&mut template.head_w, take(n, &mut at));
        template.head_b = flat[at];
        Ok(template)
    }
}

/// One structure's worth of model input: a weighted multiset of distance
/// rows. Padded rows (mask false) must carry weight exactly 0; real weights
/// sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PstInput {
    pub rows: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub species_embed: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl PstInput {
    pub fn unpadded(rows: Vec<Vec<f64>>, weights: Vec<f64>, species_embed: Vec<Vec<f64>>) -> Self {
        let mask = vec![true; rows.len()];
        PstInput {
            rows,
            weights,
            species_embed,
            mask,
        }
    }

    /// Appends weight-0 masked rows until there are `r` of them. The padded
    /// rows provably cannot change the output, which is what makes batching
    /// by padding sound.
    pub fn pad_to(&mut self, r: usize, k: usize, species_dim: usize) {
        while self.rows.len() < r {
            self.rows.push(vec![0.0; k]);
            self.weights.push(0.0);
            self.species_embed.push(vec![0.0; species_dim]);
            self.mask.push(false);
        }
    }

    fn validate(&self, config: &PstConfig) -> Result<(), PstError> {
        let r = self.rows.len();
        if r == 0 {
            return Err(PstError::ShapeMismatch("input has no rows".into()));
        }
        if self.weights.len() != r || self.species_embed.len() != r || self.mask.len() != r {
            return Err(PstError::ShapeMismatch(format!(
                "rows/weights/species/mask lengths disagree: {r}/{}/{}/{}",
                self.weights.len(),
                self.species_embed.len(),
                self.mask.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != config.k {
                return Err(PstError::ShapeMismatch(format!(
                    "row {i} has {} columns, config.k is {}",
                    row.len(),
                    config.k
                )));
            }
        }
        for (i, s) in self.species_embed.iter().enumerate() {
            if s.len() != config.species_dim {
                return Err(PstError::ShapeMismatch(format!(
                    "species embedding {i} has width {}, config.species_dim is {}",
                    s.len(),
                    config.species_dim
                )));
            }
        }
        let mut total = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(PstError::ShapeMismatch(format!(
                    "weight {i} must be finite and non-negative, got {w}"
                )));
            }
            if !self.mask[i] && w != 0.0 {
                return Err(PstError::ShapeMismatch(format!(
                    "padded row {i} carries weight {w}, expected exactly 0"
                )));
            }
            total += w;
        }
        if total <= 0.0 {
            return Err(PstError::AllZeroWeights);
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(PstError::ShapeMismatch(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Softmax with multiplicative weights folded in:
/// out_j = w_j exp(z_j) / sum_l w_l exp(z_l).
///
/// The max shift runs over positive-weight entries only, and zero-weight
/// entries come out exactly 0.0, so padded rows can neither overflow the
/// shift nor leak mass.
pub fn weighted_softmax(z: &[f64], w: &[f64]) -> Result<Vec<f64>, PstError> {
    if z.len() != w.len() {
        return Err(PstError::ShapeMismatch(format!(
            "{} logits vs {} weights",
            z.len(),
            w.len()
        )));
    }
    let mut z_max = f64::NEG_INFINITY;
    for (&zi, &wi) in z.iter().zip(w) {
        if !(wi.is_finite() && wi >= 0.0) {
            return Err(PstError::ShapeMismatch(format!(
                "weights must be finite and non-negative, got {wi}"
            )));
        }
        if wi > 0.0 {
            if !zi.is_finite() {
                return Err(PstError::ShapeMismatch(format!("non-finite logit {zi}")));
            }
            z_max = z_max.max(zi);
        }
    }
    if z_max == f64::NEG_INFINITY {
        return Err(PstError::AllZeroWeights);
    }
    let mut out: Vec<f64> = z
        .iter()
        .zip(w)
        .map(|(&zi, &wi)| if wi > 0.0 { wi * (zi - z_max).exp() } else { 0.0 })
        .collect();
    let denom: f64 = out.iter().sum();
    for o in &mut out {
        *o /= denom;
    }
    Ok(out)
}

/// Dropout policy for one forward pass. `Seeded` draws masks from a
/// counter-based stream (base seed, per-call step), so the same step always
/// sees the same masks and `backward` agrees with its own forward.
#[derive(Debug, Clone, Copy)]
pub enum Dropout {
    Off,
    Seeded { seed: u64, step: u64 },
}

const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let x2 = x * x;
    let u = c * (x + 0.044715 * x * x2);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x2)
}

struct LayerCache {
    #[cfg_attr(not(test), allow(dead_code))]
    x_in: DMatrix<f64>,
    /// Normalized rows before gain/bias.
    n_pre: DMatrix<f64>,
    sigma: Vec<f64>,
    /// Rows after gain/bias (the attention input).
    n: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Per head, post-softmax pre-dropout attention.
    attn: Vec<DMatrix<f64>>,
    /// Per head, multiplier masks (entries 0 or 1/(1-p)); None when off.
    attn_mask: Vec<Option<DMatrix<f64>>>,
    h: DMatrix<f64>,
    /// Pre-activation of the SLP.
    z: DMatrix<f64>,
    s_mask: Option<DMatrix<f64>>,
}

struct Cache {
    r_mat: DMatrix<f64>,
    t_mat: DMatrix<f64>,
    layers: Vec<LayerCache>,
    #[cfg_attr(not(test), allow(dead_code))]
    x_final: DMatrix<f64>,
    pooled: DVector<f64>,
    prediction: f64,
}

fn draw_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> DMatrix<f64> {
    let keep = 1.0 / (1.0 - p);
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = if rng.random::<f64>() < p { 0.0 } else { keep };
        }
    }
    m
}

fn finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

fn forward_cached(
    input: &PstInput,
    params: &PstParams,
    config: &PstConfig,
    dropout: &Dropout,
) -> Result<Cache, PstError> {
    params.validate(config)?;
    input.validate(config)?;
    let r = input.rows.len();
    let d = config.d_model;
    let dh = d / config.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let r_mat = DMatrix::from_fn(r, config.k, |i, j| input.rows[i][j]);
    let t_mat = DMatrix::from_fn(r, config.species_dim, |i, j| input.species_embed[i][j]);
    let mut x = &r_mat * &params.w_s + &t_mat * &params.w_c;
    if !finite(&x) {
        return Err(PstError::NonFiniteActivation { layer: 0 });
    }

    let mut rng = match dropout {
        Dropout::Off => None,
        Dropout::Seeded { seed, step } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(*step);
            Some(rng)
        }
    };

    let mut layers = Vec::with_capacity(config.encoders);
    for (li, enc) in params.encoders.iter().enumerate() {
        // Pre-LN: normalize, then project; the residual skips the norm.
        let mut n_pre = DMatrix::zeros(r, d);
        let mut n = DMatrix::zeros(r, d);
        let mut sigma = vec![0.0; r];
        for i in 0..r {
            let row = x.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let sd = (var + LN_EPS).sqrt();
            sigma[i] = sd;
            for j in 0..d {
                let np = (x[(i, j)] - mean) / sd;
                n_pre[(i, j)] = np;
                n[(i, j)] = np * enc.ln_gain[j] + enc.ln_bias[j];
            }
        }

        let q = &n * &enc.w_q;
        let k = &n * &enc.w_k;
        let v = &n * &enc.w_v;

        let mut h = DMatrix::zeros(r, d);
        let mut attn = Vec::with_capacity(config.heads);
        let mut attn_mask = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let off = head * dh;
            let qh = q.columns(off, dh);
            let kh = k.columns(off, dh);
            let vh = v.columns(off, dh);
            let logits = (qh * kh.transpose()) * scale;
            let mut a = DMatrix::zeros(r, r);
            for i in 0..r {
                let z_row: Vec<f64> = logits.row(i).iter().copied().collect();
                let sm = weighted_softmax(&z_row, &input.weights)?;
                for (j, val) in sm.into_iter().enumerate() {
                    a[(i, j)] = val;
                }
            }
            let mask = match (&mut rng, config.attention_dropout > 0.0) {
                (Some(rng), true) => Some(draw_mask(rng, r, r, config.attention_dropout)),
                _ => None,
            };
            let a_used = match &mask {
                Some(m) => a.component_mul(m),
                None => a.clone(),
            };
            let hh = &a_used * vh;
            h.view_mut((0, off), (r, dh)).copy_from(&hh);
            attn.push(a);
            attn_mask.push(mask);
        }

        let mut z = &h * &enc.slp_w;
        for i in 0..r {
            for j in 0..d {
                z[(i, j)] += enc.slp_b[j];
            }
        }
        let g = z.map(gelu);
        let s_mask = match (&mut rng, config.dropout > 0.0) {
            (Some(rng), true) => Some(draw_mask(rng, r, d, config.dropout)),
            _ => None,
        };
        let s = match &s_mask {
            Some(m) => g.component_mul(m),
            None => g,
        };

        let x_out = &x + &s;
        if !finite(&x_out) {
            return Err(PstError::NonFiniteActivation { layer: li + 1 });
        }
        layers.push(LayerCache {
            x_in: x,
            n_pre,
            sigma,
            n,
            q,
            k,
            v,
            attn,
            attn_mask,
            h,
            z,
            s_mask,
        });
        x = x_out;
    }

    let w_vec = DVector::from_row_slice(&input.weights);
    let pooled = x.transpose() * &w_vec;
    let prediction = pooled.dot(&params.head_w) + params.head_b;
    if !prediction.is_finite() {
        return Err(PstError::NonFiniteActivation {
            layer: config.encoders + 1,
        });
    }
    Ok(Cache {
        r_mat,
        t_mat,
        layers,
        x_final: x,
        pooled,
        prediction,
    })
}

/// Runs the model: prediction plus the pooled final embedding.
/// Deterministic for `Dropout::Off`, and for a fixed `Seeded` step.
pub fn forward(
    input: &PstInput,
    params: &PstParams,
    config: &PstConfig,
    dropout: &Dropout,
) -> Result<(f64, Vec<f64>), PstError> {
    let cache = forward_cached(input, params, config, dropout)?;
    Ok((cache.prediction, cache.pooled.iter().copied().collect()))
}

/// Reverse-mode gradients of `upstream * prediction` with respect to every
/// parameter. Recomputes the forward pass internally (same dropout masks),
/// so the returned prediction matches `forward` exactly.
pub fn backward(
    input: &PstInput,
    params: &PstParams,
    config: &PstConfig,
    dropout: &Dropout,
    upstream: f64,
) -> Result<(f64, PstParams), PstError> {
    let cache = forward_cached(input, params, config, dropout)?;
    let r = input.rows.len();
    let d = config.d_model;
    let dh = d / config.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = PstParams::zeros(config)?;

    grads.head_b = upstream;
    grads.head_w = &cache.pooled * upstream;
    let d_pooled = &params.head_w * upstream;
    // pooled = X^T w, so dX[i, :] = w_i * d_pooled.
    let mut dx = DMatrix::zeros(r, d);
    for i in 0..r {
        for j in 0..d {
            dx[(i, j)] = input.weights[i] * d_pooled[j];
        }
    }

    for (li, enc) in params.encoders.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let g = &mut grads.encoders[li];

        // X_out = X_in + S; dx currently holds dX_out. The residual copy of
        // dX_out flows straight through; the branch below adds the rest.
        let ds = dx.clone();
        let dg_out = match &lc.s_mask {
            Some(m) => ds.component_mul(m),
            None => ds,
        };
        let dz = dg_out.component_mul(&lc.z.map(gelu_prime));
        for j in 0..d {
            g.slp_b[j] += dz.column(j).sum();
        }
        g.slp_w += lc.h.transpose() * &dz;
        let dh_mat = &dz * enc.slp_w.transpose();

        let mut dq = DMatrix::zeros(r, d);
        let mut dk = DMatrix::zeros(r, d);
        let mut dv = DMatrix::zeros(r, d);
        for head in 0..config.heads {
            let off = head * dh;
            let dhh = dh_mat.columns(off, dh);
            let a = &lc.attn[head];
            let a_used = match &lc.attn_mask[head] {
                Some(m) => a.component_mul(m),
                None => a.clone(),
            };
            let vh = lc.v.columns(off, dh);
            let da_used = dhh * vh.transpose();
            let dvh = a_used.transpose() * dhh;
            dv.view_mut((0, off), (r, dh)).copy_from(&dvh);
            let da = match &lc.attn_mask[head] {
                Some(m) => da_used.component_mul(m),
                None => da_used,
            };
            // Softmax rows: dL = a .* (da - <da, a>), zero where a is zero.
            let mut dl = DMatrix::zeros(r, r);
            for i in 0..r {
                let dot: f64 = (0..r).map(|j| da[(i, j)] * a[(i, j)]).sum();
                for j in 0..r {
                    dl[(i, j)] = a[(i, j)] * (da[(i, j)] - dot);
                }
            }
            let kh = lc.k.columns(off, dh);
            let qh = lc.q.columns(off, dh);
            let dqh = (&dl * kh) * scale;
            let dkh = (dl.transpose() * qh) * scale;
            dq.view_mut((0, off), (r, dh)).copy_from(&dqh);
            dk.view_mut((0, off), (r, dh)).copy_from(&dkh);
        }

        g.w_q += lc.n.transpose() * &dq;
        g.w_k += lc.n.transpose() * &dk;
        g.w_v += lc.n.transpose() * &dv;
        let dn = &dq * enc.w_q.transpose() + &dk * enc.w_k.transpose() + &dv * enc.w_v.transpose();

        // Layer norm backward, one row at a time.
        let mut dx_in = dx; // residual path
        for i in 0..r {
            let mut mean_dnp = 0.0;
            let mut mean_dnp_n = 0.0;
            let mut dnp = vec![0.0; d];
            for j in 0..d {
                g.ln_gain[j] += dn[(i, j)] * lc.n_pre[(i, j)];
                g.ln_bias[j] += dn[(i, j)];
                dnp[j] = dn[(i, j)] * enc.ln_gain[j];
                mean_dnp += dnp[j];
                mean_dnp_n += dnp[j] * lc.n_pre[(i, j)];
            }
            mean_dnp /= d as f64;
            mean_dnp_n /= d as f64;
            for j in 0..d {
                dx_in[(i, j)] +=
                    (dnp[j] - mean_dnp - lc.n_pre[(i, j)] * mean_dnp_n) / lc.sigma[i];
            }
        }
        dx = dx_in;
    }

    grads.w_s = cache.r_mat.transpose() * &dx;
    grads.w_c = cache.t_mat.transpose() * &dx;
    Ok((cache.prediction, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> PstConfig {
        PstConfig {
            d_model: 8,
            heads: 2,
            encoders: 1,
            attention_dropout: 0.0,
            dropout: 0.0,
            k: 4,
            species_dim: 3,
            seed: 7,
        }
    }

    pub(super) fn random_input(rng: &mut ChaCha8Rng, r: usize, k: usize, s: usize) -> PstInput {
        let rows = (0..r)
            .map(|_| (0..k).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let mut weights: Vec<f64> = (0..r).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        let species = (0..r)
            .map(|_| (0..s).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        PstInput::unpadded(rows, weights, species)
    }

    #[test]
    fn weighted_softmax_with_uniform_weights_is_softmax() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let w = [0.25; 4];
        let got = weighted_softmax(&z, &w).unwrap();
        let m = 2.0;
        let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (g, e) in got.iter().zip(&exps) {
            assert!((g - e / denom).abs() <= 1e-15);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn weighted_softmax_of_constant_logits_returns_the_weights() {
        let z = [0.7; 5];
        let w = [0.1, 0.2, 0.3, 0.15, 0.25];
        let got = weighted_softmax(&z, &w).unwrap();
        for (g, wi) in got.iter().zip(&w) {
            assert!((g - wi).abs() <= 1e-15);
        }
    }

    #[test]
    fn weighted_softmax_split_entry_halves_its_share() {
        let z = [0.4, -0.3, 1.1];
        let w = [0.5, 0.3, 0.2];
        let base = weighted_softmax(&z, &w).unwrap();
        let z2 = [0.4, 0.4, -0.3, 1.1];
        let w2 = [0.25, 0.25, 0.3, 0.2];
        let split = weighted_softmax(&z2, &w2).unwrap();
        assert!((split[0] - base[0] / 2.0).abs() <= 1e-15);
        assert!((split[1] - base[0] / 2.0).abs() <= 1e-15);
        assert!((split[2] - base[1]).abs() <= 1e-15);
        assert!((split[3] - base[2]).abs() <= 1e-15);
    }

    #[test]
    fn weighted_softmax_zero_weights_and_stability() {
        let got = weighted_softmax(&[1000.0, -1000.0, 5000.0], &[0.5, 0.5, 0.0]).unwrap();
        assert_eq!(got[2], 0.0);
        assert!(got.iter().all(|v| v.is_finite()));
        assert!((got.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(matches!(
            weighted_softmax(&[1.0, 2.0], &[0.0, 0.0]),
            Err(PstError::AllZeroWeights)
        ));
        assert!(matches!(
            weighted_softmax(&[1.0], &[1.0, 2.0]),
            Err(PstError::ShapeMismatch(_))
        ));
        assert!(matches!(
            weighted_softmax(&[f64::NAN], &[1.0]),
            Err(PstError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn single_row_attention_is_the_value_vector() {
        // With r=1 the softmax is 1 whatever the logit, so the attention
        // output is V's single row and X_out = X + SLP(V).
        let config = PstConfig {
            heads: 1,
            ..tiny_config()
        };
        let params = PstParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_input(&mut rng, 1, config.k, config.species_dim);
        let cache = forward_cached(&input, &params, &config, &Dropout::Off).unwrap();
        let lc = &cache.layers[0];
        assert_eq!(lc.attn[0][(0, 0)], 1.0);
        for j in 0..config.d_model {
            assert!((lc.h[(0, j)] - lc.v[(0, j)]).abs() <= 1e-15);
        }
        let manual = lc.x_in[(0, 0)] + gelu(lc.z[(0, 0)]);
        assert!((cache.x_final[(0, 0)] - manual).abs() <= 1e-15);
    }

    #[test]
    fn zero_slp_makes_the_encoder_an_identity() {
        let config = tiny_config();
        let mut params = PstParams::init(&config).unwrap();
        params.encoders[0].slp_w.fill(0.0);
        params.encoders[0].slp_b.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_input(&mut rng, 4, config.k, config.species_dim);
        let cache = forward_cached(&input, &params, &config, &Dropout::Off).unwrap();
        let x0 = &cache.r_mat * &params.w_s + &cache.t_mat * &params.w_c;
        assert_eq!(cache.x_final, x0);
    }

    #[test]
    fn forward_is_deterministic_and_train_step_reproducible() {
        let config = PstConfig {
            attention_dropout: 0.3,
            dropout: 0.2,
            ..tiny_config()
        };
        let params = PstParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_input(&mut rng, 5, config.k, config.species_dim);
        let a = forward(&input, &params, &config, &Dropout::Off).unwrap();
        let b = forward(&input, &params, &config, &Dropout::Off).unwrap();
        assert_eq!(a, b);
        let t1 = forward(&input, &params, &config, &Dropout::Seeded { seed: 9, step: 4 }).unwrap();
        let t2 = forward(&input, &params, &config, &Dropout::Seeded { seed: 9, step: 4 }).unwrap();
        assert_eq!(t1, t2);
        let t3 = forward(&input, &params, &config, &Dropout::Seeded { seed: 9, step: 5 }).unwrap();
        assert_ne!(t1.0, t3.0, "different steps should draw different masks");
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let config = tiny_config();
        let params = PstParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let good = random_input(&mut rng, 3, config.k, config.species_dim);

        let mut bad = good.clone();
        bad.rows[1].pop();
        assert!(matches!(
            forward(&bad, &params, &config, &Dropout::Off),
            Err(PstError::ShapeMismatch(_))
        ));

        let mut bad = good.clone();
        bad.weights[0] += 0.5;
        assert!(matches!(
            forward(&bad, &params, &config, &Dropout::Off),
            Err(PstError::ShapeMismatch(_))
        ));

        let mut bad = good.clone();
        bad.mask[2] = false; // still carries weight
        assert!(matches!(
            forward(&bad, &params, &config, &Dropout::Off),
            Err(PstError::ShapeMismatch(_))
        ));

        let mut nan_params = params.clone();
        nan_params.w_s[(0, 0)] = f64::NAN;
        assert!(matches!(
            forward(&good, &nan_params, &config, &Dropout::Off),
            Err(PstError::NonFiniteActivation { layer: 0 })
        ));

        let mut inf_params = params.clone();
        inf_params.encoders[0].slp_b[0] = f64::INFINITY;
        assert!(matches!(
            forward(&good, &inf_params, &config, &Dropout::Off),
            Err(PstError::NonFiniteActivation { layer: 1 })
        ));
    }

    #[test]
    fn flatten_round_trips_and_spans_cover_everything() {
        let config = tiny_config();
        let params = PstParams::init(&config).unwrap();
        let flat = params.flatten();
        let back = PstParams::from_flat(&config, &flat).unwrap();
        assert_eq!(params, back);
        let spans = params.tensor_spans();
        assert_eq!(spans.last().unwrap().1.end, flat.len());
        let mut covered = 0;
        for (_, range) in &spans {
            assert_eq!(range.start, covered);
            covered = range.end;
        }
        assert!(matches!(
            PstParams::from_flat(&config, &flat[1..]),
            Err(PstError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let config = tiny_config();
        let params = PstParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_input(&mut rng, 3, config.k, config.species_dim);
        let (_, grads) = backward(&input, &params, &config, &Dropout::Off, 0.0).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn pooling_gradient_scales_with_row_weight() {
        // With zero encoders the model is linear in the pooled embedding,
        // and each row's contribution to dW_s is proportional to its weight.
        let config = PstConfig {
            encoders: 0,
            ..tiny_config()
        };
        let params = PstParams::init(&config).unwrap();
        let rows = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let species = vec![vec![0.0; 3]; 2];
        let a = PstInput::unpadded(rows.clone(), vec![0.25, 0.75], species.clone());
        let b = PstInput::unpadded(rows, vec![0.5, 0.5], species);
        let (_, ga) = backward(&a, &params, &config, &Dropout::Off, 1.0).unwrap();
        let (_, gb) = backward(&b, &params, &config, &Dropout::Off, 1.0).unwrap();
        // Row 0 hits w_s row 0; doubling its weight doubles that gradient.
        for j in 0..config.d_model {
            assert!((ga.w_s[(0, j)] * 2.0 - gb.w_s[(0, j)]).abs() <= 1e-15);
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_a_tiny_model() {
        let config = tiny_config();
        let params = PstParams::init(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = random_input(&mut rng, 3, config.k, config.species_dim);
        let (_, grads) = backward(&input, &params, &config, &Dropout::Off, 1.0).unwrap();
        let analytic = grads.flatten();
        let base = params.flatten();
        let step = 1e-5;
        // Spot-check a spread of coordinates here; the acceptance suite
        // sweeps every tensor.
        for idx in (0..base.len()).step_by(7) {
            let mut plus = base.clone();
            plus[idx] += step;
            let mut minus = base.clone();
            minus[idx] -= step;
            let fp = forward(
                &input,
                &PstParams::from_flat(&config, &plus).unwrap(),
                &config,
                &Dropout::Off,
            )
            .unwrap()
            .0;
            let fm = forward(
                &input,
                &PstParams::from_flat(&config, &minus).unwrap(),
                &config,
                &Dropout::Off,
            )
            .unwrap()
            .0;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[idx];
            assert!(
                (a - numeric).abs() <= 1e-6 * a.abs().max(numeric.abs()).max(1.0),
                "param {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
