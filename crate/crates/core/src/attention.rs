//! Attention kernels.
//!
//! [`ufo_attention`] is the linear path: per head it forms `M = Kᵀ V`
//! (`h × h`), L2-normalizes the query rows and the columns of `M`, and returns
//! `Q̂ M̂`. Nothing of size `N × N` is ever allocated.
//! [`ufo_attention_reference`] computes the same result one `q̂ᵢ · k̂ⱼ` dot
//! product at a time and is used as the oracle. [`softmax_attention`] is the
//! quadratic baseline.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Extents of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    /// Token count `N`.
    pub tokens: usize,
    pub d_model: usize,
    /// Total projected width of Q, K and V across heads.
    pub d_embed: usize,
    pub heads: usize,
}

impl AttentionDims {
    pub fn new(tokens: usize, d_model: usize, d_embed: usize, heads: usize) -> Result<Self> {
        let dims = AttentionDims { tokens, d_model, d_embed, heads };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.d_model == 0 || self.heads == 0 || self.d_embed == 0 {
            return Err(Error::dim(format!("attention extents must be positive: {self:?}")));
        }
        if self.d_embed % self.heads != 0 {
            return Err(Error::dim(format!(
                "d_embed {} is not divisible by {} heads",
                self.d_embed, self.heads
            )));
        }
        Ok(())
    }

    /// Per-head width `h`.
    pub fn head_dim(&self) -> usize {
        self.d_embed / self.heads
    }

    /// Scaling dimension of the softmax baseline.
    pub fn d_k(&self) -> usize {
        self.head_dim()
    }

    pub fn with_tokens(&self, tokens: usize) -> Self {
        AttentionDims { tokens, ..*self }
    }
}

/// Normalization applied to the query rows and the `KᵀV` columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum NormKind {
    #[default]
    XNorm,
    LayerNorm,
    GroupNorm,
    InstanceNorm,
    LearnableP,
    SingleL2QOnly,
    SingleL2KvOnly,
}

impl NormKind {
    pub const ALL: [NormKind; 7] = [
        NormKind::XNorm,
        NormKind::LayerNorm,
        NormKind::GroupNorm,
        NormKind::InstanceNorm,
        NormKind::LearnableP,
        NormKind::SingleL2QOnly,
        NormKind::SingleL2KvOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormKind::XNorm => "xnorm",
            NormKind::LayerNorm => "layer_norm",
            NormKind::GroupNorm => "group_norm",
            NormKind::InstanceNorm => "instance_norm",
            NormKind::LearnableP => "learnable_p",
            NormKind::SingleL2QOnly => "single_l2_q_only",
            NormKind::SingleL2KvOnly => "single_l2_kv_only",
        }
    }

    /// Whether the kind carries trainable exponents.
    pub fn has_exponent(self) -> bool {
        self == NormKind::LearnableP
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = NormKind::ALL.iter().map(|k| k.name()).collect();
                Error::usage(format!("unknown normalization kind `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Which side of the attention a normalization acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Query rows, `[.., N, h]`, normalized along the channel axis.
    Query,
    /// `KᵀV`, `[.., h, h]`, normalized per column.
    KeyValue,
}

/// Weights of one attention layer. Attention has no biases.
#[derive(Clone, Debug)]
pub struct AttentionParams<T: Element> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_proj: Tensor<T>,
    /// One scaler per head for the query side.
    pub gamma_q: Tensor<T>,
    /// One scaler per head for the `KᵀV` side.
    pub gamma_kv: Tensor<T>,
    /// Per-head exponents, used only by [`NormKind::LearnableP`].
    pub p_q: Tensor<T>,
    pub p_kv: Tensor<T>,
    pub eps: f64,
    pub kind: NormKind,
}

impl<T: Element> AttentionParams<T> {
    /// Truncated-normal weights with standard deviation `std`, unit gammas,
    /// exponents at 2.
    pub fn init(dims: &AttentionDims, std: f64, rng: &mut SplitMix64) -> Result<Self> {
        dims.validate()?;
        let mut w = |r: usize, c: usize| {
            let v: Vec<f64> = (0..r * c).map(|_| rng.trunc_normal(std)).collect();
            Tensor::from_f64(&[r, c], &v)
        };
        let (d, e) = (dims.d_model, dims.d_embed);
        Ok(AttentionParams {
            w_q: w(d, e)?,
            w_k: w(d, e)?,
            w_v: w(d, e)?,
            w_proj: w(e, d)?,
            gamma_q: Tensor::ones(&[dims.heads]),
            gamma_kv: Tensor::ones(&[dims.heads]),
            p_q: Tensor::full(&[dims.heads], T::from_f64(2.0)),
            p_kv: Tensor::full(&[dims.heads], T::from_f64(2.0)),
            eps: 1e-6,
            kind: NormKind::XNorm,
        })
    }

    pub fn validate(&self, dims: &AttentionDims) -> Result<()> {
        dims.validate()?;
        let (d, e, h) = (dims.d_model, dims.d_embed, dims.heads);
        let expect: [(&str, &Tensor<T>, Vec<usize>); 8] = [
            ("w_q", &self.w_q, vec![d, e]),
            ("w_k", &self.w_k, vec![d, e]),
            ("w_v", &self.w_v, vec![d, e]),
            ("w_proj", &self.w_proj, vec![e, d]),
            ("gamma_q", &self.gamma_q, vec![h]),
            ("gamma_kv", &self.gamma_kv, vec![h]),
            ("p_q", &self.p_q, vec![h]),
            ("p_kv", &self.p_kv, vec![h]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("{name} contains non-finite values")));
            }
        }
        if !(self.eps >= 0.0) {
            return Err(Error::usage(format!("eps must be >= 0, got {}", self.eps)));
        }
        Ok(())
    }

    /// Places the weights on a tape, as trainable leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<AttentionVars> {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let (p_q, p_kv) = if self.kind.has_exponent() {
            (Some(leaf(&self.p_q)?), Some(leaf(&self.p_kv)?))
        } else {
            (None, None)
        };
        Ok(AttentionVars {
            w_q: leaf(&self.w_q)?,
            w_k: leaf(&self.w_k)?,
            w_v: leaf(&self.w_v)?,
            w_proj: leaf(&self.w_proj)?,
            gamma_q: leaf(&self.gamma_q)?,
            gamma_kv: leaf(&self.gamma_kv)?,
            p_q,
            p_kv,
        })
    }
}

/// Attention weights placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_proj: Var,
    pub gamma_q: Var,
    pub gamma_kv: Var,
    pub p_q: Option<Var>,
    pub p_kv: Option<Var>,
}

/// Static settings of an attention evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub kind: NormKind,
    pub eps: f64,
}

/// Normalized intermediates of one head, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct HeadTrace {
    /// `Q̂`, `[B, Nq, h]`.
    pub q_hat: Var,
    /// `M̂`, `[B, h, h]`.
    pub m_hat: Var,
}

fn head_slice<T: Element>(tape: &mut Tape<T>, w: Var, heads: usize, head: usize, h: usize) -> Result<Var> {
    if heads == 1 {
        Ok(w)
    } else {
        tape.slice(w, 1, head * h, h)
    }
}

fn per_head<T: Element>(tape: &mut Tape<T>, v: Var, heads: usize, head: usize) -> Result<Var> {
    if heads == 1 {
        Ok(v)
    } else {
        tape.slice(v, 0, head, 1)
    }
}

fn group_count(h: usize) -> usize {
    if h % 2 == 0 { 2 } else { 1 }
}

/// Normalization step of the ablation grid. `x` is `[B, N, h]` for
/// [`Side::Query`] or `[B, h, h]` for [`Side::KeyValue`]; `gamma` and `p` are
/// single values.
pub fn xnorm_variant<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    side: Side,
    kind: NormKind,
    gamma: Var,
    p: Option<Var>,
    eps: f64,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("xnorm_variant expects a 3-D tensor, got {shape:?}")));
    }
    // Axis along which XNorm acts and the remaining non-batch axis.
    let (axis, other) = match side {
        Side::Query => (2, 1),
        Side::KeyValue => (1, 2),
    };
    match kind {
        NormKind::XNorm => tape.l2_normalize(x, axis, gamma, eps),
        NormKind::SingleL2QOnly if side == Side::Query => tape.l2_normalize(x, axis, gamma, eps),
        NormKind::SingleL2KvOnly if side == Side::KeyValue => tape.l2_normalize(x, axis, gamma, eps),
        NormKind::SingleL2QOnly | NormKind::SingleL2KvOnly => Ok(x),
        NormKind::LayerNorm => tape.standardize(x, &[axis], gamma, eps),
        NormKind::InstanceNorm => tape.standardize(x, &[other], gamma, eps),
        NormKind::GroupNorm => {
            let g = group_count(shape[axis]);
            let mut split = shape.clone();
            split[axis] = g;
            split.insert(axis + 1, shape[axis] / g);
            let y = tape.reshape(x, &split)?;
            let other = if other > axis { other + 1 } else { other };
            let y = tape.standardize(y, &[axis + 1, other], gamma, eps)?;
            tape.reshape(y, &shape)
        }
        NormKind::LearnableP => {
            let p = p.ok_or_else(|| Error::usage("learnable_p needs an exponent variable"))?;
            tape.p_normalize(x, axis, gamma, p, eps)
        }
    }
}

/// Linear UFO attention on a tape. Queries come from `q_in` (`[B, Nq, d]`),
/// keys and values from `kv_in` (`[B, Nk, d]`); pass the same variable for
/// self-attention. Returns `[B, Nq, d]`.
pub fn ufo_attention_on<T: Element>(
    tape: &mut Tape<T>,
    q_in: Var,
    kv_in: Var,
    vars: &AttentionVars,
    spec: &AttentionSpec,
    mut trace: Option<&mut Vec<HeadTrace>>,
) -> Result<Var> {
    let e = tape.shape(vars.w_q)[1];
    let heads = spec.heads;
    if heads == 0 || e % heads != 0 {
        return Err(Error::dim(format!("d_embed {e} is not divisible by {heads} heads")));
    }
    let h = e / heads;
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let wq = head_slice(tape, vars.w_q, heads, hd, h)?;
        let wk = head_slice(tape, vars.w_k, heads, hd, h)?;
        let wv = head_slice(tape, vars.w_v, heads, hd, h)?;
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(kv_in, wk)?;
        let v = tape.matmul(kv_in, wv)?;
        // Keys and values multiply first: [B, h, h].
        let m = tape.matmul_t(k, v, true, false)?;
        let gq = per_head(tape, vars.gamma_q, heads, hd)?;
        let gkv = per_head(tape, vars.gamma_kv, heads, hd)?;
        let (pq, pkv) = match (vars.p_q, vars.p_kv) {
            (Some(a), Some(b)) => (Some(per_head(tape, a, heads, hd)?), Some(per_head(tape, b, heads, hd)?)),
            _ => (None, None),
        };
        let q_hat = xnorm_variant(tape, q, Side::Query, spec.kind, gq, pq, spec.eps)?;
        let m_hat = xnorm_variant(tape, m, Side::KeyValue, spec.kind, gkv, pkv, spec.eps)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(HeadTrace { q_hat, m_hat });
        }
        outs.push(tape.matmul(q_hat, m_hat)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat(&outs, 2)? };
    tape.matmul(merged, vars.w_proj)
}

/// Quadratic softmax attention on a tape, same conventions as
/// [`ufo_attention_on`].
pub fn softmax_attention_on<T: Element>(
    tape: &mut Tape<T>,
    q_in: Var,
    kv_in: Var,
    vars: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let e = tape.shape(vars.w_q)[1];
    if heads == 0 || e % heads != 0 {
        return Err(Error::dim(format!("d_embed {e} is not divisible by {heads} heads")));
    }
    let h = e / heads;
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let wq = head_slice(tape, vars.w_q, heads, hd, h)?;
        let wk = head_slice(tape, vars.w_k, heads, hd, h)?;
        let wv = head_slice(tape, vars.w_v, heads, hd, h)?;
        let q = tape.matmul(q_in, wq)?;
        let q = tape.scale(q, 1.0 / (h as f64).sqrt())?;
        let k = tape.matmul(kv_in, wk)?;
        let v = tape.matmul(kv_in, wv)?;
        let scores = tape.matmul_t(q, k, false, true)?;
        let attn = tape.softmax(scores)?;
        outs.push(tape.matmul(attn, v)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat(&outs, 2)? };
    tape.matmul(merged, vars.w_proj)
}

fn check_input<T: Element>(x: &Tensor<T>, dims: &AttentionDims) -> Result<()> {
    if x.shape() != [dims.tokens, dims.d_model] {
        return Err(Error::dim(format!(
            "input has shape {:?}, expected [{}, {}]",
            x.shape(),
            dims.tokens,
            dims.d_model
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("attention input contains non-finite values".into()));
    }
    Ok(())
}

fn eval_tensor<T: Element>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    dims: &AttentionDims,
    f: impl FnOnce(&mut Tape<T>, Var, &AttentionVars) -> Result<Var>,
) -> Result<Tensor<T>> {
    check_input(x, dims)?;
    params.validate(dims)?;
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.reshape(&[1, dims.tokens, dims.d_model])?)?;
    let vars = params.bind(&mut tape, false)?;
    let y = f(&mut tape, xv, &vars)?;
    tape.value(y).reshape(&[dims.tokens, dims.d_model])
}

/// Linear UFO attention on `x: [N, d_model]`, using `params.kind` and
/// `params.eps`.
pub fn ufo_attention<T: Element>(x: &Tensor<T>, params: &AttentionParams<T>, dims: &AttentionDims) -> Result<Tensor<T>> {
    let spec = AttentionSpec { heads: dims.heads, kind: params.kind, eps: params.eps };
    eval_tensor(x, params, dims, |tape, xv, vars| ufo_attention_on(tape, xv, xv, vars, &spec, None))
}

/// Output of [`ufo_attention_traced`].
#[derive(Clone, Debug)]
pub struct AttentionTrace<T: Element> {
    pub output: Tensor<T>,
    /// Per head, `Q̂` as `[N, h]`.
    pub q_hat: Vec<Tensor<T>>,
    /// Per head, `M̂` as `[h, h]`.
    pub m_hat: Vec<Tensor<T>>,
}

/// [`ufo_attention`] that also returns the normalized intermediates.
pub fn ufo_attention_traced<T: Element>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    dims: &AttentionDims,
) -> Result<AttentionTrace<T>> {
    check_input(x, dims)?;
    params.validate(dims)?;
    let spec = AttentionSpec { heads: dims.heads, kind: params.kind, eps: params.eps };
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.reshape(&[1, dims.tokens, dims.d_model])?)?;
    let vars = params.bind(&mut tape, false)?;
    let mut heads = Vec::new();
    let y = ufo_attention_on(&mut tape, xv, xv, &vars, &spec, Some(&mut heads))?;
    let h = dims.head_dim();
    let mut q_hat = Vec::new();
    let mut m_hat = Vec::new();
    for t in heads {
        q_hat.push(tape.value(t.q_hat).reshape(&[dims.tokens, h])?);
        m_hat.push(tape.value(t.m_hat).reshape(&[h, h])?);
    }
    Ok(AttentionTrace {
        output: tape.value(y).reshape(&[dims.tokens, dims.d_model])?,
        q_hat,
        m_hat,
    })
}

/// Softmax attention `σ(QKᵀ/√h) V` per head on `x: [N, d_model]`.
pub fn softmax_attention<T: Element>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    dims: &AttentionDims,
) -> Result<Tensor<T>> {
    eval_tensor(x, params, dims, |tape, xv, vars| softmax_attention_on(tape, xv, xv, vars, dims.heads))
}

/// Scales a vector to length `gamma`; all-zero slices stay zero.
fn unit(v: &[f64], gamma: f64, eps: f64) -> Vec<f64> {
    let ss: f64 = v.iter().map(|a| a * a).sum::<f64>() + eps;
    if ss == 0.0 {
        return vec![0.0; v.len()];
    }
    let norm = ss.sqrt();
    v.iter().map(|a| gamma * a / norm).collect()
}

/// Per-element XNorm attention in `f64`: builds every `q̂ᵢ · k̂ⱼ` entry with
/// its own dot product, then projects. Always uses L2 normalization.
pub fn ufo_attention_reference(
    x: &Tensor<f64>,
    params: &AttentionParams<f64>,
    dims: &AttentionDims,
) -> Result<Tensor<f64>> {
    check_input(x, dims)?;
    params.validate(dims)?;
    let (n, d, e, h) = (dims.tokens, dims.d_model, dims.d_embed, dims.head_dim());
    let xd = x.data();
    let project = |w: &Tensor<f64>, row: usize, col: usize| -> f64 {
        (0..d).map(|c| xd[row * d + c] * w.data()[c * e + col]).sum()
    };
    let mut out = vec![0.0; n * d];
    for head in 0..dims.heads {
        let base = head * h;
        let gq = params.gamma_q.data()[head];
        let gkv = params.gamma_kv.data()[head];
        // Column j of KᵀV: entry i is sum over tokens of K[t, i] V[t, j].
        let k_hat: Vec<Vec<f64>> = (0..h)
            .map(|j| {
                let col: Vec<f64> = (0..h)
                    .map(|i| {
                        (0..n)
                            .map(|t| project(&params.w_k, t, base + i) * project(&params.w_v, t, base + j))
                            .sum()
                    })
                    .collect();
                unit(&col, gkv, params.eps)
            })
            .collect();
        for t in 0..n {
            let q: Vec<f64> = (0..h).map(|i| project(&params.w_q, t, base + i)).collect();
            let q_hat = unit(&q, gq, params.eps);
            for j in 0..h {
                let a: f64 = q_hat.iter().zip(&k_hat[j]).map(|(qi, ki)| qi * ki).sum();
                for c in 0..d {
                    out[t * d + c] += a * params.w_proj.data()[(base + j) * d + c];
                }
            }
        }
    }
    Tensor::from_vec(&[n, d], out)
}

/// Solves `(VᵀV + λI) y = t` for `y` and returns `a = V y`, the ridge
/// least-squares solution of `min ‖aᵀV − t‖² + λ‖a‖²`. `v` is `[N, h]`.
pub fn ridge_solve(v: &[f64], n: usize, h: usize, t: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::usage(format!("ridge lambda must be > 0, got {lambda}")));
    }
    if v.len() != n * h || t.len() != h {
        return Err(Error::dim("ridge_solve operand sizes disagree"));
    }
    let mut g = vec![0.0; h * h];
    for r in 0..n {
        let row = &v[r * h..(r + 1) * h];
        for i in 0..h {
            for j in 0..h {
                g[i * h + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..h {
        g[i * h + i] += lambda;
    }
    // Cholesky, lower factor in place.
    for j in 0..h {
        let mut s = g[j * h + j];
        for k in 0..j {
            s -= g[j * h + k] * g[j * h + k];
        }
        if !(s > 0.0) {
            return Err(Error::Numeric("ridge system is not positive definite".into()));
        }
        let l = s.sqrt();
        g[j * h + j] = l;
        for i in j + 1..h {
            let mut s = g[i * h + j];
            for k in 0..j {
                s -= g[i * h + k] * g[j * h + k];
            }
            g[i * h + j] = s / l;
        }
    }
    let mut y = t.to_vec();
    for i in 0..h {
        for k in 0..i {
            y[i] -= g[i * h + k] * y[k];
        }
        y[i] /= g[i * h + i];
    }
    for i in (0..h).rev() {
        for k in i + 1..h {
            y[i] -= g[k * h + i] * y[k];
        }
        y[i] /= g[i * h + i];
    }
    Ok((0..n).map(|r| (0..h).map(|i| v[r * h + i] * y[i]).sum()).collect())
}

/// Recovers per-token attention weights of a query against `x` from the
/// linear attention output: per head the ridge solution of `aᵀV ≈ q̂M̂`,
/// averaged over heads, negatives clamped to zero and renormalized.
pub fn attention_map_approx<T: Element>(
    x: &Tensor<T>,
    cls_query: &Tensor<T>,
    params: &AttentionParams<T>,
    dims: &AttentionDims,
    lambda: f64,
) -> Result<Tensor<f64>> {
    check_input(x, dims)?;
    params.validate(dims)?;
    if cls_query.shape() != [1, dims.d_model] {
        return Err(Error::dim(format!(
            "query has shape {:?}, expected [1, {}]",
            cls_query.shape(),
            dims.d_model
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::usage(format!("ridge lambda must be > 0, got {lambda}")));
    }
    let p = |t: &Tensor<T>| Tensor::<f64>::from_vec(t.shape(), t.to_f64_vec());
    let params64 = AttentionParams {
        w_q: p(&params.w_q)?,
        w_k: p(&params.w_k)?,
        w_v: p(&params.w_v)?,
        w_proj: p(&params.w_proj)?,
        gamma_q: p(&params.gamma_q)?,
        gamma_kv: p(&params.gamma_kv)?,
        p_q: p(&params.p_q)?,
        p_kv: p(&params.p_kv)?,
        eps: params.eps,
        kind: NormKind::XNorm,
    };
    let (n, h) = (dims.tokens, dims.head_dim());
    let spec = AttentionSpec { heads: dims.heads, kind: NormKind::XNorm, eps: params.eps };
    let mut tape = Tape::<f64>::no_grad();
    let xv = tape.constant(p(x)?.reshape(&[1, n, dims.d_model])?)?;
    let qv = tape.constant(p(cls_query)?.reshape(&[1, 1, dims.d_model])?)?;
    let vars = params64.bind(&mut tape, false)?;
    let mut heads = Vec::new();
    ufo_attention_on(&mut tape, qv, xv, &vars, &spec, Some(&mut heads))?;
    let mut weights = vec![0.0; n];
    for (hd, trace) in heads.iter().enumerate() {
        let wv = head_slice(&mut tape, vars.w_v, dims.heads, hd, h)?;
        let v = tape.matmul(xv, wv)?;
        let target = tape.matmul(trace.q_hat, trace.m_hat)?;
        let a = ridge_solve(tape.value(v).data(), n, h, tape.value(target).data(), lambda)?;
        for (w, ai) in weights.iter_mut().zip(a) {
            *w += ai / dims.heads as f64;
        }
    }
    Ok(Tensor::from_parts(vec![n], clamp_and_normalize(weights)))
}

/// Clamps negatives to zero and rescales to sum 1; an all-zero vector becomes
/// uniform.
pub fn clamp_and_normalize(mut w: Vec<f64>) -> Vec<f64> {
    w.iter_mut().for_each(|v| *v = v.max(0.0));
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    } else if !w.is_empty() {
        let u = 1.0 / w.len() as f64;
        w.iter_mut().for_each(|v| *v = u);
    }
    w
}

/// Closed-form flops of [`ufo_attention`] at 2 flops per multiply-add:
/// projections `2BN·e·4d` plus `KᵀV` and `Q̂M̂` at `2BN·e·h` each.
pub fn ufo_flops(dims: &AttentionDims, batch: usize) -> u64 {
    let (n, d, e, h) = (dims.tokens as u64, dims.d_model as u64, dims.d_embed as u64, dims.head_dim() as u64);
    2 * batch as u64 * n * e * (4 * d + 2 * h)
}

/// Closed-form flops of [`softmax_attention`]: projections plus `QKᵀ` and
/// `PV` at `2BN²h` each per head.
pub fn softmax_flops(dims: &AttentionDims, batch: usize) -> u64 {
    let (n, d, e) = (dims.tokens as u64, dims.d_model as u64, dims.d_embed as u64);
    let b = batch as u64;
    2 * b * n * e * 4 * d + 4 * b * n * n * e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counters::measure;

    fn random(dims: &AttentionDims, seed: u64) -> (Tensor<f64>, AttentionParams<f64>) {
        let mut rng = SplitMix64::new(seed);
        let mut params = AttentionParams::init(dims, 0.5, &mut rng).unwrap();
        params.eps = 0.0;
        let x: Vec<f64> = (0..dims.tokens * dims.d_model).map(|_| rng.normal()).collect();
        (Tensor::from_vec(&[dims.tokens, dims.d_model], x).unwrap(), params)
    }

    #[test]
    fn basis_vector_case() {
        let dims = AttentionDims::new(1, 2, 2, 1).unwrap();
        let eye = Tensor::<f64>::eye(2);
        let params = AttentionParams {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_proj: eye,
            gamma_q: Tensor::ones(&[1]),
            gamma_kv: Tensor::ones(&[1]),
            p_q: Tensor::full(&[1], 2.0),
            p_kv: Tensor::full(&[1], 2.0),
            eps: 0.0,
            kind: NormKind::XNorm,
        };
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let tr = ufo_attention_traced(&x, &params, &dims).unwrap();
        assert_eq!(tr.m_hat[0].to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(tr.q_hat[0].to_vec(), vec![1.0, 0.0]);
        assert_eq!(tr.output.to_vec(), vec![1.0, 0.0]);
        assert_eq!(ufo_attention_reference(&x, &params, &dims).unwrap().to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn fused_matches_reference() {
        let dims = AttentionDims::new(16, 8, 8, 2).unwrap();
        let (x, params) = random(&dims, 3);
        let fused = ufo_attention(&x, &params, &dims).unwrap();
        let reference = ufo_attention_reference(&x, &params, &dims).unwrap();
        assert!(fused.max_rel_diff(&reference) < 1e-10);
    }

    #[test]
    fn query_scale_leaves_output_unchanged() {
        let dims = AttentionDims::new(16, 8, 8, 2).unwrap();
        let (x, params) = random(&dims, 4);
        let base = ufo_attention(&x, &params, &dims).unwrap();
        let mut scaled = params.clone();
        scaled.w_q = scaled.w_q.map(|v| v * 7.3);
        let y = ufo_attention(&x, &scaled, &dims).unwrap();
        assert!(y.max_rel_diff(&base) < 1e-10);
    }

    #[test]
    fn learnable_p_at_two_matches_xnorm() {
        let dims = AttentionDims::new(9, 6, 6, 3).unwrap();
        let (x, params) = random(&dims, 5);
        let base = ufo_attention(&x, &params, &dims).unwrap();
        let mut p = params.clone();
        p.kind = NormKind::LearnableP;
        let y = ufo_attention(&x, &p, &dims).unwrap();
        assert!(y.max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn single_side_passes_other_side_through() {
        let dims = AttentionDims::new(5, 4, 4, 1).unwrap();
        let (x, mut params) = random(&dims, 6);
        params.kind = NormKind::SingleL2QOnly;
        let tr = ufo_attention_traced(&x, &params, &dims).unwrap();
        let xw = |w: &Tensor<f64>| {
            let mut out = vec![0.0; 5 * 4];
            for t in 0..5 {
                for j in 0..4 {
                    out[t * 4 + j] = (0..4).map(|c| x.data()[t * 4 + c] * w.data()[c * 4 + j]).sum();
                }
            }
            out
        };
        let (k, v) = (xw(&params.w_k), xw(&params.w_v));
        for i in 0..4 {
            for j in 0..4 {
                let m: f64 = (0..5).map(|t| k[t * 4 + i] * v[t * 4 + j]).sum();
                assert!((tr.m_hat[0].data()[i * 4 + j] - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in NormKind::ALL {
            assert_eq!(k.name().parse::<NormKind>().unwrap(), k);
        }
        assert!(matches!("softmax".parse::<NormKind>(), Err(Error::Usage(_))));
    }

    #[test]
    fn every_kind_runs() {
        let dims = AttentionDims::new(7, 8, 8, 2).unwrap();
        let (x, mut params) = random(&dims, 7);
        params.eps = 1e-6;
        for k in NormKind::ALL {
            params.kind = k;
            let y = ufo_attention(&x, &params, &dims).unwrap();
            assert!(y.is_finite(), "{k}");
        }
    }

    #[test]
    fn softmax_single_token_returns_value_row() {
        let dims = AttentionDims::new(1, 3, 3, 1).unwrap();
        let (x, mut params) = random(&dims, 8);
        params.w_proj = Tensor::eye(3);
        let y = softmax_attention(&x, &params, &dims).unwrap();
        for j in 0..3 {
            let v: f64 = (0..3).map(|c| x.data()[c] * params.w_v.data()[c * 3 + j]).sum();
            assert!((y.data()[j] - v).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_zero_queries_average_values() {
        let dims = AttentionDims::new(4, 2, 2, 1).unwrap();
        let (x, mut params) = random(&dims, 9);
        params.w_q = Tensor::zeros(&[2, 2]);
        params.w_k = Tensor::zeros(&[2, 2]);
        params.w_v = Tensor::eye(2);
        params.w_proj = Tensor::eye(2);
        let y = softmax_attention(&x, &params, &dims).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..4).map(|t| x.data()[t * 2 + c]).sum::<f64>() / 4.0;
            for t in 0..4 {
                assert!((y.data()[t * 2 + c] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn counted_flops_match_closed_forms() {
        let dims = AttentionDims::new(32, 16, 16, 4).unwrap();
        let (x, params) = random(&dims, 10);
        let (_, c) = measure(|| ufo_attention(&x, &params, &dims).unwrap());
        assert_eq!(c.flops, ufo_flops(&dims, 1));
        let (_, c) = measure(|| softmax_attention(&x, &params, &dims).unwrap());
        assert_eq!(c.flops, softmax_flops(&dims, 1));
    }

    #[test]
    fn single_token_map_is_one() {
        let dims = AttentionDims::new(1, 4, 4, 2).unwrap();
        let (x, params) = random(&dims, 11);
        let q = x.clone();
        let w = attention_map_approx(&x, &q, &params, &dims, 1e-4).unwrap();
        assert_eq!(w.to_vec(), vec![1.0]);
    }

    #[test]
    fn ridge_requires_positive_lambda() {
        assert!(matches!(ridge_solve(&[1.0], 1, 1, &[1.0], 0.0), Err(Error::Usage(_))));
    }

    #[test]
    fn clamp_handles_all_negative() {
        assert_eq!(clamp_and_normalize(vec![-1.0, -2.0]), vec![0.5, 0.5]);
        assert_eq!(clamp_and_normalize(vec![3.0, -2.0, 1.0]), vec![0.75, 0.0, 0.25]);
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let dims = AttentionDims::new(2, 2, 2, 1).unwrap();
        let (_, params) = random(&dims, 12);
        let x = Tensor::from_vec(&[2, 2], vec![1.0, f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(ufo_attention(&x, &params, &dims), Err(Error::Numeric(_))));
    }

    #[test]
    fn dims_reject_indivisible_heads() {
        assert!(matches!(AttentionDims::new(4, 8, 10, 4), Err(Error::Dimension(_))));
    }
}
