use super::{GradAcc, Op, Tape, Var};
use crate::counters;
use crate::error::{Error, Result};
use crate::faults;
use crate::tensor::{Element, Tensor};

/// A tensor viewed as `[outer, len, inner]` around one axis. Slice `s = o * inner + i`
/// holds elements `o * len * inner + k * inner + i` for `k in 0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl Layout {
    pub fn around(shape: &[usize], axis: usize) -> Result<Layout> {
        if axis >= shape.len() {
            return Err(Error::dim(format!("axis {axis} out of range for shape {shape:?}")));
        }
        Ok(Layout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    pub fn slices(&self) -> usize {
        self.outer * self.inner
    }

    #[inline]
    fn base(&self, s: usize) -> usize {
        (s / self.inner) * self.len * self.inner + s % self.inner
    }

    /// Flat indices of slice `s`.
    #[inline]
    pub(crate) fn iter(&self, s: usize) -> impl Iterator<Item = usize> {
        let (base, inner) = (self.base(s), self.inner);
        (0..self.len).map(move |k| base + k * inner)
    }
}

/// Element-to-group assignment for reductions over several axes.
#[derive(Debug, Clone)]
pub(crate) struct Groups {
    group_of: Vec<u32>,
    count: usize,
    size: usize,
}

impl Groups {
    fn new(shape: &[usize], reduce: &[usize]) -> Result<Groups> {
        if reduce.is_empty() || reduce.iter().any(|&a| a >= shape.len()) {
            return Err(Error::dim(format!("invalid reduction axes {reduce:?} for {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let keep_strides: Vec<usize> = {
            let mut strides = vec![0; shape.len()];
            let mut s = 1;
            for i in (0..shape.len()).rev() {
                if !reduce.contains(&i) {
                    strides[i] = s;
                    s *= shape[i];
                }
            }
            strides
        };
        let count = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !reduce.contains(i))
            .map(|(_, d)| d)
            .product();
        let group_of = (0..numel)
            .map(|mut flat| {
                let mut gidx = 0;
                for (d, s) in shape.iter().zip(&keep_strides).rev() {
                    gidx += (flat % d) * s;
                    flat /= d;
                }
                gidx as u32
            })
            .collect();
        Ok(Groups {
            group_of,
            count,
            size: numel / count.max(1),
        })
    }
}

/// Gamma is either one shared scale or one per slice/group.
fn gamma_at<T: Element>(gamma: &Tensor<T>, s: usize) -> T {
    if gamma.numel() == 1 {
        gamma[0]
    } else {
        gamma[s]
    }
}

fn check_gamma(gamma: &[usize], slices: usize) -> Result<()> {
    let n: usize = gamma.iter().product();
    if n == 1 || n == slices {
        Ok(())
    } else {
        Err(Error::dim(format!(
            "gamma {gamma:?} must hold 1 or {slices} values"
        )))
    }
}

impl<T: Element> Tape<T> {
    /// L2 cross-normalization: every slice along `axis` is divided by
    /// `sqrt(sum of squares + eps)` and scaled by gamma. A slice whose
    /// denominator is exactly zero maps to zeros and is reported through the
    /// zero-slice counter.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, gamma: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::usage(format!("eps must be >= 0, got {eps}")));
        }
        let eps = if faults::xnorm_eps_broken() { eps + 1e-3 } else { eps };
        let layout = Layout::around(self.shape(x), axis)?;
        check_gamma(self.shape(gamma), layout.slices())?;
        let eps_t = T::from_f64(eps);
        let (xv, gv) = (self.value(x), self.value(gamma));
        let xd = xv.data();
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_norm = vec![T::zero(); layout.slices()];
        let mut zero = 0u64;
        for (s, inv) in inv_norm.iter_mut().enumerate() {
            let ss: T = layout.iter(s).map(|i| xd[i] * xd[i]).sum::<T>() + eps_t;
            if ss == T::zero() {
                zero += 1;
                continue;
            }
            *inv = T::one() / ss.sqrt();
            let scale = gamma_at(gv, s) * *inv;
            for i in layout.iter(s) {
                out[i] = xd[i] * scale;
            }
        }
        counters::add_zero_slices(zero);
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::L2Normalize { x, gamma, layout, inv_norm },
            "l2_normalize",
        )
    }

    /// Learnable p-norm normalization: `gamma * x / (sum |x|^p + eps)^(1/p)`.
    /// `p` and `gamma` are single-element tensors; `p` must exceed 1.
    pub fn p_normalize(&mut self, x: Var, axis: usize, gamma: Var, p: Var, eps: f64) -> Result<Var> {
        let layout = Layout::around(self.shape(x), axis)?;
        check_gamma(self.shape(gamma), 1)?;
        let pv = self.value(p);
        if pv.numel() != 1 {
            return Err(Error::dim("p must be a single value"));
        }
        let pe = pv[0];
        if !(pe > T::one()) {
            return Err(Error::Numeric(format!("p-norm exponent must exceed 1, got {pe}")));
        }
        let eps_t = T::from_f64(eps);
        let (xv, g) = (self.value(x), self.value(gamma)[0]);
        let xd = xv.data();
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..layout.slices() {
            let sp: T = layout.iter(s).map(|i| xd[i].abs().powf(pe)).sum::<T>() + eps_t;
            if sp == T::zero() {
                continue;
            }
            let scale = g / sp.powf(T::one() / pe);
            for i in layout.iter(s) {
                out[i] = xd[i] * scale;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::PNormalize { x, gamma, p, layout, eps: eps_t },
            "p_normalize",
        )
    }

    /// Zero-mean, unit-variance standardization over `reduce_axes`, scaled by
    /// a single gamma. Groups with zero variance and zero eps map to zeros.
    pub fn standardize(&mut self, x: Var, reduce_axes: &[usize], gamma: Var, eps: f64) -> Result<Var> {
        let groups = Groups::new(self.shape(x), reduce_axes)?;
        check_gamma(self.shape(gamma), 1)?;
        let (xv, g) = (self.value(x), self.value(gamma)[0]);
        let xd = xv.data();
        let n = T::from_f64(groups.size as f64);
        let mut mean = vec![T::zero(); groups.count];
        for (i, &gi) in groups.group_of.iter().enumerate() {
            mean[gi as usize] += xd[i];
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); groups.count];
        for (i, &gi) in groups.group_of.iter().enumerate() {
            let d = xd[i] - mean[gi as usize];
            var[gi as usize] += d * d;
        }
        let eps_t = T::from_f64(eps);
        let rstd: Vec<T> = var
            .iter()
            .map(|&v| {
                let d = v / n + eps_t;
                if d == T::zero() {
                    T::zero()
                } else {
                    T::one() / d.sqrt()
                }
            })
            .collect();
        let out = xd
            .iter()
            .zip(&groups.group_of)
            .map(|(&v, &gi)| g * (v - mean[gi as usize]) * rstd[gi as usize])
            .collect();
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Standardize { x, gamma, groups, mean, rstd },
            "standardize",
        )
    }

    /// Layer normalization over the last axis with per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::dim("layer_norm on a scalar"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "layer_norm affine {:?}/{:?} does not match channels {c}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / c.max(1);
        let (n, eps_t) = (T::from_f64(c as f64), T::from_f64(eps));
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xd.len()];
        for (row, dst) in xd.chunks(c).zip(out.chunks_mut(c)) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n + eps_t;
            let r = if var == T::zero() { T::zero() } else { T::one() / var.sqrt() };
            for (((d, &v), &g), &b) in dst.iter_mut().zip(row).zip(gd).zip(bd) {
                *d = (v - mu) * r * g + b;
            }
            mean.push(mu);
            rstd.push(r);
        }
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, mean, rstd },
            "layer_norm",
        )
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = *xv.shape().last().ok_or_else(|| Error::dim("softmax on a scalar"))?;
        let mut out = xv.to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, cols }, "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = *xv.shape().last().ok_or_else(|| Error::dim("log_softmax on a scalar"))?;
        let mut out = xv.to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax { x, cols }, "log_softmax")
    }
}

fn gamma_grad<T: Element>(gamma: &Tensor<T>, per_slice: Vec<T>) -> Tensor<T> {
    if gamma.numel() == 1 {
        let total = per_slice.into_iter().sum();
        Tensor::from_parts(gamma.shape().to_vec(), vec![total])
    } else {
        Tensor::from_parts(gamma.shape().to_vec(), per_slice)
    }
}

pub(super) fn l2_backward<T: Element>(
    x: Var,
    gamma: Var,
    layout: &Layout,
    inv_norm: &[T],
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    let (xv, gv) = (acc.value(x), acc.value(gamma));
    let (xd, gd) = (xv.data(), g.data());
    let mut gx = vec![T::zero(); xd.len()];
    let mut ggamma = vec![T::zero(); layout.slices()];
    for (s, &inv) in inv_norm.iter().enumerate() {
        if inv == T::zero() {
            continue;
        }
        // y = gamma x / n  =>  dx = gamma/n (g - x (g.x) / n^2), dgamma = (g.x)/n
        let gx_dot: T = layout.iter(s).map(|i| gd[i] * xd[i]).sum();
        ggamma[s] = gx_dot * inv;
        let gam = gamma_at(gv, s);
        let k = gx_dot * inv * inv;
        for i in layout.iter(s) {
            gx[i] = gam * inv * (gd[i] - xd[i] * k);
        }
    }
    let gamma_g = gamma_grad(gv, ggamma);
    let shape = xv.shape().to_vec();
    acc.add(x, Tensor::from_parts(shape, gx));
    acc.add(gamma, gamma_g);
    Ok(())
}

pub(super) fn pnorm_backward<T: Element>(
    x: Var,
    gamma: Var,
    p: Var,
    layout: &Layout,
    eps: T,
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    let (xv, gam, pe) = (acc.value(x), acc.value(gamma)[0], acc.value(p)[0]);
    let (xd, gd) = (xv.data(), g.data());
    let mut gx = vec![T::zero(); xd.len()];
    let (mut ggamma, mut gp) = (T::zero(), T::zero());
    for s in 0..layout.slices() {
        let sp: T = layout.iter(s).map(|i| xd[i].abs().powf(pe)).sum::<T>() + eps;
        if sp == T::zero() {
            continue;
        }
        let n = sp.powf(T::one() / pe);
        let dot: T = layout.iter(s).map(|i| gd[i] * xd[i]).sum();
        ggamma += dot / n;
        // dn/dx_k = n^(1-p) |x_k|^(p-1) sign(x_k)
        let c = gam * dot / (n * n) * n.powf(T::one() - pe);
        for i in layout.iter(s) {
            let a = xd[i].abs();
            let dn = if a == T::zero() { T::zero() } else { a.powf(pe - T::one()) * xd[i].signum() };
            gx[i] = gam * gd[i] / n - c * dn;
        }
        // dn/dp = n (-ln S / p^2 + sum |x|^p ln|x| / (p S))
        let xlogx: T = layout
            .iter(s)
            .map(|i| {
                let a = xd[i].abs();
                if a == T::zero() {
                    T::zero()
                } else {
                    a.powf(pe) * a.ln()
                }
            })
            .sum();
        let dn_dp = n * (-sp.ln() / (pe * pe) + xlogx / (pe * sp));
        gp += -gam * dot / (n * n) * dn_dp;
    }
    let shape = xv.shape().to_vec();
    let (gshape, pshape) = (acc.value(gamma).shape().to_vec(), acc.value(p).shape().to_vec());
    acc.add(x, Tensor::from_parts(shape, gx));
    acc.add(gamma, Tensor::from_parts(gshape, vec![ggamma]));
    acc.add(p, Tensor::from_parts(pshape, vec![gp]));
    Ok(())
}

pub(super) fn standardize_backward<T: Element>(
    x: Var,
    gamma: Var,
    groups: &Groups,
    mean: &[T],
    rstd: &[T],
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    let (xv, gam) = (acc.value(x), acc.value(gamma)[0]);
    let (xd, gd) = (xv.data(), g.data());
    let n = T::from_f64(groups.size as f64);
    let xhat = |i: usize| {
        let gi = groups.group_of[i] as usize;
        (xd[i] - mean[gi]) * rstd[gi]
    };
    let mut sum_g = vec![T::zero(); groups.count];
    let mut sum_gx = vec![T::zero(); groups.count];
    for (i, &gi) in groups.group_of.iter().enumerate() {
        sum_g[gi as usize] += gd[i];
        sum_gx[gi as usize] += gd[i] * xhat(i);
    }
    let ggamma: T = sum_gx.iter().copied().sum();
    let gx = groups
        .group_of
        .iter()
        .enumerate()
        .map(|(i, &gi)| {
            let gi = gi as usize;
            gam * rstd[gi] * (gd[i] - sum_g[gi] / n - xhat(i) * sum_gx[gi] / n)
        })
        .collect();
    let shape = xv.shape().to_vec();
    let gshape = acc.value(gamma).shape().to_vec();
    acc.add(x, Tensor::from_parts(shape, gx));
    acc.add(gamma, Tensor::from_parts(gshape, vec![ggamma]));
    Ok(())
}

pub(super) fn layer_norm_backward<T: Element>(
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[T],
    rstd: &[T],
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    let (xv, gv) = (acc.value(x), acc.value(gamma));
    let c = gv.numel();
    let n = T::from_f64(c as f64);
    let (xd, gmd, gd) = (xv.data(), gv.data(), g.data());
    let mut gx = vec![T::zero(); xd.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for (r, ((row, grow), dst)) in xd.chunks(c).zip(gd.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
        let (mu, rs) = (mean[r], rstd[r]);
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..c {
            let xh = (row[j] - mu) * rs;
            let gy = grow[j] * gmd[j];
            ggamma[j] += grow[j] * xh;
            gbeta[j] += grow[j];
            s1 += gy;
            s2 += gy * xh;
        }
        for j in 0..c {
            let xh = (row[j] - mu) * rs;
            dst[j] = rs * (grow[j] * gmd[j] - s1 / n - xh * s2 / n);
        }
    }
    let shape = xv.shape().to_vec();
    acc.add(x, Tensor::from_parts(shape, gx));
    acc.add(gamma, Tensor::from_parts(vec![c], ggamma));
    acc.add(beta, Tensor::from_parts(vec![c], gbeta));
    Ok(())
}

pub(super) fn softmax_backward<T: Element>(
    x: Var,
    y: &Tensor<T>,
    cols: usize,
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    let mut gx = vec![T::zero(); y.numel()];
    for ((yr, gr), dst) in y.data().chunks(cols).zip(g.data().chunks(cols)).zip(gx.chunks_mut(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    acc.add(x, Tensor::from_parts(y.shape().to_vec(), gx));
    Ok(())
}

pub(super) fn log_softmax_backward<T: Element>(
    x: Var,
    y: &Tensor<T>,
    cols: usize,
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    let mut gx = vec![T::zero(); y.numel()];
    for ((yr, gr), dst) in y.data().chunks(cols).zip(g.data().chunks(cols)).zip(gx.chunks_mut(cols)) {
        let total: T = gr.iter().copied().sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *d = gv - yv.exp() * total;
        }
    }
    acc.add(x, Tensor::from_parts(y.shape().to_vec(), gx));
    Ok(())
}
