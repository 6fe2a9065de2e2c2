use super::{count_macs, GradAcc, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, GemmShape};
use crate::tensor::{Element, Tensor};

impl<T: Element> Tape<T> {
    /// `a · b`. `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across
    /// the leading dims of `a`) or `[.., k, n]` with the same leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!("matmul needs rank >= 2, got {sa:?} · {sb:?}")));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {sa:?}{} · {sb:?}{}",
                if trans_a { "ᵀ" } else { "" },
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let b_batched = sb.len() > 2;
        if b_batched && &sb[..sb.len() - 2] != lead {
            return Err(Error::dim(format!("matmul batch extents differ: {sa:?} · {sb:?}")));
        }
        // A shared right operand lets the batch fold into the row count.
        let shape = if !b_batched && !trans_a {
            GemmShape { batch: 1, m: batch * m, k, n, trans_a, trans_b, b_batched: false }
        } else {
            GemmShape { batch, m, k, n, trans_a, trans_b, b_batched }
        };
        let mut out = vec![T::zero(); batch * m * n];
        kernels::gemm(self.value(a).data(), self.value(b).data(), &mut out, &shape);
        count_macs(shape.macs());
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        self.push(Tensor::from_parts(out_shape, out), Op::MatMul { a, b, shape }, "matmul")
    }

    /// Grouped 2-D cross-correlation, `x: [B, C, H, W]`, `w: [O, C/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim(format!("conv2d needs 4-D input and weight, got {sx:?}, {sw:?}")));
        }
        let (in_c, out_c) = (sx[1], sw[0]);
        if groups == 0 || in_c % groups != 0 || out_c % groups != 0 {
            return Err(Error::dim(format!(
                "conv2d groups {groups} must divide input channels {in_c} and output channels {out_c}"
            )));
        }
        if sw[1] != in_c / groups {
            return Err(Error::dim(format!(
                "conv2d weight {sw:?} expects {} input channels per group, input has {}",
                sw[1],
                in_c / groups
            )));
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::dim(format!("conv2d kernel {sw:?} does not fit input {sx:?}")));
        }
        let geom = ConvGeometry {
            batch: sx[0],
            in_c,
            in_h: sx[2],
            in_w: sx[3],
            out_c,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            groups,
        };
        let out_shape = vec![geom.batch, out_c, geom.out_h(), geom.out_w()];
        let mut out = vec![T::zero(); out_shape.iter().product()];
        kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &mut out, &geom);
        count_macs(geom.macs());
        self.push(Tensor::from_parts(out_shape, out), Op::Conv2d { x, w, geom }, "conv2d")
    }
}

fn gemm_into<T: Element>(a: &[T], b: &[T], s: GemmShape) -> Vec<T> {
    let mut out = vec![T::zero(); s.batch * s.m * s.n];
    kernels::gemm(a, b, &mut out, &s);
    count_macs(s.macs());
    out
}

pub(super) fn matmul_backward<T: Element>(
    a: Var,
    b: Var,
    s: &GemmShape,
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    let GemmShape { batch, m, k, n, trans_a: ta, trans_b: tb, b_batched } = *s;
    if acc.wants(a) {
        let (av, bv) = (acc.value(a), acc.value(b));
        let ga = if !ta {
            // dA[m,k] = G[m,n] · op(B)ᵀ
            gemm_into(g.data(), bv.data(), GemmShape { batch, m, k: n, n: k, trans_a: false, trans_b: !tb, b_batched })
        } else {
            // dA[k,m] = op(B)[k,n] · Gᵀ, per batch entry
            let mut out = vec![T::zero(); batch * k * m];
            let b_stride = if b_batched { k * n } else { 0 };
            for gi in 0..batch {
                let part = gemm_into(
                    &bv.data()[gi * b_stride..gi * b_stride + k * n],
                    &g.data()[gi * m * n..(gi + 1) * m * n],
                    GemmShape { batch: 1, m: k, k: n, n: m, trans_a: tb, trans_b: true, b_batched: true },
                );
                out[gi * k * m..(gi + 1) * k * m].copy_from_slice(&part);
            }
            out
        };
        debug_assert_eq!(ga.len(), av.numel());
        let shape = av.shape().to_vec();
        acc.add(a, Tensor::from_parts(shape, ga));
    }
    if acc.wants(b) {
        let (av, bv) = (acc.value(a), acc.value(b));
        // Per batch entry: dB = op(A)ᵀ · G (stored k×n) or Gᵀ · op(A) (stored n×k).
        let one = |gi: usize| -> Vec<T> {
            let ag = &av.data()[gi * m * k..(gi + 1) * m * k];
            let gg = &g.data()[gi * m * n..(gi + 1) * m * n];
            if !tb {
                gemm_into(ag, gg, GemmShape { batch: 1, m: k, k: m, n, trans_a: !ta, trans_b: false, b_batched: true })
            } else {
                gemm_into(gg, ag, GemmShape { batch: 1, m: n, k: m, n: k, trans_a: true, trans_b: ta, b_batched: true })
            }
        };
        let gb = if b_batched {
            let mut out = Vec::with_capacity(bv.numel());
            for gi in 0..batch {
                out.extend(one(gi));
            }
            out
        } else {
            let mut out = one(0);
            for gi in 1..batch {
                for (o, x) in out.iter_mut().zip(one(gi)) {
                    *o += x;
                }
            }
            out
        };
        let shape = bv.shape().to_vec();
        acc.add(b, Tensor::from_parts(shape, gb));
    }
    Ok(())
}

pub(super) fn conv2d_backward<T: Element>(
    x: Var,
    w: Var,
    geom: &ConvGeometry,
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    if acc.wants(x) {
        let (xv, wv) = (acc.value(x), acc.value(w));
        let mut gx = vec![T::zero(); xv.numel()];
        kernels::conv2d_backward_input(g.data(), wv.data(), &mut gx, geom);
        count_macs(geom.macs());
        let shape = xv.shape().to_vec();
        acc.add(x, Tensor::from_parts(shape, gx));
    }
    if acc.wants(w) {
        let (xv, wv) = (acc.value(x), acc.value(w));
        let mut gw = vec![T::zero(); wv.numel()];
        kernels::conv2d_backward_weight(g.data(), xv.data(), &mut gw, geom);
        count_macs(geom.macs());
        let shape = wv.shape().to_vec();
        acc.add(w, Tensor::from_parts(shape, gw));
    }
    Ok(())
}
