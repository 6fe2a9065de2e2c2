use super::{GradAcc, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, cubic_taps, CubicTaps};
use crate::tensor::{Element, Tensor};

/// Swaps the last two axes of a `[batch, rows, cols]` buffer.
pub(super) fn transpose_data<T: Element>(t: &Tensor<T>, batch: usize, rows: usize, cols: usize) -> Tensor<T> {
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor::from_parts(shape, out)
}

fn split3(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

impl<T: Element> Tape<T> {
    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.sum() / T::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean { x }, "mean")
    }

    /// Swaps the last two axes (materialized copy).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("transpose needs rank >= 2, got {shape:?}")));
        }
        let n = shape.len();
        let (rows, cols) = (shape[n - 2], shape[n - 1]);
        let batch = shape[..n - 2].iter().product();
        let out = transpose_data(self.value(x), batch, rows, cols);
        self.push(out, Op::Transpose { x, batch, rows, cols }, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape { x }, "reshape")
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::usage("concat of nothing"))?)
            .to_vec();
        let (outer, _, inner) = split3(&first, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::dim(format!("concat extents differ: {first:?} vs {s:?}")));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let parts = parts.iter().copied().zip(lens).collect();
        self.push(Tensor::from_parts(shape, out), Op::Concat { parts, outer, inner }, "concat")
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = split3(&shape, axis)?;
        if start + len > full {
            return Err(Error::dim(format!(
                "slice {start}..{} exceeds extent {full} of axis {axis}",
                start + len
            )));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push(
            Tensor::from_parts(new_shape, out),
            Op::Slice { x, outer, len: full, inner, start },
            "slice",
        )
    }

    /// Bicubic (Catmull-Rom) resampling of the last two axes to `h × w`.
    /// Equal size returns an exact copy.
    pub fn bicubic_resize2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("resize needs rank >= 2, got {shape:?}")));
        }
        let n = shape.len();
        let (ih, iw) = (shape[n - 2], shape[n - 1]);
        if h < 1 || w < 1 {
            return Err(Error::dim(format!("resize target {h}x{w} must be at least 1x1")));
        }
        if ih < 2 || iw < 2 {
            return Err(Error::dim(format!("resize source {ih}x{iw} must be at least 2x2")));
        }
        if (ih, iw) == (h, w) {
            return self.reshape(x, &shape);
        }
        let outer: usize = shape[..n - 2].iter().product();
        let (taps_h, taps_w) = (cubic_taps(ih, h), cubic_taps(iw, w));
        let src = self.value(x).data();
        let mut tmp = vec![T::zero(); outer * ih * w];
        kernels::resize_axis(src, &mut tmp, outer * ih, 1, &taps_w);
        let mut out = vec![T::zero(); outer * h * w];
        kernels::resize_axis(&tmp, &mut out, outer, w, &taps_h);
        let mut new_shape = shape;
        new_shape[n - 2] = h;
        new_shape[n - 1] = w;
        self.push(
            Tensor::from_parts(new_shape, out),
            Op::Resize { x, outer, taps_h, taps_w },
            "bicubic_resize2d",
        )
    }
}

pub(super) fn concat_backward<T: Element>(
    parts: &[(Var, usize)],
    outer: usize,
    inner: usize,
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    let total: usize = parts.iter().map(|p| p.1).sum();
    let gd = g.data();
    let mut offset = 0;
    for &(p, len) in parts {
        if acc.wants(p) {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + offset) * inner;
                out.extend_from_slice(&gd[base..base + len * inner]);
            }
            let shape = acc.value(p).shape().to_vec();
            acc.add(p, Tensor::from_parts(shape, out));
        }
        offset += len;
    }
    Ok(())
}

pub(super) fn slice_backward<T: Element>(
    x: Var,
    outer: usize,
    full: usize,
    inner: usize,
    start: usize,
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    let len = g.numel() / (outer * inner).max(1);
    let mut out = vec![T::zero(); outer * full * inner];
    for (o, chunk) in g.data().chunks(len * inner).enumerate() {
        let base = (o * full + start) * inner;
        out[base..base + len * inner].copy_from_slice(chunk);
    }
    let shape = acc.value(x).shape().to_vec();
    acc.add(x, Tensor::from_parts(shape, out));
    Ok(())
}

pub(super) fn resize_backward<T: Element>(
    x: Var,
    outer: usize,
    taps_h: &CubicTaps,
    taps_w: &CubicTaps,
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    let (ih, iw, w) = (taps_h.in_len, taps_w.in_len, taps_w.out_len);
    let mut tmp = vec![T::zero(); outer * ih * w];
    kernels::resize_axis_adjoint(g.data(), &mut tmp, outer, w, taps_h);
    let mut gx = vec![T::zero(); outer * ih * iw];
    kernels::resize_axis_adjoint(&tmp, &mut gx, outer * ih, 1, taps_w);
    let shape = acc.value(x).shape().to_vec();
    acc.add(x, Tensor::from_parts(shape, gx));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::from_vec(&[1, h, w], data).unwrap()
    }

    #[test]
    fn constant_field_is_preserved() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(grid(2, 2, |_, _| 5.0)).unwrap();
        let y = tape.bicubic_resize2d(x, 4, 4).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn same_size_is_bit_identical() {
        let mut tape = Tape::<f64>::new();
        let src = grid(3, 5, |r, c| (r as f64 * 1.7 - c as f64).sin());
        let x = tape.constant(src.clone()).unwrap();
        let y = tape.bicubic_resize2d(x, 3, 5).unwrap();
        assert_eq!(tape.value(y), &src);
    }

    #[test]
    fn linear_ramp_is_reproduced_in_the_interior() {
        // Cubic convolution reproduces linear functions exactly away from the
        // clamped border; the analytic value at output (i, j) is the ramp at the
        // half-pixel source coordinate.
        let ramp = |r: f64, c: f64| 2.0 * r + 3.0 * c + 1.0;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(grid(4, 4, |r, c| ramp(r as f64, c as f64))).unwrap();
        let y = tape.bicubic_resize2d(x, 8, 8).unwrap();
        let out = tape.value(y).data();
        let src = |j: usize| (j as f64 + 0.5) * 0.5 - 0.5;
        // Taps span floor(src)-1 ..= floor(src)+2; interior means all inside 0..4.
        let interior: Vec<usize> = (0..8).filter(|&j| src(j).floor() >= 1.0 && src(j).floor() + 2.0 <= 3.0).collect();
        assert!(!interior.is_empty());
        for &i in &interior {
            for &j in &interior {
                let want = ramp(src(i), src(j));
                assert!((out[i * 8 + j] - want).abs() < 1e-6, "({i},{j})");
            }
        }
    }

    #[test]
    fn target_smaller_than_one_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(grid(2, 2, |_, _| 1.0)).unwrap();
        assert!(matches!(tape.bicubic_resize2d(x, 0, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = tape.constant(Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap()).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0]);
    }

    #[test]
    fn transpose_swaps_last_axes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let t = tape.transpose(a).unwrap();
        assert_eq!(tape.shape(t), &[3, 2]);
        assert_eq!(tape.value(t).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
