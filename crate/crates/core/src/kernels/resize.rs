use crate::tensor::Element;

/// Catmull-Rom cubic convolution parameter.
const A: f64 = -0.5;

fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four source taps per output position along one axis.
#[derive(Debug, Clone)]
pub struct CubicTaps {
    pub in_len: usize,
    pub out_len: usize,
    pub index: Vec<[usize; 4]>,
    pub weight: Vec<[f64; 4]>,
}

/// Half-pixel-centre sampling positions with edge clamping.
pub fn cubic_taps(in_len: usize, out_len: usize) -> CubicTaps {
    let scale = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    let mut index = Vec::with_capacity(out_len);
    let mut weight = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let src = (j as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        let base = base as isize;
        let mut idx = [0usize; 4];
        for (k, slot) in idx.iter_mut().enumerate() {
            *slot = (base - 1 + k as isize).clamp(0, last) as usize;
        }
        index.push(idx);
        weight.push([
            cubic_weight(t + 1.0),
            cubic_weight(t),
            cubic_weight(1.0 - t),
            cubic_weight(2.0 - t),
        ]);
    }
    CubicTaps {
        in_len,
        out_len,
        index,
        weight,
    }
}

/// Resamples the middle axis of `src` viewed as `[outer, in_len, inner]`.
pub fn resize_axis<T: Element>(src: &[T], dst: &mut [T], outer: usize, inner: usize, taps: &CubicTaps) {
    let (il, ol) = (taps.in_len, taps.out_len);
    for o in 0..outer {
        let s = &src[o * il * inner..(o + 1) * il * inner];
        let d = &mut dst[o * ol * inner..(o + 1) * ol * inner];
        for j in 0..ol {
            let row = &mut d[j * inner..(j + 1) * inner];
            row.fill(T::zero());
            for k in 0..4 {
                let w = T::from_f64(taps.weight[j][k]);
                let srow = &s[taps.index[j][k] * inner..(taps.index[j][k] + 1) * inner];
                for (x, &y) in row.iter_mut().zip(srow) {
                    *x += w * y;
                }
            }
        }
    }
}

/// Transpose of [`resize_axis`]: scatters `dst`-shaped gradients back to the source layout.
pub fn resize_axis_adjoint<T: Element>(
    grad_dst: &[T],
    grad_src: &mut [T],
    outer: usize,
    inner: usize,
    taps: &CubicTaps,
) {
    let (il, ol) = (taps.in_len, taps.out_len);
    grad_src.fill(T::zero());
    for o in 0..outer {
        let g = &grad_dst[o * ol * inner..(o + 1) * ol * inner];
        let s = &mut grad_src[o * il * inner..(o + 1) * il * inner];
        for j in 0..ol {
            let grow = &g[j * inner..(j + 1) * inner];
            for k in 0..4 {
                let w = T::from_f64(taps.weight[j][k]);
                let i = taps.index[j][k];
                for (x, &y) in s[i * inner..(i + 1) * inner].iter_mut().zip(grow) {
                    *x += w * y;
                }
            }
        }
    }
}
