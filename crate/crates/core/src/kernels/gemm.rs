use crate::parallel::for_each_row;
use crate::tensor::Element;

/// Extents of a (possibly batched) product `C[g] = op(A[g]) · op(B[g])`.
///
/// `A` is stored `m×k` (or `k×m` when `trans_a`), `B` is stored `k×n` (or
/// `n×k` when `trans_b`). When `b_batched` is false a single `B` is shared
/// by every batch entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmShape {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub trans_a: bool,
    pub trans_b: bool,
    pub b_batched: bool,
}

impl GemmShape {
    pub fn macs(&self) -> u64 {
        (self.batch * self.m * self.k * self.n) as u64
    }
}

const ROW_BLOCK: usize = 4;

/// Overwrites `c` with the product described by `s`.
pub fn gemm<T: Element>(a: &[T], b: &[T], c: &mut [T], s: &GemmShape) {
    let GemmShape { batch, m, k, n, .. } = *s;
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), if s.b_batched { batch * k * n } else { k * n });
    debug_assert_eq!(c.len(), batch * m * n);
    if m == 0 || n == 0 {
        return;
    }
    let b_stride = if s.b_batched { k * n } else { 0 };
    let blocks_per_batch = m.div_ceil(ROW_BLOCK);
    // One task per block of up to ROW_BLOCK output rows within one batch entry.
    // Blocks never straddle batch entries, so tail blocks may be short.
    let work = batch * m * k * n;
    if m % ROW_BLOCK == 0 || batch == 1 {
        for_each_row(c, ROW_BLOCK * n, work, |blk, rows| {
            let (g, i0) = if batch == 1 {
                (0, blk * ROW_BLOCK)
            } else {
                let rows_in = m / ROW_BLOCK;
                (blk / rows_in, (blk % rows_in) * ROW_BLOCK)
            };
            let a_g = &a[g * m * k..(g + 1) * m * k];
            let b_g = &b[g * b_stride..g * b_stride + k * n];
            block(a_g, b_g, rows, i0, s);
        });
    } else {
        for_each_row(c, m * n, work, |g, out| {
            let a_g = &a[g * m * k..(g + 1) * m * k];
            let b_g = &b[g * b_stride..g * b_stride + k * n];
            for bi in 0..blocks_per_batch {
                let i0 = bi * ROW_BLOCK;
                let rows = ROW_BLOCK.min(m - i0);
                block(a_g, b_g, &mut out[i0 * n..(i0 + rows) * n], i0, s);
            }
        });
    }
}

/// Computes output rows `i0..i0 + out.len()/n` of one batch entry.
fn block<T: Element>(a: &[T], b: &[T], out: &mut [T], i0: usize, s: &GemmShape) {
    let (m, k, n) = (s.m, s.k, s.n);
    let rows = out.len() / n;
    match (s.trans_a, s.trans_b) {
        (false, false) => {
            out.fill(T::zero());
            if rows == ROW_BLOCK {
                let (c0, rest) = out.split_at_mut(n);
                let (c1, rest) = rest.split_at_mut(n);
                let (c2, c3) = rest.split_at_mut(n);
                let a0 = &a[i0 * k..(i0 + 1) * k];
                let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
                let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
                let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
                for p in 0..k {
                    let br = &b[p * n..(p + 1) * n];
                    let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
                    for ((((bj, y0), y1), y2), y3) in br
                        .iter()
                        .zip(c0.iter_mut())
                        .zip(c1.iter_mut())
                        .zip(c2.iter_mut())
                        .zip(c3.iter_mut())
                    {
                        *y0 += x0 * *bj;
                        *y1 += x1 * *bj;
                        *y2 += x2 * *bj;
                        *y3 += x3 * *bj;
                    }
                }
            } else {
                for r in 0..rows {
                    let ar = &a[(i0 + r) * k..(i0 + r + 1) * k];
                    let cr = &mut out[r * n..(r + 1) * n];
                    for (p, &x) in ar.iter().enumerate() {
                        axpy(x, &b[p * n..(p + 1) * n], cr);
                    }
                }
            }
        }
        (false, true) => {
            for r in 0..rows {
                let ar = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (j, y) in out[r * n..(r + 1) * n].iter_mut().enumerate() {
                    *y = dot(ar, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            out.fill(T::zero());
            for p in 0..k {
                let br = &b[p * n..(p + 1) * n];
                let ap = &a[p * m..(p + 1) * m];
                for r in 0..rows {
                    axpy(ap[i0 + r], br, &mut out[r * n..(r + 1) * n]);
                }
            }
        }
        (true, true) => {
            for r in 0..rows {
                let i = i0 + r;
                for (j, y) in out[r * n..(r + 1) * n].iter_mut().enumerate() {
                    let bj = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * bj[p];
                    }
                    *y = acc;
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent accumulators, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let cx = x.chunks_exact(8);
    let cy = y.chunks_exact(8);
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (a, b) in cx.zip(cy) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = T::zero();
    for (a, b) in rx.iter().zip(ry) {
        tail += *a * *b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn naive(a: &[f64], b: &[f64], s: &GemmShape) -> Vec<f64> {
        let GemmShape { batch, m, k, n, .. } = *s;
        let mut c = vec![0.0; batch * m * n];
        for g in 0..batch {
            let bo = if s.b_batched { g * k * n } else { 0 };
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        let av = if s.trans_a { a[g * m * k + p * m + i] } else { a[g * m * k + i * k + p] };
                        let bv = if s.trans_b { b[bo + j * k + p] } else { b[bo + p * n + j] };
                        acc += av * bv;
                    }
                    c[g * m * n + i * n + j] = acc;
                }
            }
        }
        c
    }

    #[test]
    fn all_layouts_match_naive_product() {
        let mut rng = SplitMix64::new(1);
        for &(batch, m, k, n) in &[(1, 1, 1, 1), (1, 5, 7, 3), (3, 4, 6, 9), (2, 9, 17, 5), (4, 8, 3, 8)] {
            for ta in [false, true] {
                for tb in [false, true] {
                    for b_batched in [false, true] {
                        let s = GemmShape { batch, m, k, n, trans_a: ta, trans_b: tb, b_batched };
                        let a: Vec<f64> = (0..batch * m * k).map(|_| rng.normal()).collect();
                        let nb = if b_batched { batch * k * n } else { k * n };
                        let b: Vec<f64> = (0..nb).map(|_| rng.normal()).collect();
                        let mut c = vec![f64::NAN; batch * m * n];
                        gemm(&a, &b, &mut c, &s);
                        let want = naive(&a, &b, &s);
                        for (x, y) in c.iter().zip(&want) {
                            assert!((x - y).abs() < 1e-12, "{s:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let x: Vec<f64> = (0..19).map(|v| v as f64).collect();
        assert_eq!(dot(&x, &x), (0..19).map(|v| (v * v) as f64).sum::<f64>());
    }
}
