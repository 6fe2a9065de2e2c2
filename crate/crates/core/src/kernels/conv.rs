use crate::parallel::for_each_row;
use crate::tensor::Element;

/// Geometry of a grouped 2-D cross-correlation over NCHW data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.out_c * self.out_h() * self.out_w() * self.in_per_group() * self.kh * self.kw)
            as u64
    }

    /// Output positions `[lo, hi)` along one axis whose input tap
    /// `o * stride + k - pad` lands inside `0..len`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= len - 1
        let hi_incl = (len as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_len as isize);
        (lo.min(out_len as isize) as usize, hi.max(lo) as usize)
    }
}

pub fn conv2d_forward<T: Element>(x: &[T], w: &[T], out: &mut [T], g: &ConvGeometry) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let plane = oh * ow;
    let in_plane = g.in_h * g.in_w;
    let wk = g.kh * g.kw;
    let work = g.macs() as usize;
    for_each_row(out, plane, work, |bo, dst| {
        let (b, o) = (bo / g.out_c, bo % g.out_c);
        let grp = o / og;
        dst.fill(T::zero());
        for ci in 0..cg {
            let c = grp * cg + ci;
            let src = &x[(b * g.in_c + c) * in_plane..(b * g.in_c + c + 1) * in_plane];
            let wo = &w[(o * cg + ci) * wk..(o * cg + ci + 1) * wk];
            for ky in 0..g.kh {
                let (y_lo, y_hi) = g.valid(ky, g.in_h, oh);
                for kx in 0..g.kw {
                    let (x_lo, x_hi) = g.valid(kx, g.in_w, ow);
                    let wv = wo[ky * g.kw + kx];
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let ix0 = x_lo + kx - g.pad;
                            for (d, s) in drow[x_lo..x_hi].iter_mut().zip(&srow[ix0..]) {
                                *d += wv * *s;
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                drow[ox] += wv * srow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the input, overwriting `gx`.
pub fn conv2d_backward_input<T: Element>(gy: &[T], w: &[T], gx: &mut [T], g: &ConvGeometry) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let in_plane = g.in_h * g.in_w;
    let wk = g.kh * g.kw;
    for_each_row(gx, in_plane, g.macs() as usize, |bc, dst| {
        let (b, c) = (bc / g.in_c, bc % g.in_c);
        let grp = c / cg;
        let ci = c % cg;
        dst.fill(T::zero());
        for o in grp * og..(grp + 1) * og {
            let go = &gy[(b * g.out_c + o) * oh * ow..(b * g.out_c + o + 1) * oh * ow];
            let wo = &w[(o * cg + ci) * wk..(o * cg + ci + 1) * wk];
            for ky in 0..g.kh {
                let (y_lo, y_hi) = g.valid(ky, g.in_h, oh);
                for kx in 0..g.kw {
                    let (x_lo, x_hi) = g.valid(kx, g.in_w, ow);
                    let wv = wo[ky * g.kw + kx];
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * ow..(oy + 1) * ow];
                        let drow = &mut dst[iy * g.in_w..(iy + 1) * g.in_w];
                        for ox in x_lo..x_hi {
                            drow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the weight, overwriting `gw`.
pub fn conv2d_backward_weight<T: Element>(gy: &[T], x: &[T], gw: &mut [T], g: &ConvGeometry) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (cg, og) = (g.in_per_group(), g.out_per_group());
    let in_plane = g.in_h * g.in_w;
    let wk = g.kh * g.kw;
    for_each_row(gw, cg * wk, g.macs() as usize, |o, dst| {
        let grp = o / og;
        dst.fill(T::zero());
        for b in 0..g.batch {
            let go = &gy[(b * g.out_c + o) * oh * ow..(b * g.out_c + o + 1) * oh * ow];
            for ci in 0..cg {
                let c = grp * cg + ci;
                let src = &x[(b * g.in_c + c) * in_plane..(b * g.in_c + c + 1) * in_plane];
                for ky in 0..g.kh {
                    let (y_lo, y_hi) = g.valid(ky, g.in_h, oh);
                    for kx in 0..g.kw {
                        let (x_lo, x_hi) = g.valid(kx, g.in_w, ow);
                        let mut acc = T::zero();
                        for oy in y_lo..y_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let srow = &src[iy * g.in_w..(iy + 1) * g.in_w];
                            let grow = &go[oy * ow..(oy + 1) * ow];
                            for ox in x_lo..x_hi {
                                acc += grow[ox] * srow[ox * g.stride + kx - g.pad];
                            }
                        }
                        dst[ci * wk + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
}
