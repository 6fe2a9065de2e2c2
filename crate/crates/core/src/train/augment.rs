//! Pad-reflect random crop and horizontal flip.

use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const PAD: usize = 4;

/// Reflect index `i` (which may fall up to `PAD` outside) into `[0, n)`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// One `[C, H, W]` sample cropped at offset `(oy, ox)` from its reflect-padded
/// copy, optionally mirrored left-right. Offset `(PAD, PAD)` without flip is
/// the identity.
pub fn crop_flip(sample: &[f32], c: usize, h: usize, w: usize, oy: usize, ox: usize, flip: bool) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect(y as isize + oy as isize - PAD as isize, h);
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = reflect(xx as isize + ox as isize - PAD as isize, w);
                out[(ch * h + y) * w + x] = sample[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

/// Augments a `[B, C, H, W]` batch: per sample a uniform offset in
/// `[0, 2·PAD]` on each axis, then a flip with probability 0.5 when
/// `allow_flip`. Draw order per sample is row offset, column offset, flip.
pub fn augment(batch: &Tensor<f32>, rng: &mut SplitMix64, allow_flip: bool) -> Tensor<f32> {
    let s = batch.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let len = c * h * w;
    let mut out = Vec::with_capacity(b * len);
    for i in 0..b {
        let oy = rng.below(2 * PAD as u64 + 1) as usize;
        let ox = rng.below(2 * PAD as u64 + 1) as usize;
        let flip = allow_flip && rng.bernoulli(0.5);
        out.extend(crop_flip(&batch.data()[i * len..(i + 1) * len], c, h, w, oy, ox, flip));
    }
    Tensor::from_vec(s, out).expect("same extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<f32> {
        (0..2 * 5 * 6).map(|v| v as f32).collect()
    }

    #[test]
    fn center_crop_is_identity() {
        let s = sample();
        assert_eq!(crop_flip(&s, 2, 5, 6, PAD, PAD, false), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let once = crop_flip(&s, 2, 5, 6, PAD, PAD, true);
        assert_ne!(once, s);
        assert_eq!(crop_flip(&once, 2, 5, 6, PAD, PAD, true), s);
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(8, 5), 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let t = Tensor::from_vec(&[2, 2, 5, 6], [sample(), sample()].concat()).unwrap();
        let a = augment(&t, &mut SplitMix64::new(5), true);
        let b = augment(&t, &mut SplitMix64::new(5), true);
        assert_eq!(a, b);
    }
}
