use super::{BinaryKind, Broadcast, GradAcc, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Broadcast {
    /// Resolves how `b` broadcasts onto `a` (numpy rules, `b` side only).
    fn resolve(a: &[usize], b: &[usize]) -> Result<Broadcast> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        let err = || Error::dim(format!("cannot broadcast {b:?} onto {a:?}"));
        if b.len() > a.len() {
            // Allow extra leading ones on b.
            let extra = b.len() - a.len();
            if b[..extra].iter().any(|&d| d != 1) {
                return Err(err());
            }
            return Broadcast::resolve(a, &b[extra..]);
        }
        let off = a.len() - b.len();
        for (i, &d) in b.iter().enumerate() {
            if d != 1 && d != a[off + i] {
                return Err(err());
            }
        }
        let b_trim: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
        if a.ends_with(&b_trim) {
            return Ok(Broadcast::Suffix(b_trim.iter().product()));
        }
        // Leading extents of `a` followed only by ones.
        let lead: Vec<usize> = {
            let mut v = vec![1; off];
            v.extend_from_slice(b);
            v
        };
        if let Some(split) = (0..=a.len()).rev().find(|&s| lead[..s] == a[..s]) {
            if lead[split..].iter().all(|&d| d == 1) {
                return Ok(Broadcast::Prefix(a[split..].iter().product()));
            }
        }
        let mut b_strides = vec![0; a.len()];
        let mut stride = 1;
        for i in (0..b.len()).rev() {
            if b[i] != 1 {
                b_strides[off + i] = stride;
            }
            stride *= b[i];
        }
        Ok(Broadcast::General {
            a_shape: a.to_vec(),
            b_strides,
        })
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(len) => i % len,
            Broadcast::Prefix(inner) => i / inner,
            Broadcast::General { a_shape, b_strides } => {
                let mut rem = i;
                let mut j = 0;
                for (d, s) in a_shape.iter().zip(b_strides).rev() {
                    j += (rem % d) * s;
                    rem /= d;
                }
                j
            }
        }
    }
}

impl<T: Element> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise product; `b` may broadcast onto `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let bcast = Broadcast::resolve(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let (ad, bd) = (av.data(), bv.data());
        let f: fn(T, T) -> T = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
        };
        let out: Vec<T> = match &bcast {
            Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Suffix(len) => ad
                .chunks(*len)
                .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect(),
            _ => ad.iter().enumerate().map(|(i, &x)| f(x, bd[bcast.index(i)])).collect(),
        };
        let shape = av.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Binary { kind, a, b, bcast }, "binary op")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64(factor);
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, "scale")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_K));
        let half = T::from_f64(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        self.push(out, Op::Gelu { x }, "gelu")
    }
}

pub(super) fn binary_backward<T: Element>(
    kind: BinaryKind,
    a: Var,
    b: Var,
    bcast: &Broadcast,
    g: &Tensor<T>,
    acc: &mut GradAcc<'_, T>,
) -> Result<()> {
    let gd = g.data();
    if acc.wants(a) {
        let ga = match kind {
            BinaryKind::Add | BinaryKind::Sub => g.clone(),
            BinaryKind::Mul => {
                let bd = acc.value(b).data();
                let v = gd.iter().enumerate().map(|(i, &x)| x * bd[bcast.index(i)]).collect();
                Tensor::from_parts(g.shape().to_vec(), v)
            }
        };
        acc.add(a, ga);
    }
    if acc.wants(b) {
        let bshape = acc.value(b).shape().to_vec();
        let gb = if *bcast == Broadcast::Same {
            match kind {
                BinaryKind::Add => g.clone(),
                BinaryKind::Sub => g.map(|v| -v),
                BinaryKind::Mul => {
                    let ad = acc.value(a).data();
                    Tensor::from_parts(bshape, gd.iter().zip(ad).map(|(&x, &y)| x * y).collect())
                }
            }
        } else {
            let mut out = vec![T::zero(); bshape.iter().product()];
            match kind {
                BinaryKind::Add => gd.iter().enumerate().for_each(|(i, &x)| out[bcast.index(i)] += x),
                BinaryKind::Sub => gd.iter().enumerate().for_each(|(i, &x)| out[bcast.index(i)] += -x),
                BinaryKind::Mul => {
                    let ad = acc.value(a).data();
                    gd.iter()
                        .zip(ad)
                        .enumerate()
                        .for_each(|(i, (&x, &y))| out[bcast.index(i)] += x * y);
                }
            }
            Tensor::from_parts(bshape, out)
        };
        acc.add(b, gb);
    }
    Ok(())
}

pub(super) fn gelu_backward<T: Element>(x: Var, g: &Tensor<T>, acc: &mut GradAcc<'_, T>) -> Result<()> {
    let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_K));
    let (half, three) = (T::from_f64(0.5), T::from_f64(3.0));
    let xv = acc.value(x);
    let d = xv
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| {
            let t = (c * (v + k * v * v * v)).tanh();
            let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
            gv * (half * (T::one() + t) + half * v * dt)
        })
        .collect();
    let shape = xv.shape().to_vec();
    acc.add(x, Tensor::from_parts(shape, d));
    Ok(())
}
