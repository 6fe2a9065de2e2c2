//! Dense row-major tensors.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, Index};
use std::sync::Arc;

use num_traits::Float;

use crate::counters::{self, ScopeState};
use crate::error::{Error, Result};

/// Element type tag, also the dtype byte of the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Floating-point element types a [`Tensor`] can hold.
pub trait Element:
    Float + AddAssign + Sum + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Counted element buffer. Allocation and drop are reported to the active
/// [`counters`] scope.
pub(crate) struct Storage<T> {
    buf: Vec<T>,
    scope: Option<Arc<ScopeState>>,
}

impl<T> Storage<T> {
    fn new(buf: Vec<T>) -> Self {
        let scope = counters::charge(Self::bytes_of(buf.len()));
        Storage { buf, scope }
    }

    fn bytes_of(len: usize) -> u64 {
        (len * std::mem::size_of::<T>()) as u64
    }
}

impl<T: Clone> Clone for Storage<T> {
    fn clone(&self) -> Self {
        Storage::new(self.buf.clone())
    }
}

impl<T> Drop for Storage<T> {
    fn drop(&mut self) {
        if let Some(scope) = &self.scope {
            counters::release(scope, Self::bytes_of(self.buf.len()));
        }
    }
}

/// Dense n-dimensional array. Clones share the buffer; mutation copies on
/// write, so a tensor handed to a tape is never changed underneath it.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Storage<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(Storage::new(data)),
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.buf.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn size_bytes(&self) -> usize {
        self.numel() * std::mem::size_of::<T>()
    }

    pub fn data(&self) -> &[T] {
        &self.data.buf
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut Arc::make_mut(&mut self.data).buf
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.buf.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    /// Same buffer, new extents.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data().iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data().iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data().iter().copied().sum()
    }

    pub fn l2_norm(&self) -> T {
        self.data().iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// `max|a - b| / max(max|b|, tiny)`.
    pub fn max_rel_diff(&self, reference: &Tensor<T>) -> T {
        let scale = reference
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(T::zero(), T::max)
            .max(T::min_positive_value());
        self.max_abs_diff(reference) / scale
    }

    #[cfg(test)]
    pub(crate) fn same_storage(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }
}

impl<T: Element> Index<usize> for Tensor<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.data.buf[i]
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        let data = self.data();
        write!(f, "Tensor<{:?}>{:?} [", T::DTYPE, self.shape)?;
        for (i, v) in data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

impl<T: Element> PartialEq for Tensor<T> {
    /// Bitwise equality of shape and elements.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_shares_storage() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        let r = t.reshape(&[3, 2]).unwrap();
        assert!(t.same_storage(&r));
        let mut c = r.clone();
        c.data_mut()[0] = 1.0;
        assert!(!t.same_storage(&c));
        assert_eq!(t.data()[0], 0.0);
    }
    use crate::counters::CounterScope;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn reshape_shares_storage_and_checks_numel() {
        let t = Tensor::<f32>::ones(&[4, 6]);
        let r = t.reshape(&[2, 12]).unwrap();
        assert!(r.same_storage(&t));
        assert!(t.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn copy_on_write() {
        let a = Tensor::<f64>::zeros(&[3]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(b.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn allocations_are_counted_and_released() {
        let scope = CounterScope::enter();
        {
            let _a = Tensor::<f32>::zeros(&[10]);
            let _b = Tensor::<f64>::zeros(&[10]);
            assert_eq!(scope.snapshot().live_bytes, 120);
        }
        let s = scope.snapshot();
        assert_eq!(s.live_bytes, 0);
        assert_eq!(s.peak_bytes, 120);
        assert_eq!(s.allocs, 2);
    }
}
