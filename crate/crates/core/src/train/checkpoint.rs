//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UFOV"  u32 version = 1  u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 dtype (0 f32, 1 f64),
//!             u8 ndim, ndim × u32 extents, raw element data
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::UfoViT;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"UFOV";
pub const VERSION: u32 = 1;

/// A tensor of either supported element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }
}

/// Wraps a tensor of a generic element type.
pub trait IntoAny: Element {
    fn into_any(t: Tensor<Self>) -> AnyTensor;
    fn from_any(t: &AnyTensor) -> Option<Tensor<Self>>;
}

impl IntoAny for f32 {
    fn into_any(t: Tensor<f32>) -> AnyTensor {
        AnyTensor::F32(t)
    }
    fn from_any(t: &AnyTensor) -> Option<Tensor<f32>> {
        match t {
            AnyTensor::F32(t) => Some(t.clone()),
            AnyTensor::F64(_) => None,
        }
    }
}

impl IntoAny for f64 {
    fn into_any(t: Tensor<f64>) -> AnyTensor {
        AnyTensor::F64(t)
    }
    fn from_any(t: &AnyTensor) -> Option<Tensor<f64>> {
        match t {
            AnyTensor::F64(t) => Some(t.clone()),
            AnyTensor::F32(_) => None,
        }
    }
}

fn put<T: Element>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.push(T::DTYPE as u8);
    out.push(t.ndim() as u8);
    for &e in t.shape() {
        out.extend((e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serializes named tensors.
pub fn encode(tensors: &[(String, AnyTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::usage(format!("tensor name too long: {name}")))?;
        if t.shape().len() > u8::MAX as usize || t.shape().iter().any(|&e| e > u32::MAX as usize) {
            return Err(Error::usage(format!("tensor {name} has unsupported extents {:?}", t.shape())));
        }
        out.extend(len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match t {
            AnyTensor::F32(t) => put(&mut out, t),
            AnyTensor::F64(t) => put(&mut out, t),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn tensor<T: Element>(&mut self, shape: Vec<usize>, name: &str) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let size = std::mem::size_of::<T>();
        let raw = self.take(n * size, &format!("data of `{name}`"))?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        Tensor::from_vec(&shape, data)
    }
}

/// Parses and CRC-checks a checkpoint image. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    if bytes.len() < 16 {
        return Err(Error::Format { path: path.to_path_buf(), offset: 0, msg: format!("file is only {} bytes", bytes.len()) });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected UFOV"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let start = r.pos;
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_string(),
            Err(_) => {
                r.pos = start;
                return Err(r.err("tensor name is not UTF-8"));
            }
        };
        let dtype = r.u8("dtype")?;
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("extent")? as usize);
        }
        let t = match dtype {
            0 => AnyTensor::F32(r.tensor(shape, &name)?),
            1 => AnyTensor::F64(r.tensor(shape, &name)?),
            other => {
                r.pos -= 2 + 4 * ndim;
                return Err(r.err(format!("unknown dtype byte {other} for `{name}`")));
            }
        };
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(r.err(format!("{} trailing bytes after the last tensor", body.len() - r.pos)));
    }
    Ok(out)
}

/// Writes every model parameter, in model order.
pub fn save_checkpoint<T: IntoAny>(model: &UfoViT<T>, path: &Path) -> Result<()> {
    let tensors: Vec<(String, AnyTensor)> =
        model.params().iter().map(|p| (p.name.clone(), T::into_any(p.value.clone()))).collect();
    let bytes = encode(&tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and verifies a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint into `model`, checking every name, shape and dtype.
pub fn load_into<T: IntoAny>(model: &mut UfoViT<T>, path: &Path) -> Result<()> {
    let entries = load_checkpoint(path)?;
    let mut typed = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        let v = T::from_any(&t).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("tensor `{name}` is {:?}, model uses {:?}", t.dtype(), T::DTYPE),
        })?;
        typed.push((name, v));
    }
    model.load_params(&typed)
}

/// Like [`load_into`], except classifier-head tensors that are missing or
/// shaped differently keep their current values. Used to fine-tune on a new
/// label set.
pub fn load_backbone<T: IntoAny>(model: &mut UfoViT<T>, path: &Path) -> Result<()> {
    let entries = load_checkpoint(path)?;
    let mut typed = Vec::with_capacity(model.params().len());
    for p in model.params() {
        let found = entries.iter().find(|(n, _)| *n == p.name).map(|(_, t)| t);
        let keep_own = p.head && found.is_none_or(|t| t.shape() != p.value.shape());
        if keep_own {
            typed.push((p.name.clone(), p.value.clone()));
            continue;
        }
        let Some(t) = found else {
            return Err(Error::MissingTensor(p.name.clone()));
        };
        let v = T::from_any(t).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("tensor `{}` is {:?}, model uses {:?}", p.name, t.dtype(), T::DTYPE),
        })?;
        typed.push((p.name.clone(), v));
    }
    model.load_params(&typed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, AnyTensor)> {
        vec![
            ("a".into(), AnyTensor::F32(Tensor::from_vec(&[2, 2], vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]).unwrap())),
            ("b.c".into(), AnyTensor::F64(Tensor::from_vec(&[3], vec![0.1, 0.2, -0.0]).unwrap())),
            ("s".into(), AnyTensor::F64(Tensor::scalar(7.0))),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let bytes = encode(&sample()).unwrap();
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, sample());
        assert_eq!(&bytes[..4], b"UFOV");
    }

    #[test]
    fn flipped_byte_is_crc_error() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[20] ^= 0x40;
        assert!(matches!(decode(&bytes, Path::new("mem")), Err(Error::Crc { .. })));
    }

    #[test]
    fn bad_version_reports_offset() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 2;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bytes, Path::new("mem")), Err(Error::Format { offset: 4, .. })));
    }
}
