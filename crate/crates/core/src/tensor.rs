//! Dense row-major `f64` tensors and the CGTN on-disk format.
//!
//! CGTN layout (all little-endian):
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 4            | magic `CGTN`                     |
//! | 4            | `u32` version, always 1          |
//! | 1            | dtype code (1 = f64, 2 = i64)    |
//! | 1            | `u8` ndim                        |
//! | 8 × ndim     | `u64` dims                       |
//! | rest         | payload                          |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CGTN_MAGIC: &[u8; 4] = b"CGTN";
pub const CGTN_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_I64: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape, "tensor")?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("expected {n} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        validate_shape(shape, "reshape")?;
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(0)
    }

    /// Gathers rows (first axis) by index into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_cgtn<W: Write>(&self, w: W) -> Result<()> {
        let mut payload = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_cgtn_raw(w, DTYPE_F64, &self.shape, &payload)
    }

    pub fn read_cgtn<R: Read>(r: R) -> Result<Self> {
        let (dtype, shape, payload) = read_cgtn_raw(r)?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("expected f64 dtype, found code {dtype}")));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(shape, data)
    }

    pub fn to_cgtn_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_cgtn(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_cgtn_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_cgtn(bytes.as_slice())
    }
}

/// Integer tensor used for trial metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "int tensor",
                shape,
                reason: format!("expected {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn to_cgtn_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut buf = Vec::new();
        write_cgtn_raw(&mut buf, DTYPE_I64, &self.shape, &payload).expect("vec write");
        buf
    }

    pub fn read_cgtn<R: Read>(r: R) -> Result<Self> {
        let (dtype, shape, payload) = read_cgtn_raw(r)?;
        if dtype != DTYPE_I64 {
            return Err(Error::Format(format!("expected i64 dtype, found code {dtype}")));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(shape, data)
    }
}

fn validate_shape(shape: &[usize], op: &'static str) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "dimensions must be positive and at least one axis is required".into(),
        });
    }
    Ok(())
}

fn write_cgtn_raw<W: Write>(mut w: W, dtype: u8, shape: &[usize], payload: &[u8]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format("too many dimensions".into()));
    }
    w.write_all(CGTN_MAGIC)?;
    w.write_all(&CGTN_VERSION.to_le_bytes())?;
    w.write_all(&[dtype, shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(payload)?;
    Ok(())
}

fn read_cgtn_raw<R: Read>(mut r: R) -> Result<(u8, Vec<usize>, Vec<u8>)> {
    let mut head = [0u8; 10];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated CGTN header".into()))?;
    if &head[..4] != CGTN_MAGIC {
        return Err(Error::Format("bad CGTN magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CGTN_VERSION {
        return Err(Error::Format(format!("unsupported CGTN version {version}")));
    }
    let dtype = head[8];
    let ndim = head[9] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut d = [0u8; 8];
        r.read_exact(&mut d)
            .map_err(|_| Error::Format("truncated CGTN dims".into()))?;
        shape.push(u64::from_le_bytes(d) as usize);
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = shape.iter().product::<usize>() * 8;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "CGTN payload has {} bytes, shape {:?} needs {expected}",
            payload.len(),
            shape
        )));
    }
    Ok((dtype, shape, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = t.to_cgtn_bytes();
        assert_eq!(&b[..4], b"CGTN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 2);
        assert_eq!(u64::from_le_bytes(b[10..18].try_into().unwrap()), 2);
        assert_eq!(b.len(), 10 + 16 + 16);
        assert_eq!(f64::from_le_bytes(b[34..42].try_into().unwrap()), -2.0);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = t.to_cgtn_bytes();
        b.pop();
        assert!(Tensor::read_cgtn(b.as_slice()).is_err());
    }

    #[test]
    fn int_tensor_dtype_is_checked() {
        let it = IntTensor::new(vec![2], vec![4, -1]).unwrap();
        let bytes = it.to_cgtn_bytes();
        assert_eq!(IntTensor::read_cgtn(bytes.as_slice()).unwrap(), it);
        assert!(Tensor::read_cgtn(bytes.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn cgtn_roundtrip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::read_cgtn(t.to_cgtn_bytes().as_slice()).unwrap();
            prop_assert_eq!(t.to_cgtn_bytes(), back.to_cgtn_bytes());
        }
    }
}
