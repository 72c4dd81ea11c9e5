//! Dense row-major tensors.
//!
//! Activations use NCHW order with N = 1, weights use (O, I, Kh, Kw). The
//! element type doubles as the dtype tag, so an `i8` tensor can only be
//! produced by quantization or by decoding an `i8` tensor file.

use std::fmt;

use crate::error::{Error, Result};

/// Element type tag, matching the on-disk dtype codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I8,
    I16,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::I16 => 2,
            DType::I32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::I8),
            2 => Some(DType::I16),
            3 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
            DType::I16 => 2,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::I8 => "i8",
            DType::I16 => "i16",
            DType::I32 => "i32",
        })
    }
}

pub trait Element: Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
}
impl Element for i8 {
    const DTYPE: DType = DType::I8;
}
impl Element for i16 {
    const DTYPE: DType = DType::I16;
}
impl Element for i32 {
    const DTYPE: DType = DType::I32;
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::default(); len],
        }
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same elements, new shape.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map<U: Element>(&self, f: impl FnMut(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Leading dimension, i.e. the output channel count of a weight tensor.
    pub fn dim0(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per index of the leading dimension.
    pub fn inner_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Slice belonging to index `i` of the leading dimension.
    pub fn outer_slice(&self, i: usize) -> &[T] {
        let inner = self.inner_len();
        &self.data[i * inner..(i + 1) * inner]
    }

    /// Channel `c` of an NCHW activation with N = 1.
    pub fn channel(&self, c: usize) -> &[T] {
        let per = self.channel_len();
        &self.data[c * per..(c + 1) * per]
    }

    pub fn channels(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1],
        }
    }

    fn channel_len(&self) -> usize {
        self.shape.iter().skip(2).product()
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", T::DTYPE, self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        f.write_str("]")
    }
}

/// A tensor of any supported dtype, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    I8(Tensor<i8>),
    I16(Tensor<i16>),
    I32(Tensor<i32>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::I8(_) => DType::I8,
            AnyTensor::I16(_) => DType::I16,
            AnyTensor::I32(_) => DType::I32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::I8(t) => t.shape(),
            AnyTensor::I16(t) => t.shape(),
            AnyTensor::I32(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            other => Err(Error::data(format!("expected an f32 tensor, found {}", other.dtype()))),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}
impl From<Tensor<i8>> for AnyTensor {
    fn from(t: Tensor<i8>) -> Self {
        AnyTensor::I8(t)
    }
}
impl From<Tensor<i16>> for AnyTensor {
    fn from(t: Tensor<i16>) -> Self {
        AnyTensor::I16(t)
    }
}
impl From<Tensor<i32>> for AnyTensor {
    fn from(t: Tensor<i32>) -> Self {
        AnyTensor::I32(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0f32; 5]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn channel_slices() {
        let t = Tensor::new(vec![1, 2, 1, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.channels(), 2);
        assert_eq!(t.channel(1), &[3.0, 4.0]);
        assert_eq!(t.outer_slice(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn dtype_codes_round_trip() {
        for dt in [DType::F32, DType::I8, DType::I16, DType::I32] {
            assert_eq!(DType::from_code(dt.code()), Some(dt));
        }
        assert_eq!(DType::from_code(4), None);
    }
}
