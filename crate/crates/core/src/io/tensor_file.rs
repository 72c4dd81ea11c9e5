//! Binary tensor files.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "EQTN"
//! 4       2           version, u16 LE (currently 1)
//! 6       1           dtype code: 0 = f32, 1 = i8, 2 = i16, 3 = i32
//! 7       1           ndim
//! 8       4 * ndim    dims, u32 LE each
//! ...     n * size    payload, little-endian, row-major
//! ```
//!
//! The payload must be exactly `product(dims) * size` bytes; trailing bytes
//! are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Location, Result};
use crate::tensor::{AnyTensor, DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"EQTN";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8;

trait LeBytes: Element {
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl LeBytes for f32 {
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl LeBytes for i8 {
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        i8::from_le_bytes([b[0]])
    }
}

impl LeBytes for i16 {
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        i16::from_le_bytes([b[0], b[1]])
    }
}

impl LeBytes for i32 {
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        i32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

fn encode_typed<T: LeBytes>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.shape().len())
        .map_err(|_| Error::config(format!("{} dimensions do not fit the header", t.shape().len())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * ndim as usize + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::config(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn encode_tensor(t: &AnyTensor) -> Result<Vec<u8>> {
    match t {
        AnyTensor::F32(t) => encode_typed(t),
        AnyTensor::I8(t) => encode_typed(t),
        AnyTensor::I16(t) => encode_typed(t),
        AnyTensor::I32(t) => encode_typed(t),
    }
}

fn decode_payload<T: LeBytes>(shape: Vec<usize>, payload: &[u8]) -> Tensor<T> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(shape, data).expect("payload length checked")
}

/// Decode a tensor file held in memory. Errors carry the byte offset of the
/// offending field.
pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<AnyTensor, (Location, String)> {
    let fail = |at: usize, msg: String| Err((Location::Byte(at), msg));
    if bytes.len() < HEADER_LEN {
        return fail(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        );
    }
    if &bytes[0..4] != MAGIC {
        return fail(0, format!("bad magic {:?}", &bytes[0..4]));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return fail(4, format!("unsupported version {version}"));
    }
    let Some(dtype) = DType::from_code(bytes[6]) else {
        return fail(6, format!("unknown dtype code {}", bytes[6]));
    };
    let ndim = bytes[7] as usize;
    let dims_end = HEADER_LEN + 4 * ndim;
    if bytes.len() < dims_end {
        return fail(
            bytes.len(),
            format!("truncated dims: need {dims_end} bytes for {ndim} dims"),
        );
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = shape.iter().try_fold(dtype.size(), |acc, &d| acc.checked_mul(d));
    let payload = &bytes[dims_end..];
    match expected {
        Some(n) if n == payload.len() => {}
        Some(n) => {
            return fail(
                dims_end,
                format!(
                    "payload is {} bytes, shape {shape:?} of {dtype} needs {n}",
                    payload.len()
                ),
            )
        }
        None => return fail(HEADER_LEN, format!("shape {shape:?} overflows")),
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(shape, payload)),
        DType::I8 => AnyTensor::I8(decode_payload(shape, payload)),
        DType::I16 => AnyTensor::I16(decode_payload(shape, payload)),
        DType::I32 => AnyTensor::I32(decode_payload(shape, payload)),
    })
}

pub fn save_tensor(path: &Path, t: &AnyTensor) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|(location, message)| Error::Parse {
        path: path.to_path_buf(),
        location,
        message,
    })
}

/// Load a tensor that must be f32.
pub fn load_f32(path: &Path) -> Result<Tensor<f32>> {
    match load_tensor(path)? {
        AnyTensor::F32(t) => Ok(t),
        other => Err(Error::Parse {
            path: path.to_path_buf(),
            location: Location::Byte(6),
            message: format!("expected an f32 tensor, found {}", other.dtype()),
        }),
    }
}
