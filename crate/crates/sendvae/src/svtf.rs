//! SVTF: the binary tensor file used for datasets, checkpoints and sample
//! dumps.
//!
//! Layout (all integers little-endian):
//! `"SVTF"` magic, `u32` version (currently 1), `u8` dtype
//! (0 = f32, 1 = f64, 2 = u8), `u8` ndim, `ndim x u64` dims, then the
//! row-major payload.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"SVTF";
pub const VERSION: u32 = 1;
pub const MAX_NDIM: usize = 6;

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
}

impl Tensor {
    pub fn dtype_code(&self) -> u8 {
        match self {
            Tensor::F32(_) => 0,
            Tensor::F64(_) => 1,
            Tensor::U8(_) => 2,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
            Tensor::U8(a) => a.shape(),
        }
    }

    fn elem_size(&self) -> usize {
        match self {
            Tensor::F32(_) => 4,
            Tensor::F64(_) => 8,
            Tensor::U8(_) => 1,
        }
    }

    pub fn as_f32(&self) -> Result<&ArrayD<f32>> {
        match self {
            Tensor::F32(a) => Ok(a),
            other => Err(Error::Data(format!(
                "expected f32 tensor, found dtype code {}",
                other.dtype_code()
            ))),
        }
    }

    pub fn as_f64(&self) -> Result<&ArrayD<f64>> {
        match self {
            Tensor::F64(a) => Ok(a),
            other => Err(Error::Data(format!(
                "expected f64 tensor, found dtype code {}",
                other.dtype_code()
            ))),
        }
    }

    pub fn as_u8(&self) -> Result<&ArrayD<u8>> {
        match self {
            Tensor::U8(a) => Ok(a),
            other => Err(Error::Data(format!(
                "expected u8 tensor, found dtype code {}",
                other.dtype_code()
            ))),
        }
    }
}

fn format_err(msg: impl Into<String>, offset: u64) -> Error {
    Error::Format {
        msg: msg.into(),
        offset,
    }
}

fn check_ndim(ndim: usize, offset: u64) -> Result<()> {
    if ndim > MAX_NDIM {
        return Err(format_err(
            format!("ndim {ndim} exceeds maximum {MAX_NDIM}"),
            offset,
        ));
    }
    Ok(())
}

/// Serializes a tensor into SVTF bytes.
pub fn encode(tensor: &Tensor) -> Result<Vec<u8>> {
    let shape = tensor.shape();
    check_ndim(shape.len(), 9)?;
    let payload_len = shape.iter().product::<usize>() * tensor.elem_size();
    let mut out = Vec::with_capacity(10 + shape.len() * 8 + payload_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(tensor.dtype_code());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match tensor {
        Tensor::F32(a) => {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Tensor::F64(a) => {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Tensor::U8(a) => out.extend(a.iter().copied()),
    }
    Ok(out)
}

/// Parses SVTF bytes back into a tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let need = |n: usize, at: u64, what: &str| -> Result<()> {
        if bytes.len() < at as usize + n {
            Err(format_err(
                format!(
                    "truncated {what}: expected {} bytes, file has {}",
                    at as usize + n,
                    bytes.len()
                ),
                at,
            ))
        } else {
            Ok(())
        }
    };

    need(4, 0, "magic")?;
    if bytes[0..4] != MAGIC {
        return Err(format_err(
            format!("bad magic {:02x?}, expected {:02x?}", &bytes[0..4], MAGIC),
            0,
        ));
    }
    need(4, 4, "version")?;
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}"), 4));
    }
    need(2, 8, "dtype/ndim")?;
    let dtype = bytes[8];
    let ndim = bytes[9] as usize;
    check_ndim(ndim, 9)?;
    let mut dims = Vec::with_capacity(ndim);
    let mut off = 10usize;
    for _ in 0..ndim {
        need(8, off as u64, "dims")?;
        dims.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize);
        off += 8;
    }
    let count: usize = dims.iter().product();
    let elem = match dtype {
        0 => 4,
        1 => 8,
        2 => 1,
        other => return Err(format_err(format!("unknown dtype code {other}"), 8)),
    };
    let expected = count * elem;
    if bytes.len() - off != expected {
        return Err(format_err(
            format!(
                "truncated payload: expected {expected} payload bytes, found {}",
                bytes.len() - off
            ),
            off as u64,
        ));
    }
    let payload = &bytes[off..];
    let tensor = match dtype {
        0 => {
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::F32(ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap())
        }
        1 => {
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::F64(ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap())
        }
        _ => Tensor::U8(ArrayD::from_shape_vec(IxDyn(&dims), payload.to_vec()).unwrap()),
    };
    Ok(tensor)
}

pub fn write(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let bytes = encode(tensor)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn header_layout_is_exact_for_f32_2x3() {
        let t = Tensor::F32(
            Array::from_shape_vec(IxDyn(&[2, 3]), vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        );
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[0..4], b"SVTF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 0); // dtype f32
        assert_eq!(bytes[9], 2); // ndim
        assert_eq!(&bytes[10..18], &2u64.to_le_bytes());
        assert_eq!(&bytes[18..26], &3u64.to_le_bytes());
        assert_eq!(bytes.len(), 26 + 24); // 24 payload bytes
    }

    #[test]
    fn roundtrip_is_bitwise_identical() {
        let mut rng = crate::rng::stream(11, "svtf", 0);
        let mut data = vec![0f32; 6];
        crate::rng::fill_normal(&mut rng, &mut data);
        let t = Tensor::F32(Array::from_shape_vec(IxDyn(&[2, 3]), data).unwrap());
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(t, back);
        let bytes2 = encode(&back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn truncated_payload_reports_expected_vs_actual() {
        let t = Tensor::F32(Array::from_shape_vec(IxDyn(&[2, 3]), vec![0.5f32; 6]).unwrap());
        let mut bytes = encode(&t).unwrap();
        bytes.truncate(bytes.len() - 5);
        let err = decode(&bytes).unwrap_err();
        match err {
            Error::Format { msg, offset } => {
                assert_eq!(offset, 26);
                assert!(msg.contains("24"), "message should carry expected length: {msg}");
                assert!(msg.contains("19"), "message should carry actual length: {msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_unknown_dtype_are_rejected() {
        let t = Tensor::U8(Array::from_shape_vec(IxDyn(&[4]), vec![1, 2, 3, 4]).unwrap());
        let good = encode(&t).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode(&bad_magic),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut bad_dtype = good;
        bad_dtype[8] = 9;
        assert!(matches!(
            decode(&bad_dtype),
            Err(Error::Format { offset: 8, .. })
        ));
    }
}
