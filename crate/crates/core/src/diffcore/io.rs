//! HCT1 tensor files.
//!
//! Layout: the four magic bytes `HCT1`, an ASCII header line
//! `dtype=f32; shape=d0,d1,...;` terminated by `\n`, then the values as raw
//! little-endian floats in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DType, DiffError, Float, Tensor};

const MAGIC: &[u8; 4] = b"HCT1";

pub fn encode<T: Float>(t: &Tensor<T>) -> Vec<u8> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let header = format!("dtype={}; shape={};\n", T::DTYPE.name(), dims.join(","));
    let mut out = Vec::with_capacity(4 + header.len() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parses the header, returning dtype, shape and the payload offset.
fn parse_header(bytes: &[u8]) -> Result<(DType, Vec<usize>, usize), DiffError> {
    let bad = |msg: &str| DiffError::Format(msg.to_string());
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad("missing HCT1 magic"));
    }
    let nl = bytes[4..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("unterminated header line"))?;
    let line = std::str::from_utf8(&bytes[4..4 + nl]).map_err(|_| bad("header is not ASCII"))?;
    let mut dtype = None;
    let mut shape = None;
    for field in line.split(';').map(str::trim).filter(|f| !f.is_empty()) {
        let (key, val) = field.split_once('=').ok_or_else(|| bad("header field without '='"))?;
        match key.trim() {
            "dtype" => dtype = DType::parse(val.trim()),
            "shape" => {
                let dims: Result<Vec<usize>, _> = val
                    .split(',')
                    .map(str::trim)
                    .filter(|d| !d.is_empty())
                    .map(str::parse)
                    .collect();
                shape = Some(dims.map_err(|_| bad("shape extents must be integers"))?);
            }
            other => return Err(bad(&format!("unknown header field '{other}'"))),
        }
    }
    let dtype = dtype.ok_or_else(|| bad("dtype must be f32 or f64"))?;
    let shape = shape.ok_or_else(|| bad("missing shape"))?;
    Ok((dtype, shape, 4 + nl + 1))
}

pub fn decode<T: Float>(bytes: &[u8]) -> Result<Tensor<T>, DiffError> {
    let (dtype, shape, offset) = parse_header(bytes)?;
    let numel: usize = shape.iter().product();
    let payload = &bytes[offset..];
    if payload.len() != numel * dtype.size() {
        return Err(DiffError::Format(format!(
            "payload holds {} bytes, shape {:?} of {} needs {}",
            payload.len(),
            shape,
            dtype.name(),
            numel * dtype.size()
        )));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks_exact(4).map(|c| T::c(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::c(f64::read_le(c))).collect(),
    };
    Tensor::new(shape, data)
}

pub fn save<T: Float>(t: &Tensor<T>, path: &Path) -> Result<(), DiffError> {
    let mut f = fs::File::create(path).map_err(|e| DiffError::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| DiffError::io(path, e))
}

pub fn load<T: Float>(path: &Path) -> Result<Tensor<T>, DiffError> {
    let bytes = fs::read(path).map_err(|e| DiffError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_ascii_line() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode(&t);
        assert!(bytes.starts_with(b"HCT1dtype=f32; shape=2,3;\n"));
        assert_eq!(bytes.len(), 26 + 6 * 4);
        assert_eq!(&bytes[26..30], &1.0f32.to_le_bytes());
        assert_eq!(decode::<f32>(&bytes).unwrap(), t);
    }

    #[test]
    fn scalar_and_f64_round_trip() {
        let s = Tensor::<f64>::scalar(-2.5);
        assert_eq!(decode::<f64>(&encode(&s)).unwrap(), s);
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::<f32>::zeros(&[4]);
        let mut bytes = encode(&t);
        bytes.pop();
        assert!(matches!(decode::<f32>(&bytes), Err(DiffError::Format(_))));
        assert!(decode::<f32>(b"HCT0dtype=f32; shape=;\n").is_err());
    }
}
