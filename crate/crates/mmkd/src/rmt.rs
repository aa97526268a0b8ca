//! `RMT1` raw tensor files.
//!
//! Layout: 4-byte magic `RMT1`; u8 dtype code (0 = f32, 1 = u8, 2 = f64);
//! u8 rank; rank x u32 little-endian dims; raw little-endian payload.
//! Dataset tensors use f32/u8; the f64 code exists for checkpoints, where
//! training must resume bit-exactly.

use ndarray::{ArrayD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MmkdError, Result};

pub const MAGIC: &[u8; 4] = b"RMT1";

#[derive(Debug, Clone, PartialEq)]
pub enum RmtData {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
    F64(ArrayD<f64>),
}

impl RmtData {
    pub fn dtype_code(&self) -> u8 {
        match self {
            RmtData::F32(_) => 0,
            RmtData::U8(_) => 1,
            RmtData::F64(_) => 2,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            RmtData::F32(a) => a.shape(),
            RmtData::U8(a) => a.shape(),
            RmtData::F64(a) => a.shape(),
        }
    }

    pub fn as_f32(&self) -> Option<&ArrayD<f32>> {
        match self {
            RmtData::F32(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&ArrayD<u8>> {
        match self {
            RmtData::U8(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&ArrayD<f64>> {
        match self {
            RmtData::F64(a) => Some(a),
            _ => None,
        }
    }
}

/// Writes one tensor record to `w`.
pub fn write_record<W: Write>(w: &mut W, data: &RmtData, path: &Path) -> Result<()> {
    let io = |e| MmkdError::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&[data.dtype_code()]).map_err(io)?;
    let shape = data.shape();
    if shape.len() > u8::MAX as usize {
        return Err(MmkdError::Contract(format!(
            "tensor rank {} exceeds format limit",
            shape.len()
        )));
    }
    w.write_all(&[shape.len() as u8]).map_err(io)?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    }
    match data {
        RmtData::F32(a) => {
            for &v in a.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        RmtData::U8(a) => {
            for &v in a.iter() {
                w.write_all(&[v]).map_err(io)?;
            }
        }
        RmtData::F64(a) => {
            for &v in a.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    Ok(())
}

/// Reads one tensor record from `r`. `path` is used for error reporting only.
pub fn read_record<R: Read>(r: &mut R, path: &Path) -> Result<RmtData> {
    let mut magic = [0u8; 4];
    read_exact_field(r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(MmkdError::format(
            path,
            "magic",
            format!("expected RMT1, got {:?}", magic),
        ));
    }
    let mut b = [0u8; 1];
    read_exact_field(r, &mut b, path, "dtype")?;
    let dtype = b[0];
    read_exact_field(r, &mut b, path, "rank")?;
    let rank = b[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        read_exact_field(r, &mut d, path, "dims")?;
        dims.push(u32::from_le_bytes(d) as usize);
    }
    let count: usize = dims.iter().product();
    match dtype {
        0 => {
            let mut buf = vec![0u8; count * 4];
            read_exact_field(r, &mut buf, path, "payload length")?;
            let vals: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(RmtData::F32(
                ArrayD::from_shape_vec(IxDyn(&dims), vals).unwrap(),
            ))
        }
        1 => {
            let mut buf = vec![0u8; count];
            read_exact_field(r, &mut buf, path, "payload length")?;
            Ok(RmtData::U8(
                ArrayD::from_shape_vec(IxDyn(&dims), buf).unwrap(),
            ))
        }
        2 => {
            let mut buf = vec![0u8; count * 8];
            read_exact_field(r, &mut buf, path, "payload length")?;
            let vals: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(RmtData::F64(
                ArrayD::from_shape_vec(IxDyn(&dims), vals).unwrap(),
            ))
        }
        other => Err(MmkdError::format(
            path,
            "dtype",
            format!("unknown dtype code {other}"),
        )),
    }
}

fn read_exact_field<R: Read>(r: &mut R, buf: &mut [u8], path: &Path, field: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| MmkdError::format(path, field, e.to_string()))
}

pub fn write_file(path: &Path, data: &RmtData) -> Result<()> {
    let f = File::create(path).map_err(|e| MmkdError::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_record(&mut w, data, path)?;
    w.flush().map_err(|e| MmkdError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<RmtData> {
    let f = File::open(path).map_err(|e| MmkdError::io(path, e))?;
    let mut r = BufReader::new(f);
    let data = read_record(&mut r, path)?;
    // A tensor file holds exactly one record.
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(data),
        Ok(_) => Err(MmkdError::format(path, "payload length", "trailing bytes")),
        Err(e) => Err(MmkdError::io(path, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use std::path::PathBuf;

    fn roundtrip(data: RmtData) -> RmtData {
        let mut buf = Vec::new();
        let p = PathBuf::from("<mem>");
        write_record(&mut buf, &data, &p).unwrap();
        read_record(&mut &buf[..], &p).unwrap()
    }

    #[test]
    fn roundtrip_f32_and_u8() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.5f32, -1.0, 3.25, 0.0, 9.0, 2.5])
            .unwrap();
        assert_eq!(roundtrip(RmtData::F32(a.clone())), RmtData::F32(a));
        let b = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0u8, 255, 7, 1]).unwrap();
        assert_eq!(roundtrip(RmtData::U8(b.clone())), RmtData::U8(b));
    }

    #[test]
    fn bad_magic_is_named() {
        let p = PathBuf::from("<mem>");
        let buf = b"XXXX\x00\x01\x01\x00\x00\x00".to_vec();
        let err = read_record(&mut &buf[..], &p).unwrap_err();
        match err {
            MmkdError::Format { field, .. } => assert_eq!(field, "magic"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn truncated_payload_names_payload_length() {
        let p = PathBuf::from("<mem>");
        let a = ArrayD::from_shape_vec(IxDyn(&[8]), (0..8).map(|v| v as f32).collect()).unwrap();
        let mut buf = Vec::new();
        write_record(&mut buf, &RmtData::F32(a), &p).unwrap();
        buf.truncate(buf.len() - 5);
        let err = read_record(&mut &buf[..], &p).unwrap_err();
        match err {
            MmkdError::Format { field, .. } => assert_eq!(field, "payload length"),
            other => panic!("unexpected error: {other}"),
        }
    }
}
