//! Minimal binary container for named `f64` tensors.
//!
//! Layout (little endian):
//! `magic[4] | version u32 | header_len u64 | header JSON | count u32 |`
//! then per tensor `name_len u32 | name | ndim u32 | dims u64* | data f64*`.
//! The header is an arbitrary JSON document owned by the caller.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }
}

pub fn write_container<W: Write>(
    mut w: W,
    magic: &[u8; 4],
    header: &serde_json::Value,
    tensors: &[NamedTensor],
) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(header)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a container written by [`write_container`]; rejects other magics and
/// unknown versions.
pub fn read_container<R: Read>(mut r: R, magic: &[u8; 4]) -> Result<(serde_json::Value, Vec<NamedTensor>)> {
    let data_err = |e: std::io::Error| Error::Data(format!("truncated tensor container: {e}"));
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(data_err)?;
    if &m != magic {
        return Err(Error::Data(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(&mut r).map_err(data_err)?;
    if version != CONTAINER_VERSION {
        return Err(Error::Data(format!(
            "unsupported container version {version} (this build reads {CONTAINER_VERSION})"
        )));
    }
    let header_len = read_u64(&mut r).map_err(data_err)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(data_err)?;
    let header: serde_json::Value = serde_json::from_slice(&header)?;
    let count = read_u32(&mut r).map_err(data_err)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r).map_err(data_err)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(data_err)?;
        let name = String::from_utf8(name).map_err(|_| Error::Data("tensor name is not utf-8".into()))?;
        let ndim = read_u32(&mut r).map_err(data_err)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(data_err)?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(data_err)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    Ok((header, tensors))
}

/// Writes to `path` through a temporary file and rename.
pub fn save_container(path: &Path, magic: &[u8; 4], header: &serde_json::Value, tensors: &[NamedTensor]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_container(&mut w, magic, header, tensors).map_err(|e| Error::io(&tmp, e))?;
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: &Path, magic: &[u8; 4]) -> Result<(serde_json::Value, Vec<NamedTensor>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_container(std::io::BufReader::new(file), magic)
}

/// Hex SHA-256 of the compact JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let tensors = vec![
            NamedTensor::new("a", vec![2, 3], (0..6).map(f64::from).collect()).unwrap(),
            NamedTensor::new("b.weight", vec![1], vec![-0.5]).unwrap(),
        ];
        let header = serde_json::json!({"step": 7});
        let mut buf = Vec::new();
        write_container(&mut buf, b"TEST", &header, &tensors).unwrap();
        let (h, back) = read_container(buf.as_slice(), b"TEST").unwrap();
        assert_eq!(h, header);
        assert_eq!(back, tensors);
    }

    #[test]
    fn rejects_unknown_version_and_magic() {
        let mut buf = Vec::new();
        write_container(&mut buf, b"TEST", &serde_json::json!({}), &[]).unwrap();
        assert!(read_container(buf.as_slice(), b"NOPE").is_err());
        buf[4] = 99;
        let err = read_container(buf.as_slice(), b"TEST").unwrap_err();
        assert!(err.to_string().contains("version 99"));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(NamedTensor::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }
}
