//! Tensor dictionary file: a flat sequence of records, each
//! `u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 payload`,
//! all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(records: &[TensorRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for &d in &r.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Vec<TensorRecord>> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
        match end {
            Some(end) => {
                let s = &bytes[pos..end];
                pos = end;
                Ok(s)
            }
            None => Err(Error::corrupt(origin, format!("truncated {what} at byte {pos}"))),
        }
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
    let mut out = Vec::new();
    loop {
        let head = take(4, "name length");
        let Ok(head) = head else {
            break;
        };
        let name_len = u32_at(head);
        let name = std::str::from_utf8(take(name_len, "name")?)
            .map_err(|_| Error::corrupt(origin, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = u32_at(take(4, "rank")?);
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32_at(take(4, "dims")?));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::corrupt(origin, format!("{name}: size overflow")))?;
        let payload = take(numel * 4, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(TensorRecord { name, dims, data });
    }
    if pos != bytes.len() {
        return Err(Error::corrupt(origin, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}

pub fn write_file(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(records)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<TensorRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let recs = vec![
            TensorRecord {
                name: "h.0.ln_1.weight".into(),
                dims: vec![4],
                data: vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0],
            },
            TensorRecord {
                name: "scalar".into(),
                dims: vec![],
                data: vec![3.0],
            },
        ];
        let bytes = encode(&recs);
        assert_eq!(decode(&bytes, Path::new("x")).unwrap(), recs);
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(decode(cut, Path::new("x")), Err(Error::CorruptRecord { .. })));
    }
}
