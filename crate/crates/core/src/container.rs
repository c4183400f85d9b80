//! `PDYC` container: named tensor blocks, little-endian, CRC32 trailer.
//!
//! ```text
//! "PDYC" | u32 version | u32 block count
//! per block: u16 name length | name (UTF-8) | u32 ndim | u32 dims… | f64 data…
//! u32 CRC32 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"PDYC";
pub const VERSION: u32 = 1;

pub fn encode(blocks: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, t) in blocks {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("block name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Decoded blocks, preserving file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Blocks {
    order: Vec<String>,
    map: BTreeMap<String, Tensor>,
}

impl Blocks {
    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("missing block '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }
}

fn take<'a>(data: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if data.len() - *pos < n {
        return Err(Error::Format(format!("truncated at byte {pos}")));
    }
    let s = &data[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn u32_at(data: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(data, pos, 4)?.try_into().expect("4 bytes")))
}

pub fn decode(bytes: &[u8]) -> Result<Blocks> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    if bytes.len() < 16 {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let body = &bytes[..bytes.len() - 4];
    let mut pos = 4;
    let version = u32_at(body, &mut pos)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let stored = u32::from_le_bytes(bytes[body.len()..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let count = u32_at(body, &mut pos)? as usize;
    let mut order = Vec::with_capacity(count.min(1024));
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(body, &mut pos, 2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(take(body, &mut pos, len)?)
            .map_err(|_| Error::Format("block name is not UTF-8".into()))?
            .to_string();
        let ndim = u32_at(body, &mut pos)?;
        if ndim != 2 {
            return Err(Error::Format(format!("block '{name}' has {ndim} dimensions")));
        }
        let rows = u32_at(body, &mut pos)? as usize;
        let cols = u32_at(body, &mut pos)? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= body.len() - pos))
            .ok_or_else(|| Error::Format(format!("block '{name}' overruns the file")))?;
        let data = take(body, &mut pos, 8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(rows, cols, data).map_err(|e| Error::Format(format!("block '{name}': {e}")))?;
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate block '{name}'")));
        }
        order.push(name);
    }
    if pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - pos)));
    }
    Ok(Blocks { order, map })
}

pub fn write(path: &Path, blocks: &[(String, &Tensor)]) -> Result<()> {
    std::fs::write(path, encode(blocks)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Blocks> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("b/x".to_string(), Tensor::new(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap()),
            ("a".to_string(), Tensor::scalar(0.1)),
        ]
    }

    fn refs(v: &[(String, Tensor)]) -> Vec<(String, &Tensor)> {
        v.iter().map(|(n, t)| (n.clone(), t)).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let blocks = sample();
        let bytes = encode(&refs(&blocks)).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.names(), &["b/x".to_string(), "a".to_string()]);
        for (n, t) in &blocks {
            let got = back.get(n).unwrap();
            assert_eq!(got.shape(), t.shape());
            assert!(got.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let again: Vec<(String, Tensor)> = back.names().iter().map(|n| (n.clone(), back.get(n).unwrap())).collect();
        assert_eq!(encode(&refs(&again)).unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode(&refs(&sample())).unwrap();
        for i in [0, 5, 20, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(decode(&bad).is_err(), "flip at {i}");
        }
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"PDYC").is_err());
        assert!(decode(&bytes).unwrap().get("missing").is_err());
    }
}
