//! Binary checkpoint format: the magic bytes `MMLY1`, a little-endian `u64`
//! header length, a JSON header, then raw little-endian `f64` payloads.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MMLY1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tensors: Vec<TensorEntry>,
    /// Free-form snapshot of the configuration that produced the tensors.
    pub config: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, config: serde_json::Value) -> Result<()> {
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|(_, name, t)| {
            let e = TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
            offset += t.numel() * 8;
            e
        })
        .collect();
    let header = serde_json::to_vec(&CheckpointHeader { tensors, config })?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(offset);
    for (_, _, t) in store.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::Checkpoint("truncated header length".into()))?;
    let len = usize::try_from(u64::from_le_bytes(len))
        .map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let bytes = payload
            .get(e.offset..e.offset + n * 8)
            .ok_or_else(|| Error::Checkpoint(format!("payload too short for {}", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok((store, header.config))
}

pub fn save(path: &Path, store: &ParamStore, config: serde_json::Value) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), store, config)
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()).unwrap();
        s.insert("b", Tensor::new(vec![3], vec![std::f64::consts::PI, -2.5, 7.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s, serde_json::json!({"d": 4})).unwrap();
        assert_eq!(&buf[..5], b"MMLY1");
        let (back, cfg) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(cfg["d"], 4);
        for ((_, na, ta), (_, nb, tb)) in s.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(read_checkpoint(&b"NOPE1........"[..]).is_err());
        let mut buf = Vec::new();
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[4])).unwrap();
        write_checkpoint(&mut buf, &s, serde_json::Value::Null).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
