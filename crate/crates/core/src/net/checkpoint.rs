//! Weight archive: 8-byte magic, little-endian u64 header length, a JSON
//! header, then every tensor as little-endian f64 in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{NetConfig, QualityNet};
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"PTLCKPT1";
pub const ARCHIVE_SCHEMA: &str = "ptloss.weights.v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    kind: String,
    config: Value,
    #[serde(default)]
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded archive contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Result<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }
}

pub fn write_archive(
    path: &Path,
    kind: &str,
    config: Value,
    meta: Value,
    tensors: &[(String, &[f64])],
) -> Result<()> {
    let header = Header {
        schema: ARCHIVE_SCHEMA.into(),
        kind: kind.into(),
        config,
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                len: t.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != ARCHIVE_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a weight archive", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.schema != ARCHIVE_SCHEMA {
        return Err(Error::Checkpoint(format!("unsupported schema `{}`", header.schema)));
    }
    let mut pos = 16 + hlen;
    let mut tensors = Vec::new();
    for e in header.tensors {
        let end = pos + 8 * e.len;
        let raw = bytes
            .get(pos..end)
            .ok_or_else(|| Error::Checkpoint(format!("truncated payload at `{}`", e.name)))?;
        tensors.push((e.name, raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()));
        pos = end;
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(Archive {
        kind: header.kind,
        config: header.config,
        meta: header.meta,
        tensors,
    })
}

impl QualityNet {
    pub fn save(&self, path: &Path, meta: Value) -> Result<()> {
        let tensors: Vec<(String, &[f64])> = self.tensors().into_iter().map(|(n, t)| (n, t.as_slice())).collect();
        write_archive(path, "quality_net", serde_json::to_value(&self.config)?, meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<(QualityNet, Value)> {
        let archive = read_archive(path)?;
        if archive.kind != "quality_net" {
            return Err(Error::Checkpoint(format!("archive holds `{}`, not quality_net", archive.kind)));
        }
        let config: NetConfig = serde_json::from_value(archive.config.clone())?;
        let mut net = QualityNet::zeros(&config)?;
        let by_name: BTreeMap<&str, &Vec<f64>> = archive.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if by_name.len() != net.tensors().len() {
            return Err(Error::Checkpoint("tensor count does not match config".into()));
        }
        for (name, dst) in net.tensors_mut() {
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.len() != dst.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has {} values, expected {}", src.len(), dst.len())));
            }
            dst.copy_from_slice(src);
        }
        Ok((net, archive.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let net = QualityNet::new(&NetConfig::small(), 5).unwrap();
        net.save(&path, serde_json::json!({"epoch": 3})).unwrap();
        let (back, meta) = QualityNet::load(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta["epoch"], 3);
        assert_eq!(&fs::read(&path).unwrap()[..8], ARCHIVE_MAGIC);
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        QualityNet::new(&NetConfig::small(), 5).unwrap().save(&path, Value::Null).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(QualityNet::load(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"garbage-bytes-here").unwrap();
        assert!(matches!(QualityNet::load(&path), Err(Error::Checkpoint(_))));
        write_archive(&path, "toy_inr", Value::Null, Value::Null, &[]).unwrap();
        assert!(matches!(QualityNet::load(&path), Err(Error::Checkpoint(_))));
    }
}
