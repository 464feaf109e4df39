//! Checkpoints of both networks.
//!
//! `name.ckpt` is a named-tensor archive: the magic `DTMLCKPT`, a `u32`
//! tensor count, then per tensor a `u32` name length, the UTF-8 name, a `u32`
//! rank, `u32` dims and the values as `f32`, all little-endian. Tensors of the
//! segmentation network are prefixed `seg/`, those of the distance network
//! `dis/`. The sidecar `name.json` records the architecture, the iteration and
//! a SHA-256 of the archive.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DtmlError, Result};
use crate::nn::{build_backbone, ArchDescriptor, NetworkParams};

const MAGIC: &[u8; 8] = b"DTMLCKPT";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seg: NetworkParams,
    pub dis: NetworkParams,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub descriptor: ArchDescriptor,
    pub iteration: usize,
    pub archive_sha256: String,
}

fn meta_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = MAGIC.to_vec();
    let named: Vec<_> = [("seg", &ckpt.seg), ("dis", &ckpt.dis)]
        .into_iter()
        .flat_map(|(p, net)| net.tensors.iter().map(move |t| (format!("{p}/{}", t.name), t)))
        .collect();
    put_u32(&mut buf, named.len());
    for (name, t) in named {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape.len());
        t.shape.iter().for_each(|&d| put_u32(&mut buf, d));
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        let b = self.take(4)?;
        Some(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

type Named = Vec<(String, Vec<usize>, Vec<f64>)>;

fn decode(bytes: &[u8]) -> Option<Named> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return None;
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).ok()?;
        let rank = r.u32()?;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Option<_>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(4)?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, shape, data));
    }
    (r.pos == bytes.len()).then_some(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    /// Writes the archive and sidecar. Values are stored as `f32`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.seg.descriptor != self.dis.descriptor {
            return Err(DtmlError::InvalidDescriptor(
                "both networks must share one descriptor".into(),
            ));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| DtmlError::io(dir, e))?;
        }
        let bytes = encode(self);
        fs::write(path, &bytes).map_err(|e| DtmlError::io(path, e))?;
        let meta = CheckpointMeta {
            descriptor: self.seg.descriptor,
            iteration: self.iteration,
            archive_sha256: sha256_hex(&bytes),
        };
        let side = meta_path(path);
        fs::write(&side, serde_json::to_string_pretty(&meta).expect("meta serializes"))
            .map_err(|e| DtmlError::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DtmlError::MissingCheckpoint(path.to_path_buf()));
        }
        let side = meta_path(path);
        let text = fs::read_to_string(&side).map_err(|e| DtmlError::io(&side, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| DtmlError::format(&side, e))?;
        let bytes = fs::read(path).map_err(|e| DtmlError::io(path, e))?;
        if sha256_hex(&bytes) != meta.archive_sha256 {
            return Err(DtmlError::format(path, "archive does not match its checksum"));
        }
        let named = decode(&bytes).ok_or_else(|| DtmlError::format(path, "truncated archive"))?;
        let mut seg = build_backbone(meta.descriptor, 0)?;
        let mut dis = seg.clone();
        let expected = seg.tensors.len() + dis.tensors.len();
        if named.len() != expected {
            return Err(DtmlError::format(
                path,
                format!("expected {expected} tensors, found {}", named.len()),
            ));
        }
        let slots = [("seg/", &mut seg), ("dis/", &mut dis)];
        let mut it = named.into_iter();
        for (prefix, net) in slots {
            for t in &mut net.tensors {
                let (name, shape, data) = it.next().expect("count checked");
                if name.strip_prefix(prefix) != Some(t.name.as_str()) || shape != t.shape {
                    return Err(DtmlError::format(
                        path,
                        format!("tensor {name} {shape:?} where {prefix}{} {:?} was expected", t.name, t.shape),
                    ));
                }
                t.data = data;
            }
        }
        Ok(Self {
            seg,
            dis,
            iteration: meta.iteration,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let d = ArchDescriptor {
            levels: 2,
            base_width: 4,
            ..Default::default()
        };
        Checkpoint {
            seg: build_backbone(d, 1).unwrap(),
            dis: build_backbone(d, 2).unwrap(),
            iteration: 17,
        }
    }

    #[test]
    fn round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.iteration, 17);
        assert_eq!(back.seg, c.seg.rounded_to_f32());
        assert_eq!(back.dis, c.dis.rounded_to_f32());
    }

    #[test]
    fn missing_archive() {
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/m.ckpt")),
            Err(DtmlError::MissingCheckpoint(_))
        ));
    }

    #[test]
    fn corrupted_archive_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        sample().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(DtmlError::Format { .. })));
    }
}
