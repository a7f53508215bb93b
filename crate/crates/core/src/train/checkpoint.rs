//! LDCK checkpoint file: magic `LDCK`, u16 version, little-endian, named
//! tensors, trailing CRC32 of everything before it.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"LDCK";
const VERSION: u16 = 1;
/// Reserved name holding the training stage that produced the file.
pub const STAGE_TENSOR: &str = "meta.stage";

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("LDCK: {}", msg.into()))
}

/// Training stage recorded in a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    EdgeGnn = 1,
    Policy = 2,
    Success = 3,
}

impl Stage {
    fn from_value(v: f32) -> Result<Self> {
        match v {
            1.0 => Ok(Stage::EdgeGnn),
            2.0 => Ok(Stage::Policy),
            3.0 => Ok(Stage::Success),
            _ => Err(bad(format!("unknown stage marker {v}"))),
        }
    }
}

/// Ordered named tensors plus the stage marker.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_stores(stage: Stage, stores: &[&ParamStore]) -> Self {
        let tensors = stores
            .iter()
            .flat_map(|s| s.iter().map(|p| (p.name.clone(), p.value.clone())))
            .collect();
        Self { stage, tensors }
    }

    /// Copies every tensor into the parameter of the same name. Each store
    /// parameter must be present with the same shape and every checkpoint
    /// tensor must land somewhere; nothing is modified on error.
    pub fn restore(&self, stores: &mut [&mut ParamStore]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for store in stores.iter() {
            for p in store.iter() {
                let (_, t) = self
                    .tensors
                    .iter()
                    .find(|(n, _)| *n == p.name)
                    .ok_or_else(|| Error::MissingTensor(p.name.clone()))?;
                if t.shape() != p.value.shape() {
                    return Err(bad(format!(
                        "tensor `{}` has shape {:?}, model expects {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                }
                seen.insert(p.name.as_str());
            }
        }
        if let Some((n, _)) = self.tensors.iter().find(|(n, _)| !seen.contains(n.as_str())) {
            return Err(Error::UnknownTensor(n.clone()));
        }
        for store in stores.iter_mut() {
            for (name, t) in &self.tensors {
                if let Some(id) = store.id(name) {
                    store.get_mut(id).value = t.clone();
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len() + 1).map_err(|_| bad("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        let stage = Tensor::full(&[1], self.stage as u8 as f32);
        for (name, t) in std::iter::once((STAGE_TENSOR, &stage)).chain(self.tensors.iter().map(|(n, t)| (n.as_str(), t))) {
            let len = u32::try_from(name.len()).map_err(|_| bad("name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.shape().len()).map_err(|_| bad("rank too large"))?);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| bad("extent too large"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 + 2 + 4 + 4 {
            return Err(bad("file is truncated"));
        }
        if &buf[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let version = u16::from_le_bytes([body[4], body[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        if crc32fast::hash(body) != stored {
            return Err(bad("checksum mismatch"));
        }
        let mut pos = 6;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos + n;
            if end > body.len() {
                return Err(bad("file is truncated"));
            }
            let s = &body[pos..end];
            pos = end;
            Ok(s)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let count = u32_at(take(4)?);
        let mut stage = None;
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for _ in 0..count {
            let len = u32_at(take(4)?);
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(take(4)?));
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("extent overflow"))?;
            let bytes = take(n.checked_mul(4).ok_or_else(|| bad("extent overflow"))?)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            if name == STAGE_TENSOR {
                stage = Some(Stage::from_value(t.data().first().copied().unwrap_or(0.0))?);
            } else if tensors.iter().any(|(n, _)| *n == name) {
                return Err(bad(format!("duplicate tensor `{name}`")));
            } else {
                tensors.push((name, t));
            }
        }
        if pos != body.len() {
            return Err(bad("trailing bytes before the checksum"));
        }
        let stage = stage.ok_or_else(|| Error::MissingTensor(STAGE_TENSOR.into()))?;
        Ok(Self { stage, tensors })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        tmp_name.push(".tmp");
        let tmp = path.with_file_name(tmp_name);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
