//! Portable little-endian weight container (`STWB`).
//!
//! Layout:
//!
//! ```text
//! "STWB"            4 bytes magic
//! version           u32 (= 1)
//! entry count       u32
//! per entry:
//!   tag length      u32
//!   tag             UTF-8
//!   rank            u8
//!   dims            u64 * rank
//!   data            f32 * product(dims)
//! metadata length   u32
//! metadata          UTF-8 JSON {"means": [...], "scales": [...]}
//! ```
//!
//! Layer parameters are stored as two entries, `<tag>.weight` and
//! `<tag>.bias`. Entry order and the metadata text are kept verbatim so that
//! saving a loaded store reproduces the original bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STWB";
pub const FORMAT_VERSION: u32 = 1;

/// Per-channel input normalization: `(x - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub means: Vec<f32>,
    pub scales: Vec<f32>,
}

impl Preprocess {
    pub fn uniform(channels: usize, mean: f32, scale: f32) -> Self {
        Preprocess {
            means: vec![mean; channels],
            scales: vec![scale; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.means.len() != channels || self.scales.len() != channels {
            return Err(Error::InvalidConfig(format!(
                "preprocessing has {} means and {} scales for {channels} channels",
                self.means.len(),
                self.scales.len()
            )));
        }
        if self.scales.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidConfig("preprocessing scales must be positive".into()));
        }
        Ok(())
    }
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess::uniform(3, 0.5, 0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    entries: Vec<(String, Tensor)>,
    metadata: Preprocess,
    metadata_json: String,
}

impl WeightStore {
    pub fn new(metadata: Preprocess) -> Self {
        let metadata_json = serde_json::to_string(&metadata).expect("preprocess serializes");
        WeightStore {
            entries: Vec::new(),
            metadata,
            metadata_json,
        }
    }

    pub fn version(&self) -> u32 {
        FORMAT_VERSION
    }

    pub fn metadata(&self) -> &Preprocess {
        &self.metadata
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Appends or replaces a raw entry.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn insert_layer(&mut self, tag: &str, weights: Tensor, bias: Tensor) {
        self.insert(format!("{tag}.weight"), weights);
        self.insert(format!("{tag}.bias"), bias);
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn layer(&self, tag: &str) -> Option<(&Tensor, &Tensor)> {
        Some((
            self.tensor(&format!("{tag}.weight"))?,
            self.tensor(&format!("{tag}.bias"))?,
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata_json.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("missing STWB magic header".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32("tag length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tag")?)
                .map_err(|_| Error::Format("tag is not valid UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            if rank == 0 {
                return Err(Error::Format(format!("entry `{name}` has rank 0")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64("dims")?;
                dims.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| Error::Format(format!("entry `{name}` is too large")))?;
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(dims, data).map_err(|e| Error::Format(format!("entry `{name}`: {e}")))?;
            entries.push((name, tensor));
        }
        let len = r.u32("metadata length")? as usize;
        let metadata_json = std::str::from_utf8(r.take(len, "metadata")?)
            .map_err(|_| Error::Format("metadata is not valid UTF-8".into()))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after metadata",
                bytes.len() - r.pos
            )));
        }
        let metadata: Preprocess = serde_json::from_str(&metadata_json)
            .map_err(|e| Error::Format(format!("bad metadata json: {e}")))?;
        Ok(WeightStore {
            entries,
            metadata,
            metadata_json,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated file while reading {what} at byte {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
