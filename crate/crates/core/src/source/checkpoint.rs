//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "RPKT"
//! version  u16
//! meta_len u32, then meta_len bytes of UTF-8 JSON
//! count    u32, then per entry:
//!   name_len u16, name bytes
//!   dtype    u8   (1 = f32)
//!   ndim     u8,  then ndim x u32 dims
//!   data     product(dims) x f32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, SourceModel};
use crate::autodiff::{hex_sha256, ParamStore, Tensor};
use crate::dsp::MelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RPKT";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub params: ParamStore,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(field, "unexpected end of checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("json values serialize");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(p.value.ndim() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format("magic", "not an RPKT checkpoint"));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::format("metadata", e.to_string()))?;
        let count = r.u32("entry count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = usize::from(r.u16("entry name length")?);
            let name = std::str::from_utf8(r.take(name_len, "entry name")?)
                .map_err(|e| Error::format("entry name", e.to_string()))?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::format(format!("{name}.dtype"), format!("unknown dtype code {dtype}")));
            }
            let ndim = r.u8("ndim")?;
            let shape = (0..ndim)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel * 4, "data")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            params.add(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != buf.len() {
            return Err(Error::format("trailer", "unexpected bytes after last entry"));
        }
        Ok(Self { metadata, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceMeta {
    kind: String,
    model: ArchSpec,
    num_source_classes: usize,
    chunk_seconds: f64,
    mel: MelConfig,
    tap_layer: String,
    frozen: bool,
}

impl SourceModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = SourceMeta {
            kind: "source".into(),
            model: self.spec.clone(),
            num_source_classes: self.num_classes(),
            chunk_seconds: self.chunk_seconds(),
            mel: self.mel.clone(),
            tap_layer: self.tap_layer.clone(),
            frozen: self.is_frozen(),
        };
        Checkpoint {
            metadata: serde_json::to_value(meta).expect("metadata serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta: SourceMeta = serde_json::from_value(ckpt.metadata)
            .map_err(|e| Error::format("metadata", e.to_string()))?;
        if meta.kind != "source" {
            return Err(Error::format("metadata.kind", format!("expected `source`, got `{}`", meta.kind)));
        }
        let mut model = SourceModel {
            spec: meta.model,
            mel: meta.mel,
            tap_layer: meta.tap_layer,
            params: ckpt.params,
        };
        if model.num_classes() != meta.num_source_classes {
            return Err(Error::format("metadata.num_source_classes", "disagrees with head shape"));
        }
        if meta.frozen {
            model.freeze();
        }
        Ok(model)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn checksum(&self) -> String {
        hex_sha256(&self.to_checkpoint().to_bytes())
    }
}
