//! Binary model files.
//!
//! Layout: the 8-byte magic `EGOGRAPH`, a little-endian `u32` format
//! version, a `u64` length and that many bytes of UTF-8 TOML header, then
//! every parameter tensor in [`Model::params`] order and every running
//! batch-norm buffer, each as raw little-endian `f64` values. Tensor shapes
//! are implied by the header.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EGOGRAPH";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    num_classes: usize,
    node_budget: usize,
    config: ModelConfig,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                path: PathBuf::from("<model bytes>"),
                msg: format!("model file truncated at byte {}", self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, dst: &mut [f64]) -> Result<()> {
        let raw = self.take(dst.len() * 8)?;
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        path: PathBuf::from("<model bytes>"),
        msg: msg.into(),
    }
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = toml::to_string(&Header {
            num_classes: self.num_classes,
            node_budget: self.node_budget,
            config: self.config.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for n in &self.stack.norms {
            for v in n.mean.iter().chain(&n.var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(format_err("not an egograph model file"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err(format!(
                "unsupported model format version {version}"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| format_err("header length overflows"))?;
        let text =
            std::str::from_utf8(r.take(len)?).map_err(|_| format_err("header is not UTF-8"))?;
        let header: Header =
            toml::from_str(text).map_err(|e| format_err(format!("bad header: {e}")))?;
        let mut model = Model::build(&header.config, header.num_classes, header.node_budget, 0)?;
        for t in model.params_mut() {
            r.f64s(t.data_mut())?;
        }
        for n in &mut model.stack.norms {
            r.f64s(&mut n.mean)?;
            r.f64s(&mut n.var)?;
        }
        if r.pos != bytes.len() {
            return Err(format_err(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}
