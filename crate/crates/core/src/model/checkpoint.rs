//! Binary checkpoint format.
//!
//! ```text
//! 8 bytes   magic "LSEGCKPT"
//! u32 LE    format version
//! u32 LE    header length in bytes
//! header    UTF-8 JSON: {"unet": .., "classifier": .., "params": [{"name", "shape"}, ..]}
//! payload   every parameter in header order, little-endian f32
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{param_layout, ClassifierConfig, ModelError, ModelWeights, UNetConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    unet: UNetConfig,
    classifier: Option<ClassifierConfig>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn weights_to_bytes(w: &ModelWeights) -> Vec<u8> {
    let header = Header {
        unet: w.unet,
        classifier: w.head,
        params: w.iter().map(|(name, t)| ParamEntry { name: name.into(), shape: t.shape().to_vec() }).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 4 * w.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in w.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(ModelError::UnexpectedEof(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn weights_from_bytes(buf: &[u8]) -> Result<ModelWeights, ModelError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Version(version));
    }
    let len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| ModelError::Header(e.to_string()))?;
    header.unet.validate()?;

    let layout = param_layout(&header.unet, header.classifier.as_ref());
    for spec in &layout {
        match header.params.iter().find(|p| p.name == spec.name) {
            None => return Err(ModelError::Header(format!("missing parameter `{}`", spec.name))),
            Some(p) if p.shape != spec.shape => {
                return Err(ModelError::ShapeMismatch {
                    name: spec.name.clone(),
                    found: p.shape.clone(),
                    expected: spec.shape.clone(),
                })
            }
            Some(_) => {}
        }
    }
    if header.params.len() != layout.len() {
        let extra = header.params.iter().find(|p| !layout.iter().any(|s| s.name == p.name));
        return Err(ModelError::Header(match extra {
            Some(p) => format!("unexpected parameter `{}`", p.name),
            None => "duplicate parameter entries".into(),
        }));
    }

    let mut params = IndexMap::with_capacity(header.params.len());
    for p in header.params {
        let n: usize = p.shape.iter().product();
        let raw = r.take(4 * n, "parameter data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.insert(p.name, Tensor::new(p.shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(ModelError::Header(format!("{} trailing bytes after parameter data", buf.len() - r.pos)));
    }
    ModelWeights::from_parts(header.unet, header.classifier, params)
}

pub fn save_weights(path: &Path, w: &ModelWeights) -> Result<(), ModelError> {
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, weights_to_bytes(w)).map_err(io)
}

pub fn load_weights(path: &Path) -> Result<ModelWeights, ModelError> {
    let buf = fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    weights_from_bytes(&buf)
}
