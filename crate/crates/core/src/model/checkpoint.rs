//! Versioned checkpoint files.
//!
//! Layout: the ASCII line `beamvision-ckpt-v1\n`, a little-endian `u64`
//! header length, a JSON header (specs, trainable mask, tensor table,
//! checksum, free-form metadata), then every tensor as little-endian `f64`
//! in the header's order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, BackboneSpec, HeadSpec, VisionModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "beamvision-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    backbone: BackboneSpec,
    heads: HeadSpec,
    trainable: BTreeMap<String, bool>,
    tensors: Vec<TensorEntry>,
    checksum: String,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// A model plus caller metadata (stage name, metrics, ...).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: VisionModel,
    pub metadata: serde_json::Value,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn save_checkpoint(path: &Path, model: &VisionModel, metadata: serde_json::Value) -> Result<()> {
    let tensors = model.params.tensors();
    let mut data = Vec::with_capacity(model.total_params() * 8);
    for t in &tensors {
        for v in t.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format: CHECKPOINT_FORMAT.to_string(),
        backbone: model.backbone.clone(),
        heads: model.heads,
        trainable: model.trainable_mask(),
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                group: t.group.to_string(),
                name: t.name.to_string(),
                len: t.data.len(),
            })
            .collect(),
        checksum: format!("{:016x}", fnv1a(&data)),
        metadata,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(CHECKPOINT_FORMAT.len() + 9 + header.len() + data.len());
    bytes.extend_from_slice(CHECKPOINT_FORMAT.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&data);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; any structural problem is reported as a load error
/// naming the file.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let fail = |message: String| Error::Load {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    let magic_len = CHECKPOINT_FORMAT.len() + 1;
    if bytes.len() < magic_len + 8 || &bytes[..magic_len - 1] != CHECKPOINT_FORMAT.as_bytes() {
        return Err(fail("missing beamvision-ckpt-v1 signature".into()));
    }
    let hlen = u64::from_le_bytes(bytes[magic_len..magic_len + 8].try_into().expect("8 bytes")) as usize;
    let hstart = magic_len + 8;
    let hend = hstart
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[hstart..hend]).map_err(|e| fail(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(fail(format!("unsupported format '{}'", header.format)));
    }
    let data = &bytes[hend..];
    if format!("{:016x}", fnv1a(data)) != header.checksum {
        return Err(fail("checksum mismatch".into()));
    }

    let mut backbone = header.backbone.clone();
    backbone.pretrained_ref = None;
    backbone.kind = super::BackboneKind::TinyTransformer;
    let mut model = build_model(&backbone, &header.heads, 0).map_err(|e| fail(e.to_string()))?;
    model.backbone = header.backbone;

    let mut offset = 0;
    {
        let mut tensors = model.params.tensors_mut();
        if tensors.len() != header.tensors.len() {
            return Err(fail("tensor table does not match the architecture".into()));
        }
        for (t, entry) in tensors.iter_mut().zip(&header.tensors) {
            if entry.len != t.data.len() || entry.name != t.name || entry.group != t.group.to_string() {
                return Err(fail(format!("unexpected tensor {}/{}", entry.group, entry.name)));
            }
            let end = offset + 8 * entry.len;
            if end > data.len() {
                return Err(fail("truncated tensor data".into()));
            }
            for (v, chunk) in t.data.iter_mut().zip(data[offset..end].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            offset = end;
        }
    }
    if offset != data.len() {
        return Err(fail("trailing bytes after tensor data".into()));
    }
    for (name, trainable) in &header.trainable {
        model
            .set_block_trainable(&[name.as_str()], *trainable)
            .map_err(|e| fail(e.to_string()))?;
    }
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<VisionModel> {
    read_checkpoint(path).map(|c| c.model)
}
