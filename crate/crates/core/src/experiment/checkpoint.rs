use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Shape, Tensor};

pub const CHECKPOINT_FORMAT: &str = "f64-le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: TensorKind,
    /// `[N, C, H, W]`.
    pub shape: [usize; 4],
    /// Element offset into the binary payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub tensors: Vec<ManifestEntry>,
}

fn entries(store: &ParamStore) -> Vec<(String, TensorKind, &Tensor)> {
    store
        .params()
        .map(|(n, t)| (n.clone(), TensorKind::Param, t))
        .chain(store.buffers().map(|(n, t)| (n.clone(), TensorKind::Buffer, t)))
        .collect()
}

/// Parameters then buffers, each in name order, as little-endian `f64`s.
pub fn encode_checkpoint(store: &ParamStore, config_hash: &str) -> (Vec<u8>, Manifest) {
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, kind, t) in entries(store) {
        tensors.push(ManifestEntry {
            name,
            kind,
            shape: t.shape().dims(),
            offset,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.numel();
    }
    (
        bytes,
        Manifest {
            format: CHECKPOINT_FORMAT.into(),
            config_hash: config_hash.into(),
            tensors,
        },
    )
}

/// Rebuilds a store shaped like `template`. Tensor names, kinds and shapes
/// must match the template one for one; the first disagreement is reported.
pub fn decode_checkpoint(bytes: &[u8], manifest: &Manifest, template: &ParamStore) -> Result<ParamStore> {
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Load(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Load(format!("payload of {} bytes is not a whole number of f64s", bytes.len())));
    }
    let expected = entries(template);
    let mut store = ParamStore::new();
    for (k, (name, kind, t)) in expected.iter().enumerate() {
        let Some(entry) = manifest.tensors.get(k) else {
            return Err(Error::Load(format!("tensor `{name}` is missing from the checkpoint")));
        };
        if &entry.name != name || entry.kind != *kind {
            return Err(Error::Load(format!(
                "tensor `{name}` expected at position {k}, checkpoint has `{}`",
                entry.name
            )));
        }
        let want = t.shape().dims();
        if entry.shape != want {
            return Err(Error::Load(format!(
                "tensor `{name}` has shape {:?} in the checkpoint, the network expects {want:?}",
                entry.shape
            )));
        }
        let n = t.numel();
        let range = 8 * entry.offset..8 * (entry.offset + n);
        let raw = bytes
            .get(range)
            .ok_or_else(|| Error::Load(format!("tensor `{name}` runs past the end of the payload")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let [a, b, c, d] = entry.shape;
        let value = Tensor::new(Shape::new(a, b, c, d), data)?;
        match kind {
            TensorKind::Param => store.insert(name.clone(), value),
            TensorKind::Buffer => store.insert_buffer(name.clone(), value),
        }
    }
    if let Some(extra) = manifest.tensors.get(expected.len()) {
        return Err(Error::Load(format!("tensor `{}` in the checkpoint is not part of the network", extra.name)));
    }
    Ok(store)
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint(dir: &Path, stem: &str, store: &ParamStore, config_hash: &str) -> Result<()> {
    let (bytes, manifest) = encode_checkpoint(store, config_hash);
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a checkpoint from its `.bin` path; the manifest sits beside it.
pub fn load_checkpoint(bin_path: &Path, template: &ParamStore) -> Result<(ParamStore, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(bin_path.with_extension("json"))?)?;
    let store = decode_checkpoint(&fs::read(bin_path)?, &manifest, template)?;
    Ok((store, manifest))
}
