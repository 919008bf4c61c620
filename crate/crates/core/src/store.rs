//! Model files: a TOML manifest followed by a little-endian `f32` blob.
//!
//! ```text
//! carprune-model/1 <manifest byte length>\n
//! <TOML manifest: layers, tensor shapes, byte offsets, parameter count, SHA-256 of blob>
//! <blob>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, Network};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "carprune-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: usize,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub class_count: usize,
    pub input_shape: Vec<usize>,
    pub total_parameters: usize,
    pub blob_bytes: usize,
    pub checksum_sha256: String,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes a network into the model file byte layout.
pub fn encode_model(net: &Network) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(net.parameter_count() * 4);
    let mut tensors = Vec::new();
    for (layer, p) in net.params().iter().enumerate() {
        let Some(p) = p else { continue };
        for (role, t) in [(TensorRole::Weight, &p.weight), (TensorRole::Bias, &p.bias)] {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                layer,
                role,
                shape: t.shape().to_vec(),
                offset,
                bytes: blob.len() - offset,
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        class_count: net.class_count(),
        input_shape: net.input_shape().to_vec(),
        total_parameters: net.parameter_count(),
        blob_bytes: blob.len(),
        checksum_sha256: sha256_hex(&blob),
        layers: net.layers().to_vec(),
        tensors,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest serialization failed: {e}")))?;
    let mut out = format!("{MAGIC}/{FORMAT_VERSION} {}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Splits a model file into its manifest and blob, checking version and framing.
pub fn read_manifest<'a>(bytes: &'a [u8], path: &Path) -> Result<(Manifest, &'a [u8])> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let (tag, len) = header
        .split_once(' ')
        .ok_or_else(|| Error::format(path, format!("malformed header {header:?}")))?;
    let version = tag
        .strip_prefix(MAGIC)
        .and_then(|v| v.strip_prefix('/'))
        .ok_or_else(|| Error::format(path, format!("not a model file (header {header:?})")))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::UnsupportedVersion(version.to_string()));
    }
    let len: usize = len
        .parse()
        .map_err(|_| Error::format(path, format!("bad manifest length {len:?}")))?;
    let start = newline + 1;
    let text = bytes.get(start..start + len).ok_or(Error::Truncated {
        expected: start + len,
        actual: bytes.len(),
    })?;
    let text = std::str::from_utf8(text).map_err(|_| Error::format(path, "manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(manifest.format_version.to_string()));
    }
    Ok((manifest, &bytes[start + len..]))
}

/// Parses model file bytes; `path` is only used in error messages.
pub fn decode_model(bytes: &[u8], path: &Path) -> Result<Network> {
    let (manifest, blob) = read_manifest(bytes, path)?;
    if blob.len() < manifest.blob_bytes {
        return Err(Error::Truncated {
            expected: manifest.blob_bytes,
            actual: blob.len(),
        });
    }
    if blob.len() > manifest.blob_bytes {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after blob", blob.len() - manifest.blob_bytes),
        ));
    }
    let actual = sha256_hex(blob);
    if actual != manifest.checksum_sha256 {
        return Err(Error::Checksum {
            expected: manifest.checksum_sha256,
            actual,
        });
    }

    let mut entries: Vec<&TensorEntry> = manifest.tensors.iter().collect();
    entries.sort_by_key(|e| e.offset);
    let mut cursor = 0;
    for e in &entries {
        let elems: usize = e.shape.iter().product();
        if e.offset != cursor || e.bytes != elems * 4 {
            return Err(Error::format(
                path,
                format!(
                    "tensor at offset {} does not tile the blob (expected offset {cursor})",
                    e.offset
                ),
            ));
        }
        cursor += e.bytes;
    }
    if cursor != manifest.blob_bytes {
        return Err(Error::format(path, "tensors do not cover the blob"));
    }

    let mut params: Vec<Option<LayerParams>> = vec![None; manifest.layers.len()];
    let mut pending: Vec<(Option<Tensor>, Option<Tensor>)> = vec![(None, None); manifest.layers.len()];
    for e in &manifest.tensors {
        let data = blob[e.offset..e.offset + e.bytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        let slot = pending
            .get_mut(e.layer)
            .ok_or_else(|| Error::format(path, format!("tensor for missing layer {}", e.layer)))?;
        match e.role {
            TensorRole::Weight => slot.0 = Some(t),
            TensorRole::Bias => slot.1 = Some(t),
        }
    }
    for (i, slot) in pending.into_iter().enumerate() {
        match slot {
            (Some(weight), Some(bias)) => params[i] = Some(LayerParams { weight, bias }),
            (None, None) => {}
            _ => return Err(Error::format(path, format!("layer {i} has only one of weight/bias"))),
        }
    }
    let net = Network::new(manifest.input_shape, manifest.layers, params)?;
    if net.parameter_count() != manifest.total_parameters || net.class_count() != manifest.class_count {
        return Err(Error::format(path, "parameter or class count disagrees with manifest"));
    }
    Ok(net)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}
