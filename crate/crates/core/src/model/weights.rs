//! Weight persistence and cross-model transfer initialization.
//!
//! Weights travel as a single archive: a fixed magic, a JSON manifest
//! (spec, stage tag, input spacing, tensor table with shapes and per-tensor
//! sha256 checksums), then the raw little-endian f64 tensor data in manifest
//! order.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use super::unet::{build_model, VoxelClassifier, VoxelClassifierSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VXCW0001";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A complete set of model weights with its provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub spec: VoxelClassifierSpec,
    pub stage_tag: String,
    pub input_spacing: [f64; 3],
    pub tensors: IndexMap<String, NamedTensor>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    spec: VoxelClassifierSpec,
    stage_tag: String,
    input_spacing: [f64; 3],
    tensors: Vec<TensorEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
    sha256: String,
}

fn tensor_digest(data: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelWeights {
    /// Snapshot a model's parameters.
    pub fn from_model(
        model: &VoxelClassifier,
        stage_tag: impl Into<String>,
        input_spacing: [f64; 3],
    ) -> Self {
        let mut tensors = IndexMap::new();
        model.for_each_param(|name, shape, data, _| {
            tensors.insert(
                name.to_string(),
                NamedTensor {
                    shape,
                    data: data.to_vec(),
                },
            );
        });
        ModelWeights {
            spec: model.spec().clone(),
            stage_tag: stage_tag.into(),
            input_spacing,
            tensors,
        }
    }

    /// Load these weights into a freshly built model.
    pub fn instantiate(&self) -> Result<VoxelClassifier> {
        let mut model = build_model(&self.spec, 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    /// Copy every tensor into `model`; all names and shapes must match.
    pub fn apply_to(&self, model: &mut VoxelClassifier) -> Result<()> {
        if model.spec() != &self.spec {
            return Err(Error::StructuralMismatch(
                "weight spec differs from model spec".into(),
            ));
        }
        let mut missing = Vec::new();
        model.for_each_param_mut(|name, param, _| {
            match self.tensors.get(name) {
                Some(t) if t.data.len() == param.len() => {
                    param.copy_from_slice(&t.data);
                }
                _ => missing.push(name.to_string()),
            }
        });
        if !missing.is_empty() {
            return Err(Error::StructuralMismatch(format!(
                "weights are missing tensors: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }

    /// Digest over the full serialized archive (used for provenance).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_bytes());
        hex_string(&h.finalize())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len(),
                sha256: tensor_digest(&t.data),
            });
            offset += t.data.len();
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            stage_tag: self.stage_tag.clone(),
            input_spacing: self.input_spacing,
            tensors: entries,
        };
        let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest_json);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a weight archive (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + mlen {
            return Err(Error::format(path, "truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
            .map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
        let data_start = 16 + mlen;
        let mut tensors = IndexMap::new();
        for e in manifest.tensors {
            let start = data_start + e.offset * 8;
            let end = start + e.len * 8;
            if end > bytes.len() {
                return Err(Error::format(path, format!("tensor '{}' out of bounds", e.name)));
            }
            let mut data = Vec::with_capacity(e.len);
            for c in bytes[start..end].chunks_exact(8) {
                data.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
            if tensor_digest(&data) != e.sha256 {
                return Err(Error::format(
                    path,
                    format!("checksum mismatch on tensor '{}'", e.name),
                ));
            }
            let expected: usize = e.shape.iter().product();
            if expected != e.len {
                return Err(Error::format(
                    path,
                    format!("tensor '{}' shape/length mismatch", e.name),
                ));
            }
            tensors.insert(e.name, NamedTensor { shape: e.shape, data });
        }
        Ok(ModelWeights {
            spec: manifest.spec,
            stage_tag: manifest.stage_tag,
            input_spacing: manifest.input_spacing,
            tensors,
        })
    }
}

/// What [`transfer_init`] copied and what it re-initialized.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub reinitialized: Vec<String>,
    pub seed: u64,
}

/// Initialize weights for `target_spec` from `source`.
///
/// Every tensor whose name and shape match the source is copied bitwise;
/// the rest (the final classification layer, when class counts differ) are
/// freshly initialized from `seed`. Specs may differ only in `num_classes`.
pub fn transfer_init(
    target_spec: &VoxelClassifierSpec,
    source: &ModelWeights,
    seed: u64,
) -> Result<(ModelWeights, TransferReport)> {
    let s = &source.spec;
    if s.depth != target_spec.depth
        || s.base_channels != target_spec.base_channels
        || s.in_channels != target_spec.in_channels
    {
        return Err(Error::StructuralMismatch(format!(
            "transfer requires matching depth/base/in_channels: \
             source (d={}, b={}, in={}) vs target (d={}, b={}, in={})",
            s.depth,
            s.base_channels,
            s.in_channels,
            target_spec.depth,
            target_spec.base_channels,
            target_spec.in_channels
        )));
    }
    let fresh_model = build_model(target_spec, seed)?;
    let mut fresh = ModelWeights::from_model(&fresh_model, "transfer-init", source.input_spacing);
    let mut copied = Vec::new();
    let mut reinitialized = Vec::new();
    for (name, tensor) in fresh.tensors.iter_mut() {
        match source.tensors.get(name) {
            Some(src) if src.shape == tensor.shape => {
                tensor.data.copy_from_slice(&src.data);
                copied.push(name.clone());
            }
            _ => reinitialized.push(name.clone()),
        }
    }
    Ok((
        fresh,
        TransferReport {
            copied,
            reinitialized,
            seed,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(classes: usize) -> VoxelClassifierSpec {
        VoxelClassifierSpec {
            in_channels: 1,
            num_classes: classes,
            depth: 2,
            base_channels: 4,
        }
    }

    #[test]
    fn archive_round_trip_is_bitwise() {
        let model = build_model(&small_spec(3), 42).unwrap();
        let w = ModelWeights::from_model(&model, "coarse-seg", [2.0; 3]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.vxcw");
        w.save(&path).unwrap();
        let r = ModelWeights::load(&path).unwrap();
        assert_eq!(r, w);
        assert_eq!(r.checksum(), w.checksum());
    }

    #[test]
    fn corrupted_archive_is_rejected() {
        let model = build_model(&small_spec(3), 42).unwrap();
        let w = ModelWeights::from_model(&model, "coarse-seg", [2.0; 3]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.vxcw");
        w.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(ModelWeights::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn identical_specs_transfer_everything() {
        let model = build_model(&small_spec(3), 1).unwrap();
        let src = ModelWeights::from_model(&model, "seg", [2.0; 3]);
        let (out, report) = transfer_init(&small_spec(3), &src, 99).unwrap();
        assert!(report.reinitialized.is_empty());
        assert_eq!(report.copied.len(), src.tensors.len());
        assert_eq!(out.tensors, src.tensors);
    }

    #[test]
    fn class_count_change_reinitializes_exactly_the_head() {
        let model = build_model(&small_spec(3), 1).unwrap();
        let src = ModelWeights::from_model(&model, "seg", [2.0; 3]);
        let (out, report) = transfer_init(&small_spec(8), &src, 99).unwrap();

        // Manifest-intersection oracle: names present in both with equal
        // shapes must be copied; everything else re-initialized.
        let target_fresh = ModelWeights::from_model(&build_model(&small_spec(8), 99).unwrap(), "x", [2.0; 3]);
        let mut expect_copied: Vec<String> = Vec::new();
        let mut expect_reinit: Vec<String> = Vec::new();
        for (name, t) in &target_fresh.tensors {
            match src.tensors.get(name) {
                Some(s) if s.shape == t.shape => expect_copied.push(name.clone()),
                _ => expect_reinit.push(name.clone()),
            }
        }
        assert_eq!(report.copied, expect_copied);
        assert_eq!(report.reinitialized, expect_reinit);
        assert_eq!(expect_reinit, vec!["head.weight".to_string(), "head.bias".to_string()]);

        for name in &report.copied {
            assert_eq!(out.tensors[name].data, src.tensors[name].data, "{name} must be bitwise-equal");
        }
    }

    #[test]
    fn incompatible_structure_is_rejected() {
        let model = build_model(&small_spec(3), 1).unwrap();
        let src = ModelWeights::from_model(&model, "seg", [2.0; 3]);
        let wrong_depth = VoxelClassifierSpec {
            depth: 3,
            ..small_spec(3)
        };
        assert!(matches!(
            transfer_init(&wrong_depth, &src, 0),
            Err(Error::StructuralMismatch(_))
        ));
    }
}
