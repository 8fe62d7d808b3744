//! Training configuration ([data]/[model]/[train]/[stage] sections) and the
//! dataset manifest.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::VoxelClassifierSpec;

/// Which of the five training stages a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    CoarseSeg,
    BoneDet,
    FaceDet,
    RefineSeg,
    ToothDet,
}

impl StageKind {
    pub const ALL: [StageKind; 5] = [
        StageKind::CoarseSeg,
        StageKind::BoneDet,
        StageKind::FaceDet,
        StageKind::RefineSeg,
        StageKind::ToothDet,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StageKind::CoarseSeg => "coarse-seg",
            StageKind::BoneDet => "bone-det",
            StageKind::FaceDet => "face-det",
            StageKind::RefineSeg => "refine-seg",
            StageKind::ToothDet => "tooth-det",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        StageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Configuration(format!(
                    "unknown stage '{s}' (expected one of coarse-seg, bone-det, face-det, refine-seg, tooth-det)"
                ))
            })
    }

    /// Detector stages are transfer-initialized from segmentation weights.
    pub fn is_detector(&self) -> bool {
        matches!(self, StageKind::BoneDet | StageKind::FaceDet | StageKind::ToothDet)
    }

    /// Patch-based stages (the refinement models).
    pub fn is_patch_based(&self) -> bool {
        matches!(self, StageKind::RefineSeg | StageKind::ToothDet)
    }
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Landmark manifest (names, groups, roles); required by detector stages.
    pub landmark_manifest: PathBuf,
    /// Linear intensity rescale applied to images: (x - shift) / scale.
    #[serde(default)]
    pub intensity_shift: f64,
    #[serde(default = "default_intensity_scale")]
    pub intensity_scale: f64,
}

fn default_intensity_scale() -> f64 {
    1000.0
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Seed for fresh weight initialization.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_depth() -> usize {
    3
}
fn default_base_channels() -> usize {
    4
}
fn default_seed() -> u64 {
    42
}

impl ModelConfig {
    pub fn spec(&self, num_classes: usize) -> VoxelClassifierSpec {
        VoxelClassifierSpec {
            in_channels: 1,
            num_classes,
            depth: self.depth,
            base_channels: self.base_channels,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Fixed step decay: multiply the rate by `lr_decay_factor` every
    /// `lr_decay_epochs` epochs.
    #[serde(default = "default_decay_epochs")]
    pub lr_decay_epochs: usize,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_alpha_fg")]
    pub alpha_foreground: f64,
    #[serde(default = "default_alpha_bg")]
    pub alpha_background: f64,
    /// Full per-class alpha vector (background first); overrides the
    /// foreground/background pair when set.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    /// Shuffling / patch sampling seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Left-right flip augmentation with paired-landmark relabeling.
    #[serde(default)]
    pub augment_flip: bool,
    /// Patches sampled per volume per epoch (patch-based stages).
    #[serde(default = "default_patches_per_volume")]
    pub patches_per_volume: usize,
    /// Fraction of patch draws biased toward foreground.
    #[serde(default = "default_foreground_bias")]
    pub foreground_bias: f64,
}

fn default_epochs() -> usize {
    20
}
fn default_lr() -> f64 {
    1e-3
}
fn default_decay_epochs() -> usize {
    8
}
fn default_decay_factor() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    2.0
}
fn default_alpha_fg() -> f64 {
    0.25
}
fn default_alpha_bg() -> f64 {
    0.75
}
fn default_patches_per_volume() -> usize {
    4
}
fn default_foreground_bias() -> f64 {
    0.5
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub kind: StageKind,
    /// Working spacing of this stage in mm.
    pub spacing: [f64; 3],
    /// Patch extent in voxels for patch-based stages.
    #[serde(default = "default_patch_extent")]
    pub patch_extent: [usize; 3],
    /// Landmark sphere radius in voxels (detector stages).
    #[serde(default = "default_sphere_radius")]
    pub sphere_radius: u32,
    /// Probability threshold for landmark decoding (validation).
    #[serde(default = "default_decode_threshold")]
    pub decode_threshold: f64,
    /// Physical extent of the tooth ROI; must equal the tooth detector's
    /// training patch extent (patch_extent * spacing).
    #[serde(default)]
    pub tooth_patch_extent_mm: Option<[f64; 3]>,
}

fn default_patch_extent() -> [usize; 3] {
    [32, 32, 32]
}
fn default_sphere_radius() -> u32 {
    3
}
fn default_decode_threshold() -> f64 {
    0.5
}

/// Full training configuration file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub stage: StageConfig,
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| {
            let section = e
                .span()
                .map(|span| enclosing_section(&text, span.start))
                .unwrap_or_default();
            Error::Configuration(format!("in config {}{section}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.stage.spacing[a] > 0.0) {
                return Err(Error::Configuration(format!(
                    "stage.spacing[{a}] must be positive"
                )));
            }
        }
        if self.data.intensity_scale == 0.0 {
            return Err(Error::Configuration(
                "data.intensity_scale must be nonzero".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.train.foreground_bias) {
            return Err(Error::Configuration(
                "train.foreground_bias must lie in [0, 1]".into(),
            ));
        }
        if self.stage.kind.is_patch_based() {
            let spec = self.model.spec(2);
            spec.check_extents(self.stage.patch_extent)?;
        }
        Ok(())
    }
}

/// Name of the last `[section]` header before byte `offset`, as error
/// context (" section [train]" or empty at top level).
fn enclosing_section(text: &str, offset: usize) -> String {
    let mut section = None;
    let mut pos = 0usize;
    for line in text.lines() {
        if pos > offset {
            break;
        }
        let trimmed = line.trim();
        if trimmed.starts_with('[') && trimmed.ends_with(']') {
            section = Some(trimmed.to_string());
        }
        pos += line.len() + 1;
    }
    section.map(|s| format!(" section {s}")).unwrap_or_default()
}

/// Split assignment of a dataset case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Train/val/test sizes for `n` cases: val = floor(0.1 n),
/// test = floor(0.2 n), remainder to train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n * 2 / 10;
    (n - val - test, val, test)
}

/// One case of a dataset manifest; paths are relative to the manifest file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CaseEntry {
    pub name: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub landmarks: PathBuf,
    pub split: Split,
}

/// Dataset manifest listing image/mask/landmark paths and split assignment.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<CaseEntry>,
    /// Directory the relative paths resolve against (set on load/save).
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Configuration(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&CaseEntry> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        if rel.is_absolute() {
            rel.to_path_buf()
        } else {
            self.root.join(rel)
        }
    }
}
