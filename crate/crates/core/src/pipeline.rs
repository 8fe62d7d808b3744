//! End-to-end orchestration: coarse stage, refinement stage, provenance.
//!
//! The coarse stage downsamples the input once and runs three models on the
//! bitwise-identical downsampled volume: segmentation, bone detector, face
//! detector. The refinement stage derives ROIs from the coarse outputs,
//! re-segments crops of the *original* image at high resolution, detects
//! tooth landmarks in a fixed-extent crop, and merges everything back onto
//! the original grid.
//!
//! Failure policy is graceful degradation: a failed refinement never aborts
//! the run, it falls back to the coarse result and sets the degraded flag,
//! so every run emits a reviewable result.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::landmark::{
    decode_landmarks, DecodeMode, LandmarkGroup, LandmarkManifest, LandmarkSet,
};
use crate::model::{ModelWeights, Tensor4, VoxelClassifier, VoxelModel};
use crate::roi::{
    compute_global_roi, compute_thin_bone_rois, compute_tooth_roi, merge_refined_masks,
    sliding_window_infer, NamedRoi, RoiPlan,
};
use crate::trainer::config::StageKind;
use crate::trainer::normalize_image;
use crate::volume::{Interp, ProbVolume, Volume, VolumeKind};

/// Process exit codes distinguishing clean / degraded / failed runs.
pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_DEGRADED: i32 = 2;

/// How refined masks are combined where ROIs overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    /// Thin-bone labels win inside their ROIs (default).
    ThinOverGlobal,
    /// Average class probabilities of all covering ROIs, then argmax.
    ProbabilityFusion,
}

impl Default for MergePolicy {
    fn default() -> Self {
        MergePolicy::ThinOverGlobal
    }
}

/// Inference-time configuration, stored in the bundle manifest.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub coarse_spacing: [f64; 3],
    pub refine_spacing: [f64; 3],
    pub tooth_spacing: [f64; 3],
    pub global_margin_mm: f64,
    pub thin_half_extent_mm: [f64; 3],
    pub tooth_patch_extent_mm: [f64; 3],
    pub patch_extent: [usize; 3],
    pub overlap_fraction: f64,
    pub decode_threshold: f64,
    pub decode_mode: DecodeMode,
    pub merge_policy: MergePolicy,
    pub intensity_shift: f64,
    pub intensity_scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            coarse_spacing: [2.0; 3],
            refine_spacing: [0.4; 3],
            tooth_spacing: [0.8; 3],
            global_margin_mm: 5.0,
            thin_half_extent_mm: [15.0; 3],
            tooth_patch_extent_mm: [25.6; 3],
            patch_extent: [32, 32, 32],
            overlap_fraction: 0.5,
            decode_threshold: 0.5,
            decode_mode: DecodeMode::WeightedCentroid,
            merge_policy: MergePolicy::ThinOverGlobal,
            intensity_shift: 0.0,
            intensity_scale: 1000.0,
        }
    }
}

const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct BundleModelEntry {
    file: PathBuf,
    expected_spacing: [f64; 3],
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct BundleManifest {
    version: u32,
    landmark_manifest: PathBuf,
    models: BTreeMap<String, BundleModelEntry>,
    pipeline: PipelineConfig,
}

/// The five loaded models plus inference configuration.
pub struct ModelBundle {
    pub config: PipelineConfig,
    pub landmark_manifest: LandmarkManifest,
    pub coarse_seg: VoxelClassifier,
    pub bone_det: VoxelClassifier,
    pub face_det: VoxelClassifier,
    pub refine_seg: VoxelClassifier,
    pub tooth_det: VoxelClassifier,
    pub checksums: BTreeMap<String, String>,
}

fn stage_spacing(cfg: &PipelineConfig, kind: StageKind) -> [f64; 3] {
    match kind {
        StageKind::CoarseSeg | StageKind::BoneDet | StageKind::FaceDet => cfg.coarse_spacing,
        StageKind::RefineSeg => cfg.refine_spacing,
        StageKind::ToothDet => cfg.tooth_spacing,
    }
}

/// Write a bundle manifest for five stage archives already in `dir`.
pub fn write_bundle_manifest(
    dir: impl AsRef<Path>,
    config: &PipelineConfig,
    landmark_manifest_file: &Path,
) -> Result<()> {
    let dir = dir.as_ref();
    let mut models = BTreeMap::new();
    for kind in StageKind::ALL {
        let file = PathBuf::from(format!("{}.vxcw", kind.as_str().replace('-', "_")));
        let path = dir.join(&file);
        let weights = ModelWeights::load(&path)?;
        if weights.stage_tag != kind.as_str() {
            return Err(Error::Configuration(format!(
                "{} holds '{}' weights, expected '{}'",
                path.display(),
                weights.stage_tag,
                kind
            )));
        }
        models.insert(
            kind.as_str().to_string(),
            BundleModelEntry {
                file,
                expected_spacing: stage_spacing(config, kind),
            },
        );
    }
    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        landmark_manifest: landmark_manifest_file.to_path_buf(),
        models,
        pipeline: config.clone(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Configuration(format!("bundle manifest serialization: {e}")))?;
    let path = dir.join("bundle.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Load and version-check a model bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ModelBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("bundle.toml");
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: BundleManifest =
        toml::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::Configuration(format!(
            "bundle version {} is not supported (expected {BUNDLE_VERSION})",
            manifest.version
        )));
    }
    let lm_path = if manifest.landmark_manifest.is_absolute() {
        manifest.landmark_manifest.clone()
    } else {
        dir.join(&manifest.landmark_manifest)
    };
    let landmark_manifest = LandmarkManifest::load(&lm_path)?;
    let cfg = manifest.pipeline.clone();

    let mut checksums = BTreeMap::new();
    let mut load_model = |kind: StageKind, expected_classes: usize| -> Result<VoxelClassifier> {
        let entry = manifest.models.get(kind.as_str()).ok_or_else(|| {
            Error::Configuration(format!("bundle manifest is missing the '{kind}' model"))
        })?;
        let path = dir.join(&entry.file);
        let weights = ModelWeights::load(&path)?;
        if weights.stage_tag != kind.as_str() {
            return Err(Error::Configuration(format!(
                "'{kind}' archive carries stage tag '{}'",
                weights.stage_tag
            )));
        }
        let expect_spacing = stage_spacing(&cfg, kind);
        for a in 0..3 {
            if (weights.input_spacing[a] - entry.expected_spacing[a]).abs() > 1e-9
                || (weights.input_spacing[a] - expect_spacing[a]).abs() > 1e-9
            {
                return Err(Error::Configuration(format!(
                    "'{kind}' weights were trained at spacing {:?} but the bundle expects {:?}",
                    weights.input_spacing, expect_spacing
                )));
            }
        }
        if weights.spec.num_classes != expected_classes {
            return Err(Error::Configuration(format!(
                "'{kind}' model has {} classes, the landmark manifest implies {expected_classes}",
                weights.spec.num_classes
            )));
        }
        checksums.insert(kind.as_str().to_string(), weights.checksum());
        weights.instantiate()
    };

    let bone_classes = landmark_manifest.group_names(LandmarkGroup::Bone).len() + 1;
    let face_classes = landmark_manifest.group_names(LandmarkGroup::Face).len() + 1;
    let tooth_classes = landmark_manifest.group_names(LandmarkGroup::Teeth).len() + 1;
    Ok(ModelBundle {
        coarse_seg: load_model(StageKind::CoarseSeg, 3)?,
        bone_det: load_model(StageKind::BoneDet, bone_classes)?,
        face_det: load_model(StageKind::FaceDet, face_classes)?,
        refine_seg: load_model(StageKind::RefineSeg, 3)?,
        tooth_det: load_model(StageKind::ToothDet, tooth_classes)?,
        config: cfg,
        landmark_manifest,
        checksums,
    })
}

/// Per-run provenance: timings, plan, warnings, model identities.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    /// Load / compute / io phases, reported separately, in milliseconds.
    pub timings_ms: BTreeMap<String, f64>,
    pub roi_plan: Option<RoiPlan>,
    pub warnings: Vec<String>,
    pub model_checksums: BTreeMap<String, String>,
    pub degraded: bool,
}

impl Provenance {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Configuration(format!("provenance serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// The final artifact: mask on the original grid, the full landmark set,
/// and per-stage provenance.
pub struct PipelineResult {
    pub final_mask: Volume,
    pub landmarks: LandmarkSet,
    pub provenance: Provenance,
}

/// Coarse-stage outputs consumed by refinement.
pub struct CoarseOutput {
    pub mask: Volume,
    pub landmarks: LandmarkSet,
    pub warnings: Vec<String>,
}

fn predict_probs_on(model: &VoxelClassifier, vol: &Volume) -> Result<ProbVolume> {
    let input = Tensor4::from_volume(vol);
    let probs = model.predict_probs(&input)?;
    probs.into_prob_volume(vol.grid().clone())
}

/// Run the coarse stage: one shared downsample, three independent models.
///
/// Tooth landmarks are not produced here; they stay flagged absent until the
/// refinement stage detects them at higher resolution.
pub fn run_coarse(
    image: &Volume,
    seg_model: &VoxelClassifier,
    bone_detector: &VoxelClassifier,
    face_detector: &VoxelClassifier,
    manifest: &LandmarkManifest,
    cfg: &PipelineConfig,
) -> Result<CoarseOutput> {
    if image.kind() != VolumeKind::Image {
        return Err(Error::InvalidArgument(
            "coarse stage expects an intensity volume".into(),
        ));
    }
    let mut warnings = Vec::new();
    let down = image.resample(cfg.coarse_spacing, Interp::Linear)?;
    let down = normalize_image(&down, cfg.intensity_shift, cfg.intensity_scale)?;

    let seg_probs = predict_probs_on(seg_model, &down)?;
    let mask = seg_probs.argmax_labels()?;

    let mut landmarks = manifest.empty_set();
    for (detector, group) in [
        (bone_detector, LandmarkGroup::Bone),
        (face_detector, LandmarkGroup::Face),
    ] {
        let probs = predict_probs_on(detector, &down)?;
        let expected = {
            let names = manifest.group_names(group);
            let subset = landmarks.group_subset(group);
            debug_assert_eq!(subset.len(), names.len());
            subset
        };
        let decoded = decode_landmarks(&probs, &expected, cfg.decode_threshold, cfg.decode_mode)?;
        for lm in decoded.entries() {
            if !lm.present {
                warnings.push(format!(
                    "coarse {group} detector did not find landmark '{}'",
                    lm.name
                ));
            }
            landmarks.update(lm.clone())?;
        }
    }
    Ok(CoarseOutput {
        mask,
        landmarks,
        warnings,
    })
}

/// Refinement-stage outputs.
pub struct RefinementOutput {
    pub final_mask: Volume,
    pub tooth_landmarks: LandmarkSet,
    pub roi_plan: Option<RoiPlan>,
    pub warnings: Vec<String>,
    pub degraded: bool,
}

fn crop_normalized(
    image: &Volume,
    roi: &crate::volume::RoiBox,
    cfg: &PipelineConfig,
) -> Result<Volume> {
    let crop = image.crop(roi, Interp::Linear)?;
    normalize_image(&crop, cfg.intensity_shift, cfg.intensity_scale)
}

/// Run the refinement stage on crops of the original image.
///
/// Reads only the original image, the coarse mask, and the global
/// landmarks; detector probability maps from the coarse stage are never
/// revisited. An empty coarse mask degrades to the nearest-upsampled coarse
/// mask; missing anchor landmarks leave the tooth landmarks absent; either
/// path records why and continues.
pub fn run_refinement(
    image: &Volume,
    coarse: &CoarseOutput,
    refine_model: &VoxelClassifier,
    tooth_model: &VoxelClassifier,
    manifest: &LandmarkManifest,
    cfg: &PipelineConfig,
) -> Result<RefinementOutput> {
    let mut warnings = Vec::new();
    let teeth_absent = manifest.empty_set().group_subset(LandmarkGroup::Teeth);

    // Global ROI from the coarse mask; an empty mask degrades the run.
    let global_roi = match compute_global_roi(&coarse.mask, cfg.global_margin_mm, cfg.refine_spacing)
    {
        Ok(roi) => roi,
        Err(Error::EmptyMask(msg)) => {
            warnings.push(format!("refinement skipped: {msg}"));
            let fallback = coarse.mask.paste_into_reference(image)?;
            return Ok(RefinementOutput {
                final_mask: fallback,
                tooth_landmarks: teeth_absent,
                roi_plan: None,
                warnings,
                degraded: true,
            });
        }
        Err(e) => return Err(e),
    };

    // Global re-segmentation.
    let global_crop = crop_normalized(image, &global_roi, cfg)?;
    let (global_probs, w) =
        sliding_window_infer(refine_model, &global_crop, cfg.patch_extent, cfg.overlap_fraction)?;
    warnings.extend(w);
    let global_labels = global_probs.argmax_labels()?;

    // Thin-bone ROIs centered on the paired landmarks.
    let (thin_rois, thin_warnings) = compute_thin_bone_rois(
        &coarse.landmarks,
        &manifest.thin_pair,
        cfg.thin_half_extent_mm,
        cfg.refine_spacing,
    );
    warnings.extend(thin_warnings);
    let mut thin_labels = Vec::new();
    let mut thin_probs = Vec::new();
    for named in &thin_rois {
        let crop = crop_normalized(image, &named.roi, cfg)?;
        let (probs, w) =
            sliding_window_infer(refine_model, &crop, cfg.patch_extent, cfg.overlap_fraction)?;
        warnings.extend(w);
        thin_labels.push(probs.argmax_labels()?);
        thin_probs.push(probs);
    }

    // Tooth landmark detection in a fixed-extent crop.
    let mut tooth_landmarks = teeth_absent.clone();
    let tooth_roi = match compute_tooth_roi(
        &coarse.landmarks,
        &manifest.tooth_anchors,
        cfg.tooth_patch_extent_mm,
        cfg.tooth_spacing,
    ) {
        Ok(roi) => {
            let crop = crop_normalized(image, &roi, cfg)?;
            let input = Tensor4::from_volume(&crop).crop_to(cfg.patch_extent);
            let probs = tooth_model.predict_probs(&input)?;
            let grid = crate::volume::Grid::new(cfg.patch_extent, crop.spacing(), crop.origin())?;
            let probs = probs.into_prob_volume(grid)?;
            let decoded = decode_landmarks(
                &probs,
                &tooth_landmarks,
                cfg.decode_threshold,
                cfg.decode_mode,
            )?;
            for lm in decoded.entries() {
                if !lm.present {
                    warnings.push(format!("tooth detector did not find landmark '{}'", lm.name));
                }
                tooth_landmarks.update(lm.clone())?;
            }
            Some(roi)
        }
        Err(Error::MissingLandmark(msg)) => {
            warnings.push(format!("tooth detection skipped: {msg}"));
            None
        }
        Err(e) => return Err(e),
    };

    // Merge refined masks onto the original grid (zero-padded).
    let final_mask = match cfg.merge_policy {
        MergePolicy::ThinOverGlobal => {
            merge_refined_masks(None, Some(&global_labels), &thin_labels, image)?
        }
        MergePolicy::ProbabilityFusion => {
            merge_fused(&global_probs, &thin_probs, image)?
        }
    };

    let plan = RoiPlan {
        global: global_roi,
        thin_bone: thin_rois
            .into_iter()
            .map(|n| NamedRoi {
                landmark: n.landmark,
                roi: n.roi,
            })
            .collect(),
        tooth: tooth_roi,
    };
    Ok(RefinementOutput {
        final_mask,
        tooth_landmarks,
        roi_plan: Some(plan),
        warnings,
        degraded: false,
    })
}

/// Majority-probability fusion: average the class probabilities of every
/// covering ROI, then take the per-voxel argmax.
fn merge_fused(
    global: &ProbVolume,
    thin: &[ProbVolume],
    reference: &Volume,
) -> Result<Volume> {
    let grid = reference.grid().clone();
    let [nx, ny, nz] = grid.dims;
    let classes = global.num_classes();
    let mut data = vec![0.0f64; grid.num_voxels()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                let mut acc = vec![0.0f64; classes];
                let mut covered = 0usize;
                for pv in thin.iter().chain(std::iter::once(global)) {
                    if pv.grid().contains_world(p) {
                        let idx = pv.grid().world_to_voxel(p);
                        let g = pv.grid();
                        let vi = [
                            (idx[0].round().max(0.0) as usize).min(g.dims[0] - 1),
                            (idx[1].round().max(0.0) as usize).min(g.dims[1] - 1),
                            (idx[2].round().max(0.0) as usize).min(g.dims[2] - 1),
                        ];
                        let vox = g.index(vi[0], vi[1], vi[2]);
                        for c in 0..classes {
                            acc[c] += pv.at(c, vox);
                        }
                        covered += 1;
                    }
                }
                if covered > 0 {
                    let mut best = 0usize;
                    for c in 1..classes {
                        if acc[c] > acc[best] {
                            best = c;
                        }
                    }
                    data[grid.index(i, j, k)] = best as f64;
                }
            }
        }
    }
    Volume::new(grid, VolumeKind::Label, data)
}

/// Run both stages and assemble the final result with provenance.
pub fn run_full(image: &Volume, bundle: &ModelBundle) -> Result<PipelineResult> {
    let cfg = &bundle.config;
    let mut timings = BTreeMap::new();

    let t0 = Instant::now();
    let coarse = run_coarse(
        image,
        &bundle.coarse_seg,
        &bundle.bone_det,
        &bundle.face_det,
        &bundle.landmark_manifest,
        cfg,
    )?;
    timings.insert("coarse_compute".to_string(), ms_since(t0));

    let t1 = Instant::now();
    let refinement = run_refinement(
        image,
        &coarse,
        &bundle.refine_seg,
        &bundle.tooth_det,
        &bundle.landmark_manifest,
        cfg,
    )?;
    timings.insert("refinement_compute".to_string(), ms_since(t1));

    let mut landmarks = coarse.landmarks.clone();
    for lm in refinement.tooth_landmarks.entries() {
        landmarks.update(lm.clone())?;
    }

    let mut warnings = coarse.warnings.clone();
    warnings.extend(refinement.warnings.clone());
    let provenance = Provenance {
        timings_ms: timings,
        roi_plan: refinement.roi_plan,
        warnings,
        model_checksums: bundle.checksums.clone(),
        degraded: refinement.degraded,
    };
    debug_assert_eq!(refinement.final_mask.grid(), image.grid());
    Ok(PipelineResult {
        final_mask: refinement.final_mask,
        landmarks,
        provenance,
    })
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}
