//! Training for the five pipeline stages: coarse segmentation from
//! scratch, coarse bone/face detectors via transfer from the segmentation
//! weights, and the patch-based refinement models.
//!
//! Training is reproducible bit for bit given (seed, config, dataset
//! manifest): example order and patch draws come from seeded generators,
//! and all tensor math is deterministic regardless of thread count.

pub mod config;
pub mod data;

pub use config::{
    split_sizes, CaseEntry, DataConfig, DatasetManifest, ModelConfig, Split, StageConfig,
    StageKind, TrainConfig, TrainParams,
};
pub use data::{normalize_image, sample_refinement_patches, NativeCase, PatchSample};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::landmark::{
    decode_landmarks, encode_landmarks, DecodeMode, LandmarkGroup, LandmarkManifest, LandmarkSet,
    SphereRadius,
};
use crate::metrics;
use crate::model::{
    build_model, focal_loss, transfer_init, Adam, FocalParams, ModelWeights, Tensor4,
    TransferReport, VoxelClassifier, VoxelModel,
};
use crate::roi::compute_tooth_roi;
use crate::volume::{Grid, Interp, Volume};

/// One epoch of the training history.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainingHistory {
    pub stage: StageKind,
    /// What `val_metric` measures ("val_dsc" or "val_rmse_mm").
    pub metric_name: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub notes: Vec<String>,
}

/// Weights of the best-validation checkpoint plus the run's history.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights: ModelWeights,
    pub history: TrainingHistory,
    pub transfer: Option<TransferReport>,
}

struct Example {
    id: String,
    input: Tensor4,
    target: Vec<u8>,
}

struct ValScores {
    loss: Option<f64>,
    metric: Option<f64>,
}

enum MetricSense {
    HigherBetter,
    LowerBetter,
}


/// Per-class focal weights from the config: the explicit `alpha` vector
/// when present, else background/foreground scalars.
fn focal_params(params: &TrainParams, classes: usize) -> Result<FocalParams> {
    match &params.alpha {
        Some(alpha) => {
            if alpha.len() != classes {
                return Err(Error::Configuration(format!(
                    "train.alpha has {} entries for {classes} classes",
                    alpha.len()
                )));
            }
            Ok(FocalParams {
                gamma: params.gamma,
                alpha: alpha.clone(),
            })
        }
        None => Ok(FocalParams::weighted(
            classes,
            params.gamma,
            params.alpha_background,
            params.alpha_foreground,
        )),
    }
}

fn lr_at(cfg: &TrainParams, epoch: usize) -> f64 {
    if cfg.lr_decay_epochs == 0 {
        return cfg.learning_rate;
    }
    cfg.learning_rate * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_epochs) as i32)
}

/// The shared epoch loop: optimize with Adam, validate every epoch, return
/// the best-validation checkpoint (the final weights when no validation
/// cases exist).
fn run_loop(
    model: &mut VoxelClassifier,
    cfg: &TrainConfig,
    stage_tag: StageKind,
    metric_name: &str,
    sense: MetricSense,
    notes: Vec<String>,
    examples_for_epoch: &mut dyn FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<Example>>,
    validate: &mut dyn FnMut(&VoxelClassifier) -> Result<ValScores>,
) -> Result<(ModelWeights, TrainingHistory)> {
    let params = &cfg.train;
    let focal = focal_params(params, model.spec().num_classes)?;
    let mut adam = Adam::new(params.learning_rate);
    let mut history = TrainingHistory {
        stage: stage_tag,
        metric_name: metric_name.to_string(),
        epochs: Vec::new(),
        best_epoch: None,
        notes,
    };
    let spacing = cfg.stage.spacing;
    let mut best: Option<(f64, ModelWeights)> = None;
    let mut batch_counter = 0usize;

    for epoch in 0..params.epochs {
        adam.lr = lr_at(params, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(epoch as u64 * 7919));
        let examples = examples_for_epoch(epoch, &mut rng)?;
        if examples.is_empty() {
            return Err(Error::Configuration(
                "training epoch produced no examples (empty dataset?)".into(),
            ));
        }
        let mut loss_sum = 0.0;
        for ex in &examples {
            batch_counter += 1;
            model.zero_grads();
            let (logits, ctx) = model.forward_train(&ex.input)?;
            let (loss, grad) = focal_loss(&logits, &ex.target, &focal)?;
            if !loss.is_finite() {
                let _ = &ex.id;
                return Err(Error::Divergence {
                    batch: batch_counter,
                });
            }
            loss_sum += loss;
            model.backward(&ctx, &grad)?;
            adam.step(model);
        }
        let scores = validate(model)?;
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / examples.len() as f64,
            learning_rate: adam.lr,
            val_loss: scores.loss,
            val_metric: scores.metric,
        };
        let quiet = std::env::var("CMFSEG_QUIET").map(|v| v == "1").unwrap_or(false);
        if !quiet {
            eprintln!(
                "[{}] epoch {:>3}/{}: loss {:.6} lr {:.2e} val_loss {} {} {}",
                stage_tag,
                epoch + 1,
                params.epochs,
                record.mean_loss,
                record.learning_rate,
                record
                    .val_loss
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_else(|| "-".into()),
                metric_name,
                record
                    .val_metric
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        history.epochs.push(record);
        // Undefined or infinite metrics (e.g. detector RMSE before any
        // landmark clears the decode threshold) never become checkpoints;
        // if no epoch produces a finite metric the final weights win.
        if let Some(m) = scores.metric.filter(|m| m.is_finite()) {
            let better = match (&best, &sense) {
                (None, _) => true,
                (Some((b, _)), MetricSense::HigherBetter) => m > *b,
                (Some((b, _)), MetricSense::LowerBetter) => m < *b,
            };
            if better {
                best = Some((
                    m,
                    ModelWeights::from_model(model, stage_tag.as_str(), spacing),
                ));
                history.best_epoch = Some(epoch);
            }
        }
    }

    let weights = match best {
        Some((_, w)) => w,
        None => ModelWeights::from_model(model, stage_tag.as_str(), spacing),
    };
    Ok((weights, history))
}

/// How many classes a stage's model has, given the landmark manifest.
fn stage_classes(kind: StageKind, manifest: &LandmarkManifest) -> usize {
    match kind {
        StageKind::CoarseSeg | StageKind::RefineSeg => 3,
        StageKind::BoneDet => manifest.group_names(LandmarkGroup::Bone).len() + 1,
        StageKind::FaceDet => manifest.group_names(LandmarkGroup::Face).len() + 1,
        StageKind::ToothDet => manifest.group_names(LandmarkGroup::Teeth).len() + 1,
    }
}

fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<NativeCase>> {
    manifest
        .split(split)
        .into_iter()
        .map(|e| data::load_case(manifest, e))
        .collect()
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Patch-level dice over label buffers (argmax prediction vs target).
fn patch_dice(probs: &Tensor4, target: &[u8], label: u8) -> f64 {
    let n = probs.spatial_len();
    let classes = probs.channels;
    let mut pc = 0usize;
    let mut gc = 0usize;
    let mut both = 0usize;
    for v in 0..n {
        let mut bc = 0usize;
        let mut bp = probs.data[v];
        for c in 1..classes {
            if probs.data[c * n + v] > bp {
                bp = probs.data[c * n + v];
                bc = c;
            }
        }
        let ia = bc as u8 == label;
        let ib = target[v] == label;
        pc += ia as usize;
        gc += ib as usize;
        both += (ia && ib) as usize;
    }
    if pc + gc == 0 {
        1.0
    } else {
        2.0 * both as f64 / (pc + gc) as f64
    }
}

/// Train the coarse segmentation model from scratch.
pub fn train_coarse_segmentation(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let lm_manifest = LandmarkManifest::load(&cfg.data.landmark_manifest)?;
    let mut train_cases = load_split(manifest, Split::Train)?;
    if train_cases.is_empty() {
        return Err(Error::Configuration(
            "dataset manifest has no training cases".into(),
        ));
    }
    if cfg.train.augment_flip {
        let flipped: Vec<NativeCase> = train_cases
            .iter()
            .map(|c| data::flip_case(c, &lm_manifest))
            .collect();
        train_cases.extend(flipped);
    }
    let val_cases = load_split(manifest, Split::Val)?;
    let (shift, scale) = (cfg.data.intensity_shift, cfg.data.intensity_scale);
    let spec = cfg.model.spec(3);
    let mut model = build_model(&spec, cfg.model.seed)?;
    let focal = focal_params(&cfg.train, 3)?;

    // Full volumes at the coarse spacing, precomputed once.
    let prep = |cs: &[NativeCase]| -> Result<Vec<(String, Tensor4, Vec<u8>, Volume)>> {
        cs.iter()
            .map(|c| {
                let (img, msk) = data::resample_case(c, cfg.stage.spacing, shift, scale)?;
                Ok((
                    c.name.clone(),
                    Tensor4::from_volume(&img),
                    data::labels_to_target(&msk),
                    msk,
                ))
            })
            .collect()
    };
    let train_prepped = prep(&train_cases)?;
    let val_prepped = prep(&val_cases)?;

    let (weights, history) = run_loop(
        &mut model,
        cfg,
        StageKind::CoarseSeg,
        "val_dsc",
        MetricSense::HigherBetter,
        Vec::new(),
        &mut |_, rng| {
            let mut order: Vec<usize> = (0..train_prepped.len()).collect();
            order.shuffle(rng);
            Ok(order
                .into_iter()
                .map(|i| Example {
                    id: train_prepped[i].0.clone(),
                    input: train_prepped[i].1.clone(),
                    target: train_prepped[i].2.clone(),
                })
                .collect())
        },
        &mut |m| {
            if val_prepped.is_empty() {
                return Ok(ValScores {
                    loss: None,
                    metric: None,
                });
            }
            let mut losses = Vec::new();
            let mut dices = Vec::new();
            for (_, input, target, target_vol) in &val_prepped {
                let logits = m.forward(input)?;
                let (loss, _) = focal_loss(&logits, target, &focal)?;
                losses.push(loss);
                let mut probs = logits;
                probs.softmax_channels();
                let pred = probs
                    .into_prob_volume(target_vol.grid().clone())?
                    .argmax_labels()?;
                for label in 1..3u32 {
                    dices.push(metrics::dice(&pred, target_vol, label)?);
                }
            }
            Ok(ValScores {
                loss: mean(&losses),
                metric: mean(&dices),
            })
        },
    )?;
    Ok(TrainOutput {
        weights,
        history,
        transfer: None,
    })
}

/// Train the patch-based refinement segmentation model.
pub fn train_refine_segmentation(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let lm_manifest = LandmarkManifest::load(&cfg.data.landmark_manifest)?;
    let mut train_cases = load_split(manifest, Split::Train)?;
    if train_cases.is_empty() {
        return Err(Error::Configuration(
            "dataset manifest has no training cases".into(),
        ));
    }
    if cfg.train.augment_flip {
        let flipped: Vec<NativeCase> = train_cases
            .iter()
            .map(|c| data::flip_case(c, &lm_manifest))
            .collect();
        train_cases.extend(flipped);
    }
    let val_cases = load_split(manifest, Split::Val)?;
    let (shift, scale) = (cfg.data.intensity_shift, cfg.data.intensity_scale);

    // Normalize once at native resolution (the linear rescale commutes
    // with cropping and interpolation).
    let norm = |cs: Vec<NativeCase>| -> Result<Vec<NativeCase>> {
        cs.into_iter()
            .map(|mut c| {
                c.image = normalize_image(&c.image, shift, scale)?;
                Ok(c)
            })
            .collect()
    };
    let train_cases = norm(train_cases)?;
    let val_cases = norm(val_cases)?;

    let spec = cfg.model.spec(3);
    spec.check_extents(cfg.stage.patch_extent)?;
    let mut model = build_model(&spec, cfg.model.seed)?;
    let focal = focal_params(&cfg.train, 3)?;
    let patch = cfg.stage.patch_extent;
    let spacing = cfg.stage.spacing;
    let ppv = cfg.train.patches_per_volume.max(1);
    let bias = cfg.train.foreground_bias;

    // A frozen validation draw keeps the proxy metric comparable across
    // epochs.
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x56414C);
    let mut val_patches = Vec::new();
    for c in &val_cases {
        val_patches.extend(sample_refinement_patches(
            &c.image, &c.mask, patch, spacing, ppv, bias, &mut val_rng,
        )?);
    }

    let (weights, history) = run_loop(
        &mut model,
        cfg,
        StageKind::RefineSeg,
        "val_dsc",
        MetricSense::HigherBetter,
        Vec::new(),
        &mut |_, rng| {
            let mut out = Vec::new();
            for c in &train_cases {
                let patches =
                    sample_refinement_patches(&c.image, &c.mask, patch, spacing, ppv, bias, rng)?;
                for (pi, p) in patches.into_iter().enumerate() {
                    out.push(Example {
                        id: format!("{}#{pi}", c.name),
                        input: p.input,
                        target: p.target,
                    });
                }
            }
            out.shuffle(rng);
            Ok(out)
        },
        &mut |m| {
            if val_patches.is_empty() {
                return Ok(ValScores {
                    loss: None,
                    metric: None,
                });
            }
            let mut losses = Vec::new();
            let mut dices = Vec::new();
            for p in &val_patches {
                let logits = m.forward(&p.input)?;
                let (loss, _) = focal_loss(&logits, &p.target, &focal)?;
                losses.push(loss);
                let mut probs = logits;
                probs.softmax_channels();
                for label in 1..3u8 {
                    dices.push(patch_dice(&probs, &p.target, label));
                }
            }
            Ok(ValScores {
                loss: mean(&losses),
                metric: mean(&dices),
            })
        },
    )?;
    Ok(TrainOutput {
        weights,
        history,
        transfer: None,
    })
}

/// Train a landmark detector: bone / face on full volumes at the coarse
/// spacing, teeth on fixed-extent patches at the tooth spacing.
///
/// `source` supplies transfer initialization from the segmentation weights;
/// `None` trains from scratch.
pub fn train_landmark_detector(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    group: LandmarkGroup,
    source: Option<&ModelWeights>,
) -> Result<TrainOutput> {
    let lm_manifest = LandmarkManifest::load(&cfg.data.landmark_manifest)?;
    let kind = match group {
        LandmarkGroup::Bone => StageKind::BoneDet,
        LandmarkGroup::Face => StageKind::FaceDet,
        LandmarkGroup::Teeth => StageKind::ToothDet,
    };
    let classes = stage_classes(kind, &lm_manifest);
    if classes < 2 {
        return Err(Error::Configuration(format!(
            "landmark manifest has no '{group}' landmarks"
        )));
    }
    let spec = cfg.model.spec(classes);
    let mut transfer_report = None;
    let mut model = match source {
        Some(src) => {
            let (weights, report) = transfer_init(&spec, src, cfg.model.seed)?;
            let m = weights.instantiate()?;
            transfer_report = Some(report);
            m
        }
        None => build_model(&spec, cfg.model.seed)?,
    };

    let mut train_cases = load_split(manifest, Split::Train)?;
    if train_cases.is_empty() {
        return Err(Error::Configuration(
            "dataset manifest has no training cases".into(),
        ));
    }
    if cfg.train.augment_flip {
        let flipped: Vec<NativeCase> = train_cases
            .iter()
            .map(|c| data::flip_case(c, &lm_manifest))
            .collect();
        train_cases.extend(flipped);
    }
    let val_cases = load_split(manifest, Split::Val)?;

    // Group/class-count consistency between dataset and manifest.
    for c in train_cases.iter().chain(&val_cases) {
        let subset = c.landmarks.group_subset(group);
        if subset.len() + 1 != classes {
            return Err(Error::Configuration(format!(
                "case '{}' has {} '{group}' landmarks but the manifest declares {}",
                c.name,
                subset.len(),
                classes - 1
            )));
        }
    }

    let radius = SphereRadius::new(cfg.stage.sphere_radius)?;
    let threshold = cfg.stage.decode_threshold;
    let (shift, scale) = (cfg.data.intensity_shift, cfg.data.intensity_scale);
    let focal = focal_params(&cfg.train, classes)?;
    let mut notes = Vec::new();

    let (weights, history) = if kind == StageKind::ToothDet {
        spec.check_extents(cfg.stage.patch_extent)?;
        let patch = cfg.stage.patch_extent;
        let spacing = cfg.stage.spacing;
        let extent_mm = cfg.stage.tooth_patch_extent_mm.unwrap_or([
            patch[0] as f64 * spacing[0],
            patch[1] as f64 * spacing[1],
            patch[2] as f64 * spacing[2],
        ]);
        for a in 0..3 {
            let implied = patch[a] as f64 * spacing[a];
            if (extent_mm[a] - implied).abs() > 1e-9 {
                return Err(Error::Configuration(format!(
                    "tooth_patch_extent_mm[{a}] = {} must equal patch_extent*spacing = {implied}",
                    extent_mm[a]
                )));
            }
        }
        let anchors = lm_manifest.tooth_anchors.clone();
        // Patches centered on the anchor centroid with a small jitter so
        // inference tolerates anchor decode error; validation is unjittered.
        let mk_example =
            |c: &NativeCase, jitter: Option<[f64; 3]>| -> Result<(Example, Grid, LandmarkSet)> {
                let mut roi = compute_tooth_roi(&c.landmarks, &anchors, extent_mm, spacing)?;
                if let Some(j) = jitter {
                    for a in 0..3 {
                        roi.lower_corner[a] += j[a];
                        roi.upper_corner[a] += j[a];
                    }
                }
                let crop = c.image.crop(&roi, Interp::Linear)?;
                let crop = normalize_image(&crop, shift, scale)?;
                let img_t = Tensor4::from_volume(&crop).crop_to(patch);
                let subset = c.landmarks.group_subset(group);
                let (target_vol, _) = encode_landmarks(&subset, crop.grid(), radius)?;
                let target_t = Tensor4::from_volume(&target_vol).crop_to(patch);
                let grid = Grid::new(patch, crop.spacing(), crop.origin())?;
                Ok((
                    Example {
                        id: c.name.clone(),
                        input: img_t,
                        target: target_t.data.iter().map(|&v| v as u8).collect(),
                    },
                    grid,
                    subset,
                ))
            };
        // Surface sphere-clipping warnings once per case.
        for c in &train_cases {
            let (_, grid, subset) = mk_example(c, None)?;
            let (_, warns) = encode_landmarks(&subset, &grid, radius)?;
            for w in warns {
                notes.push(format!("case '{}': {w}", c.name));
            }
        }
        let ppv = cfg.train.patches_per_volume.max(1);
        run_loop(
            &mut model,
            cfg,
            kind,
            "val_rmse_mm",
            MetricSense::LowerBetter,
            notes,
            &mut |_, rng| {
                let mut out = Vec::new();
                for c in &train_cases {
                    for _ in 0..ppv {
                        let j = [
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-2.0..2.0),
                        ];
                        out.push(mk_example(c, Some(j))?.0);
                    }
                }
                out.shuffle(rng);
                Ok(out)
            },
            &mut |m| {
                if val_cases.is_empty() {
                    return Ok(ValScores {
                        loss: None,
                        metric: None,
                    });
                }
                let mut losses = Vec::new();
                let mut rmses = Vec::new();
                for c in &val_cases {
                    let (ex, grid, subset) = mk_example(c, None)?;
                    let logits = m.forward(&ex.input)?;
                    let (loss, _) = focal_loss(&logits, &ex.target, &focal)?;
                    losses.push(loss);
                    let mut probs = logits;
                    probs.softmax_channels();
                    let probs = probs.into_prob_volume(grid)?;
                    let decoded =
                        decode_landmarks(&probs, &subset, threshold, DecodeMode::WeightedCentroid)?;
                    match metrics::landmark_rmse(&decoded, &subset, group) {
                        Some(r) if decoded.entries().iter().all(|e| e.present) => rmses.push(r),
                        _ => rmses.push(f64::INFINITY),
                    }
                }
                Ok(ValScores {
                    loss: mean(&losses),
                    metric: mean(&rmses),
                })
            },
        )?
    } else {
        // Bone / face detectors: full volumes at the coarse spacing.
        let prep = |cs: &[NativeCase],
                    notes: &mut Vec<String>|
         -> Result<Vec<(String, Tensor4, Vec<u8>, Volume, LandmarkSet)>> {
            cs.iter()
                .map(|c| {
                    let (img, _) = data::resample_case(c, cfg.stage.spacing, shift, scale)?;
                    let subset = c.landmarks.group_subset(group);
                    let (target_vol, warns) = encode_landmarks(&subset, img.grid(), radius)?;
                    for w in warns {
                        notes.push(format!("case '{}': {w}", c.name));
                    }
                    Ok((
                        c.name.clone(),
                        Tensor4::from_volume(&img),
                        data::labels_to_target(&target_vol),
                        target_vol,
                        subset,
                    ))
                })
                .collect()
        };
        let train_prepped = prep(&train_cases, &mut notes)?;
        let val_prepped = prep(&val_cases, &mut Vec::new())?;

        run_loop(
            &mut model,
            cfg,
            kind,
            "val_rmse_mm",
            MetricSense::LowerBetter,
            notes,
            &mut |_, rng| {
                let mut order: Vec<usize> = (0..train_prepped.len()).collect();
                order.shuffle(rng);
                Ok(order
                    .into_iter()
                    .map(|i| Example {
                        id: train_prepped[i].0.clone(),
                        input: train_prepped[i].1.clone(),
                        target: train_prepped[i].2.clone(),
                    })
                    .collect())
            },
            &mut |m| {
                if val_prepped.is_empty() {
                    return Ok(ValScores {
                        loss: None,
                        metric: None,
                    });
                }
                let mut losses = Vec::new();
                let mut rmses = Vec::new();
                for (_, input, target, target_vol, subset) in &val_prepped {
                    let logits = m.forward(input)?;
                    let (loss, _) = focal_loss(&logits, target, &focal)?;
                    losses.push(loss);
                    let probs = m.predict_probs(input)?;
                    let probs = probs.into_prob_volume(target_vol.grid().clone())?;
                    let decoded =
                        decode_landmarks(&probs, subset, threshold, DecodeMode::WeightedCentroid)?;
                    match metrics::landmark_rmse(&decoded, subset, group) {
                        Some(r) if decoded.entries().iter().all(|e| e.present) => rmses.push(r),
                        _ => rmses.push(f64::INFINITY),
                    }
                }
                Ok(ValScores {
                    loss: mean(&losses),
                    metric: mean(&rmses),
                })
            },
        )?
    };

    Ok(TrainOutput {
        weights,
        history,
        transfer: transfer_report,
    })
}

/// Dispatch a stage by kind (the CLI entry point).
pub fn train_stage(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    init: Option<&ModelWeights>,
) -> Result<TrainOutput> {
    match cfg.stage.kind {
        StageKind::CoarseSeg => train_coarse_segmentation(manifest, cfg),
        StageKind::RefineSeg => train_refine_segmentation(manifest, cfg),
        StageKind::BoneDet => train_landmark_detector(manifest, cfg, LandmarkGroup::Bone, init),
        StageKind::FaceDet => train_landmark_detector(manifest, cfg, LandmarkGroup::Face, init),
        StageKind::ToothDet => train_landmark_detector(manifest, cfg, LandmarkGroup::Teeth, init),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{self, JitterSpec, PhantomSpec};

    /// A tiny on-disk phantom dataset plus a config for fast tests.
    fn tiny_setup(dir: &std::path::Path, kind: StageKind, epochs: usize) -> (DatasetManifest, TrainConfig) {
        let base = PhantomSpec {
            extents: [32, 32, 32],
            spacing: [4.0; 3],
            coarse_spacing_hint: 8.0,
            thin_thickness: 6.0,
            seed: 5,
            ..PhantomSpec::default()
        };
        let jitter = JitterSpec {
            translate_mm: 1.0,
            thin_range: [5.0, 7.0],
            ..JitterSpec::default()
        };
        let manifest = phantom::generate_dataset(10, &base, &jitter, dir).unwrap();
        let cfg = TrainConfig {
            data: DataConfig {
                landmark_manifest: dir.join("landmark_manifest.toml"),
                intensity_shift: 0.0,
                intensity_scale: 1000.0,
            },
            model: ModelConfig {
                depth: 2,
                base_channels: 2,
                seed: 7,
            },
            train: TrainParams {
                epochs,
                learning_rate: 1e-3,
                lr_decay_epochs: 8,
                lr_decay_factor: 0.5,
                gamma: 2.0,
                alpha_foreground: 0.25,
                alpha_background: 0.75,
                alpha: None,
                seed: 11,
                augment_flip: false,
                patches_per_volume: 2,
                foreground_bias: 0.5,
            },
            stage: StageConfig {
                kind,
                spacing: [8.0; 3],
                patch_extent: [8, 8, 8],
                sphere_radius: 2,
                decode_threshold: 0.5,
                tooth_patch_extent_mm: None,
            },
        };
        (manifest, cfg)
    }

    #[test]
    fn coarse_training_is_deterministic_and_lr_zero_freezes_weights() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, mut cfg) = tiny_setup(dir.path(), StageKind::CoarseSeg, 2);

        let a = train_coarse_segmentation(&manifest, &cfg).unwrap();
        let b = train_coarse_segmentation(&manifest, &cfg).unwrap();
        assert_eq!(a.weights.tensors, b.weights.tensors);
        for (ea, eb) in a.history.epochs.iter().zip(&b.history.epochs) {
            assert!((ea.mean_loss - eb.mean_loss).abs() < 1e-6);
        }

        // lr = 0: weights unchanged, loss history constant.
        cfg.train.learning_rate = 0.0;
        let frozen = train_coarse_segmentation(&manifest, &cfg).unwrap();
        let fresh = build_model(&cfg.model.spec(3), cfg.model.seed).unwrap();
        let fresh_w = ModelWeights::from_model(&fresh, "coarse-seg", cfg.stage.spacing);
        assert_eq!(frozen.weights.tensors, fresh_w.tensors);
        let losses: Vec<f64> = frozen.history.epochs.iter().map(|e| e.mean_loss).collect();
        assert!((losses[0] - losses[1]).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_selection_is_monotone_best() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, cfg) = tiny_setup(dir.path(), StageKind::CoarseSeg, 3);
        let out = train_coarse_segmentation(&manifest, &cfg).unwrap();
        let best = out.history.best_epoch.expect("val split exists");
        let best_metric = out.history.epochs[best].val_metric.unwrap();
        for e in &out.history.epochs {
            assert!(best_metric >= e.val_metric.unwrap());
        }
    }

    #[test]
    fn detector_transfer_paths() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, mut cfg) = tiny_setup(dir.path(), StageKind::CoarseSeg, 1);
        let seg = train_coarse_segmentation(&manifest, &cfg).unwrap();

        // Zero-epoch transfer training returns the transfer-initialized
        // weights bitwise.
        cfg.stage.kind = StageKind::BoneDet;
        cfg.train.epochs = 0;
        let out =
            train_landmark_detector(&manifest, &cfg, LandmarkGroup::Bone, Some(&seg.weights))
                .unwrap();
        let lm_manifest = LandmarkManifest::load(&cfg.data.landmark_manifest).unwrap();
        let classes = lm_manifest.group_names(LandmarkGroup::Bone).len() + 1;
        let (expect, report) =
            transfer_init(&cfg.model.spec(classes), &seg.weights, cfg.model.seed).unwrap();
        assert_eq!(out.weights.tensors, expect.tensors);
        assert_eq!(
            out.transfer.unwrap().reinitialized,
            report.reinitialized
        );

        // Source with wrong depth is a structural mismatch.
        let mut bad_cfg = cfg.clone();
        bad_cfg.model.depth = 3;
        // patch extents must stay compatible with the deeper model
        bad_cfg.stage.patch_extent = [8, 8, 8];
        let err =
            train_landmark_detector(&manifest, &bad_cfg, LandmarkGroup::Bone, Some(&seg.weights))
                .unwrap_err();
        assert!(matches!(err, Error::StructuralMismatch(_)));
    }

    #[test]
    fn tooth_detector_trains_on_fixed_extent_patches() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, mut cfg) = tiny_setup(dir.path(), StageKind::ToothDet, 1);
        cfg.stage.spacing = [2.0; 3];
        cfg.stage.patch_extent = [16, 16, 16];
        let out = train_landmark_detector(&manifest, &cfg, LandmarkGroup::Teeth, None).unwrap();
        assert_eq!(out.history.stage, StageKind::ToothDet);
        assert_eq!(out.weights.spec.num_classes, 7);

        // Mismatched declared extent is a configuration error.
        cfg.stage.tooth_patch_extent_mm = Some([30.0, 32.0, 32.0]);
        assert!(matches!(
            train_landmark_detector(&manifest, &cfg, LandmarkGroup::Teeth, None),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn refine_segmentation_smoke() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, mut cfg) = tiny_setup(dir.path(), StageKind::RefineSeg, 1);
        cfg.stage.spacing = [2.0; 3];
        let out = train_refine_segmentation(&manifest, &cfg).unwrap();
        assert_eq!(out.weights.stage_tag, "refine-seg");
        assert_eq!(out.weights.input_spacing, [2.0; 3]);
        assert_eq!(out.history.epochs.len(), 1);
    }
}
