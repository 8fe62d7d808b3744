//! Command-line workflows: phantom dataset generation, stage training,
//! two-stage inference, and evaluation reports.
//!
//! Every command is deterministic given its inputs and seeds and writes a
//! machine-readable `run_log.json` (config hash, versions, seed, timings)
//! next to its outputs. Set `CMFSEG_QUIET=1` to silence progress output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use cmfseg_core::landmark::{self, LandmarkGroup};
use cmfseg_core::metrics::{self, CaseMetrics, GroupMetrics, StructureMetrics};
use cmfseg_core::model::ModelWeights;
use cmfseg_core::phantom::{self, JitterSpec, PhantomSpec};
use cmfseg_core::pipeline::{
    self, load_bundle, PipelineConfig, EXIT_CLEAN, EXIT_DEGRADED, EXIT_FAILED,
};
use cmfseg_core::trainer::{self, DatasetManifest, Split, StageKind, TrainConfig};
use cmfseg_core::{nifti, volume::VolumeKind};

#[derive(Parser)]
#[command(
    name = "cmfseg",
    version,
    about = "Coarse-to-fine volumetric bone segmentation and landmark detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with exact ground truth.
    Phantom(PhantomArgs),
    /// Train one pipeline stage.
    Train(TrainArgs),
    /// Assemble a bundle manifest from five stage archives.
    Bundle(BundleArgs),
    /// Run the full two-stage pipeline on one image.
    Infer(InferArgs),
    /// Evaluate predictions against ground truth and write a report.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom spec file (TOML); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of cases to generate.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Master seed (overrides the spec's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Disable pose/scale/thickness jitter.
    #[arg(long)]
    no_jitter: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage to train: coarse-seg, bone-det, face-det, refine-seg, tooth-det.
    #[arg(long)]
    stage: String,
    /// Training config (TOML with [data]/[model]/[train]/[stage]).
    #[arg(long)]
    config: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the weight archive and history.
    #[arg(long)]
    out: PathBuf,
    /// Segmentation weights for transfer initialization (detector stages).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Allow training a detector from scratch without --init.
    #[arg(long)]
    no_transfer: bool,
    /// Seed override (sets both the init and shuffling seeds).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BundleArgs {
    /// Directory holding the five stage archives (*.vxcw).
    #[arg(long)]
    dir: PathBuf,
    /// Landmark manifest to copy into the bundle.
    #[arg(long)]
    landmarks: PathBuf,
    /// Pipeline config file (TOML); defaults are used when omitted.
    #[arg(long)]
    pipeline_config: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Bundle directory with bundle.toml.
    #[arg(long)]
    bundle: PathBuf,
    /// Input image (.nii / .nii.gz).
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of per-case prediction subdirectories.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth dataset manifest.
    #[arg(long)]
    gt: PathBuf,
    /// Landmark TPR distance threshold in mm.
    #[arg(long, default_value_t = 4.0)]
    tau: f64,
    /// Report output path (JSON; a .txt rendering is written alongside).
    #[arg(long)]
    out: PathBuf,
    /// Restrict evaluation to one split (train/val/test); default test.
    #[arg(long, default_value = "test")]
    split: String,
}

fn quiet() -> bool {
    std::env::var("CMFSEG_QUIET").map(|v| v == "1").unwrap_or(false)
}

macro_rules! say {
    ($($arg:tt)*) => {
        if !quiet() {
            println!($($arg)*);
        }
    };
}

fn sha256_file(path: &Path) -> Option<String> {
    let bytes = std::fs::read(path).ok()?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Some(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Machine-readable run log written next to every command's outputs.
fn write_run_log(
    out_dir: &Path,
    command: &str,
    config_hash: Option<String>,
    seed: Option<u64>,
    extra: BTreeMap<String, serde_json::Value>,
    started: Instant,
) -> anyhow::Result<()> {
    let mut log = BTreeMap::new();
    log.insert("command".to_string(), serde_json::json!(command));
    log.insert(
        "cli_version".to_string(),
        serde_json::json!(env!("CARGO_PKG_VERSION")),
    );
    log.insert(
        "core_version".to_string(),
        serde_json::json!(cmfseg_core::VERSION),
    );
    log.insert("config_sha256".to_string(), serde_json::json!(config_hash));
    log.insert("seed".to_string(), serde_json::json!(seed));
    log.insert(
        "elapsed_ms".to_string(),
        serde_json::json!(started.elapsed().as_secs_f64() * 1e3),
    );
    for (k, v) in extra {
        log.insert(k, v);
    }
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("run_log.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&log)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_phantom(args: PhantomArgs) -> anyhow::Result<i32> {
    let started = Instant::now();
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            toml::from_str::<PhantomSpec>(&text).map_err(|e| anyhow!("bad phantom spec: {e}"))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let jitter = if args.no_jitter {
        JitterSpec {
            enabled: false,
            ..JitterSpec::default()
        }
    } else {
        JitterSpec::default()
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output dir {}", args.out.display()))?;
    let manifest = phantom::generate_dataset(args.count, &spec, &jitter, &args.out)?;
    let (train, val, test) = (
        manifest.split(Split::Train).len(),
        manifest.split(Split::Val).len(),
        manifest.split(Split::Test).len(),
    );
    say!(
        "generated {} phantoms under {} (split train/val/test = {train}/{val}/{test})",
        args.count,
        args.out.display()
    );
    let config_hash = args.spec.as_deref().and_then(sha256_file);
    write_run_log(
        &args.out,
        "phantom",
        config_hash,
        Some(spec.seed),
        BTreeMap::from([
            ("count".to_string(), serde_json::json!(args.count)),
            (
                "split".to_string(),
                serde_json::json!({"train": train, "val": val, "test": test}),
            ),
        ]),
        started,
    )?;
    Ok(EXIT_CLEAN)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<i32> {
    let started = Instant::now();
    let stage = StageKind::parse(&args.stage)?;
    let mut cfg = TrainConfig::load(&args.config)?;
    cfg.stage.kind = stage;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.model.seed = seed;
    }
    if stage.is_detector() && args.init.is_none() && !args.no_transfer {
        bail!(
            "stage {stage} is transfer-initialized from the coarse segmentation weights; \
             pass --init <coarse-seg archive>, or --no-transfer to train from scratch"
        );
    }
    let init = match &args.init {
        Some(path) => Some(ModelWeights::load(path)?),
        None => None,
    };
    let manifest = DatasetManifest::load(&args.manifest)?;
    say!("training {stage} on {} cases", manifest.cases.len());
    let output = trainer::train_stage(&manifest, &cfg, init.as_ref())?;

    std::fs::create_dir_all(&args.out)?;
    let slug = stage.as_str().replace('-', "_");
    let archive = args.out.join(format!("{slug}.vxcw"));
    output.weights.save(&archive)?;
    let history_path = args.out.join(format!("{slug}_history.json"));
    std::fs::write(&history_path, serde_json::to_vec_pretty(&output.history)?)?;
    if let Some(report) = &output.transfer {
        let report_path = args.out.join(format!("{slug}_transfer_report.json"));
        std::fs::write(&report_path, serde_json::to_vec_pretty(report)?)?;
        say!(
            "transfer init: {} tensors copied, {} re-initialized",
            report.copied.len(),
            report.reinitialized.len()
        );
    }
    if let Some(best) = output.history.best_epoch {
        let e = &output.history.epochs[best];
        say!(
            "best epoch {best}: {} {}",
            output.history.metric_name,
            e.val_metric.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
        );
    }
    say!("wrote {}", archive.display());
    write_run_log(
        &args.out,
        "train",
        sha256_file(&args.config),
        Some(cfg.train.seed),
        BTreeMap::from([
            ("stage".to_string(), serde_json::json!(stage.as_str())),
            (
                "best_epoch".to_string(),
                serde_json::json!(output.history.best_epoch),
            ),
            (
                "weights_sha256".to_string(),
                serde_json::json!(output.weights.checksum()),
            ),
        ]),
        started,
    )?;
    Ok(EXIT_CLEAN)
}

fn cmd_bundle(args: BundleArgs) -> anyhow::Result<i32> {
    let started = Instant::now();
    let config = match &args.pipeline_config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<PipelineConfig>(&text)
                .map_err(|e| anyhow!("bad pipeline config: {e}"))?
        }
        None => PipelineConfig::default(),
    };
    let lm_target = args.dir.join("landmark_manifest.toml");
    if args.landmarks != lm_target {
        std::fs::copy(&args.landmarks, &lm_target)
            .with_context(|| format!("copying {}", args.landmarks.display()))?;
    }
    pipeline::write_bundle_manifest(&args.dir, &config, Path::new("landmark_manifest.toml"))?;
    // Fail fast if the assembled bundle does not pass its own checks.
    load_bundle(&args.dir)?;
    say!(
        "bundle manifest written to {}",
        args.dir.join("bundle.toml").display()
    );
    write_run_log(
        &args.dir,
        "bundle",
        args.pipeline_config.as_deref().and_then(sha256_file),
        None,
        BTreeMap::new(),
        started,
    )?;
    Ok(EXIT_CLEAN)
}

fn cmd_infer(args: InferArgs) -> anyhow::Result<i32> {
    let started = Instant::now();
    let t_load = Instant::now();
    let bundle = load_bundle(&args.bundle)?;
    let load_ms = t_load.elapsed().as_secs_f64() * 1e3;

    let t_read = Instant::now();
    let image = nifti::read_volume(&args.input)?;
    let read_ms = t_read.elapsed().as_secs_f64() * 1e3;
    if image.kind() != VolumeKind::Image {
        bail!("input {} is not an intensity image", args.input.display());
    }

    let mut result = pipeline::run_full(&image, &bundle)?;
    result
        .provenance
        .timings_ms
        .insert("model_load".to_string(), load_ms);
    result
        .provenance
        .timings_ms
        .insert("read_input".to_string(), read_ms);

    std::fs::create_dir_all(&args.out)?;
    let t_write = Instant::now();
    nifti::write_volume(&result.final_mask, args.out.join("final_mask.nii.gz"))?;
    landmark::write_landmarks(&result.landmarks, args.out.join("landmarks.csv"))?;
    if let Some(plan) = &result.provenance.roi_plan {
        plan.save(args.out.join("roi_plan.toml"))?;
    }
    result.provenance.timings_ms.insert(
        "write_outputs".to_string(),
        t_write.elapsed().as_secs_f64() * 1e3,
    );
    result.provenance.save(args.out.join("provenance.toml"))?;

    let degraded = result.provenance.degraded;
    say!(
        "inference {} -> {} ({}, {} warnings)",
        args.input.display(),
        args.out.display(),
        if degraded { "DEGRADED" } else { "clean" },
        result.provenance.warnings.len()
    );
    write_run_log(
        &args.out,
        "infer",
        sha256_file(&args.bundle.join("bundle.toml")),
        None,
        BTreeMap::from([
            ("degraded".to_string(), serde_json::json!(degraded)),
            (
                "warnings".to_string(),
                serde_json::json!(result.provenance.warnings.len()),
            ),
        ]),
        started,
    )?;
    Ok(if degraded { EXIT_DEGRADED } else { EXIT_CLEAN })
}

fn structure_label(name: &str) -> u32 {
    match name {
        "midface" => 1,
        "mandible" => 2,
        _ => 0,
    }
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<i32> {
    let started = Instant::now();
    let manifest = DatasetManifest::load(&args.gt)?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split '{other}'"),
    };
    let mut cases = Vec::new();
    for entry in manifest.split(split) {
        let pred_dir = args.pred.join(&entry.name);
        let mask_path = pred_dir.join("final_mask.nii.gz");
        let lms_path = pred_dir.join("landmarks.csv");
        if !mask_path.exists() || !lms_path.exists() {
            cases.push(CaseMetrics {
                case: entry.name.clone(),
                structures: BTreeMap::new(),
                groups: BTreeMap::new(),
                failed: Some(format!(
                    "missing prediction files under {}",
                    pred_dir.display()
                )),
            });
            continue;
        }
        let pred_mask = nifti::read_volume(&mask_path)?;
        let gt_mask = nifti::read_volume(manifest.resolve(&entry.mask))?;
        let pred_lms = landmark::read_landmarks(&lms_path)?;
        let gt_lms = landmark::read_landmarks(manifest.resolve(&entry.landmarks))?;

        let mut structures = BTreeMap::new();
        for name in ["midface", "mandible"] {
            let label = structure_label(name);
            structures.insert(
                name.to_string(),
                StructureMetrics {
                    dice: metrics::dice(&pred_mask, &gt_mask, label)?,
                    sensitivity: metrics::sensitivity(&pred_mask, &gt_mask, label)?,
                    ppv: metrics::ppv(&pred_mask, &gt_mask, label)?,
                },
            );
        }
        let mut groups = BTreeMap::new();
        for group in LandmarkGroup::ALL {
            groups.insert(
                group.as_str().to_string(),
                GroupMetrics {
                    rmse_mm: metrics::landmark_rmse(&pred_lms, &gt_lms, group),
                    tpr_percent: metrics::landmark_tpr(&pred_lms, &gt_lms, group, args.tau),
                },
            );
        }
        cases.push(CaseMetrics {
            case: entry.name.clone(),
            structures,
            groups,
            failed: None,
        });
    }
    let report = metrics::build_report(cases, args.tau);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, serde_json::to_vec_pretty(&report)?)?;
    let text = report.render_text();
    let text_path = args.out.with_extension("txt");
    std::fs::write(&text_path, &text)?;
    say!("{text}");
    say!(
        "report written to {} and {}",
        args.out.display(),
        text_path.display()
    );
    let log_dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    write_run_log(
        &log_dir,
        "eval",
        sha256_file(&args.gt),
        None,
        BTreeMap::from([
            ("tau_mm".to_string(), serde_json::json!(args.tau)),
            ("cases".to_string(), serde_json::json!(report.cases.len())),
        ]),
        started,
    )?;
    Ok(EXIT_CLEAN)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Train(args) => cmd_train(args),
        Command::Bundle(args) => cmd_bundle(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILED as u8)
        }
    }
}
