//! Command-line front end: phantom generation, training, inference,
//! evaluation, gradient verification and slice export as reproducible runs.
//! Every command writes a RunManifest next to its outputs; flags may come
//! from a JSON config file, with the command line taking precedence.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck;
use crate::metrics::{self, MetricsReport, VolumeRecord, WALL_THICKNESS_MM};
use crate::net::{load_checkpoint, save_checkpoint, MvttConfig, MvttModel};
use crate::phantom::{
    generate_phantom, normalize, read_volume, write_volume, PhantomSpec, Volume,
};
use crate::runtime;
use crate::train::{train, TrainConfig, TrainVolume};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "mvtt", version, about = "Multiview two-task segmentation")]
pub struct Cli {
    /// Force fixed reduction order and single-threaded reductions.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate synthetic phantom volumes with exact ground truth.
    Phantom(PhantomArgs),
    /// Train a model on a directory of phantom cases.
    Train(TrainArgs),
    /// Run inference on one volume with a trained checkpoint.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Export a volume as one grayscale PGM image per axial slice.
    ExportSlices(ExportArgs),
}

/// Record of one command invocation; replaying it with the same seed under
/// the deterministic flag reproduces the artifacts bitwise.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub tool_version: String,
    /// Wall-clock seconds; written as 0.0 under the deterministic flag so
    /// replays stay bitwise-identical.
    pub seconds: f64,
}

fn manifest_seconds(t0: Instant) -> f64 {
    if runtime::deterministic() {
        0.0
    } else {
        t0.elapsed().as_secs_f64()
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, json).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn load_config_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        reason: format!("bad config: {}", e),
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!("dims '{s}' must look like ZxYxX")));
    }
    let mut d = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        d[i] = p
            .parse()
            .map_err(|_| Error::invalid(format!("dims '{s}': '{p}' is not a count")))?;
        if d[i] == 0 {
            return Err(Error::invalid("dims must be >= 1 per axis"));
        }
    }
    Ok((d[0], d[1], d[2]))
}

// ---------------------------------------------------------------- phantom

/// Flags the config file may supply for `phantom`; command line overrides.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomOptions {
    pub count: Option<usize>,
    pub dims: Option<String>,
    pub seed: Option<u64>,
    pub scar_patches: Option<usize>,
    pub scar_thickness: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PhantomArgs {
    /// JSON file supplying any of the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of phantom cases to generate.
    #[arg(long)]
    pub count: Option<usize>,
    /// Grid dimensions as ZxYxX.
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of scar patches per phantom (0 for scar-free cases).
    #[arg(long = "scar-patches")]
    pub scar_patches: Option<usize>,
    /// Scar patch thickness in millimetres.
    #[arg(long = "scar-thickness")]
    pub scar_thickness: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    let t0 = Instant::now();
    let file: PhantomOptions = match &args.config {
        Some(p) => load_config_file(p)?,
        None => PhantomOptions::default(),
    };
    let count = args.count.or(file.count).unwrap_or(4);
    let dims_text = args
        .dims
        .clone()
        .or(file.dims)
        .unwrap_or_else(|| "16x32x32".to_string());
    let dims = parse_dims(&dims_text)?;
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let scar_patches = args.scar_patches.or(file.scar_patches).unwrap_or(3);
    let scar_thickness = args.scar_thickness.or(file.scar_thickness);
    let out = args
        .out
        .clone()
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("."));
    if count == 0 {
        return Err(Error::invalid("count must be >= 1"));
    }
    ensure_dir(&out)?;

    let mut artifacts = Vec::new();
    for i in 0..count {
        let mut spec = PhantomSpec::desk_scale(seed + i as u64);
        spec.dims = dims;
        let extent = (
            dims.0 as f64 * spec.spacing_mm.0,
            dims.1 as f64 * spec.spacing_mm.1,
            dims.2 as f64 * spec.spacing_mm.2,
        );
        spec.center_mm = (extent.0 / 2.0, extent.1 / 2.0, extent.2 / 2.0);
        let semi = (extent.0.min(extent.1).min(extent.2) * 0.35).max(1.0);
        spec.semi_axes_mm = (semi, semi, semi);
        spec.pv_radius_mm = (semi * 0.3).max(0.5);
        spec.scar_patch_count = scar_patches;
        if let Some(t) = scar_thickness {
            spec.scar_thickness_mm = t;
        }
        let phantom = generate_phantom(&spec)?;
        for (suffix, volume) in [
            ("intensity", &phantom.intensity),
            ("anatomy", &phantom.anatomy_gt),
            ("scar", &phantom.scar_gt),
        ] {
            let path = out.join(format!("case_{i:03}_{suffix}.vjson"));
            write_volume(volume, &path)?;
            artifacts.push(path.display().to_string());
        }
        let truth_path = out.join(format!("case_{i:03}_truth.json"));
        write_json(
            &serde_json::json!({
                "spec": spec,
                "scar_burden_pct": phantom.scar_fraction,
            }),
            &truth_path,
        )?;
        artifacts.push(truth_path.display().to_string());
    }

    let manifest = RunManifest {
        command: "phantom".to_string(),
        config: serde_json::json!({
            "count": count,
            "dims": dims_text,
            "seed": seed,
            "scar_patches": scar_patches,
            "scar_thickness": scar_thickness,
            "out": out,
            "deterministic": runtime::deterministic(),
        }),
        seed,
        artifacts,
        tool_version: TOOL_VERSION.to_string(),
        seconds: manifest_seconds(t0),
    };
    write_json(&manifest, &out.join("manifest.json"))
}

// ------------------------------------------------------------------ train

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay: Option<f64>,
    pub early_stopping: Option<bool>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub channels: Option<usize>,
    pub val_count: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of case_*_intensity/anatomy/scar volumes.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "lr-decay")]
    pub lr_decay: Option<f64>,
    #[arg(long = "early-stopping")]
    pub early_stopping: bool,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Channel width C of the model.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Hold out the last N cases (by id) as the validation set.
    #[arg(long = "val-count")]
    pub val_count: Option<usize>,
}

/// Ids present in `dir` that have all three of intensity/anatomy/scar files.
pub fn list_case_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(id) = name.strip_suffix("_intensity.vjson") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.retain(|id| {
        dir.join(format!("{id}_anatomy.vjson")).exists()
            && dir.join(format!("{id}_scar.vjson")).exists()
    });
    Ok(ids)
}

pub fn load_case(dir: &Path, id: &str) -> Result<TrainVolume> {
    let intensity = read_volume(&dir.join(format!("{id}_intensity.vjson")))?;
    let anatomy = read_volume(&dir.join(format!("{id}_anatomy.vjson")))?;
    let scar = read_volume(&dir.join(format!("{id}_scar.vjson")))?;
    Ok(TrainVolume {
        id: id.to_string(),
        intensity: normalize(&intensity)?,
        anatomy,
        scar,
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let file: TrainOptions = match &args.config {
        Some(p) => load_config_file(p)?,
        None => TrainOptions::default(),
    };
    let data = args
        .data
        .clone()
        .or(file.data)
        .ok_or_else(|| Error::invalid("train: --data is required"))?;
    let out = args
        .out
        .clone()
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("."));
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let channels = args.channels.or(file.channels).unwrap_or(4);
    let val_count = args.val_count.or(file.val_count).unwrap_or(0);

    let mut train_config = TrainConfig {
        seed,
        deterministic: runtime::deterministic(),
        ..TrainConfig::default()
    };
    if let Some(e) = args.epochs.or(file.epochs) {
        train_config.max_epochs = e;
    }
    if let Some(lr) = args.lr.or(file.lr) {
        train_config.initial_lr = lr;
    }
    if let Some(d) = args.lr_decay.or(file.lr_decay) {
        train_config.lr_decay_rate = d;
    }
    if args.early_stopping || file.early_stopping.unwrap_or(false) {
        train_config.early_stopping = true;
    }
    if let Some(p) = args.patience.or(file.patience) {
        train_config.early_stop_patience = p;
    }

    let ids = list_case_ids(&data)?;
    if ids.is_empty() {
        return Err(Error::invalid(format!(
            "no cases found under {}",
            data.display()
        )));
    }
    if val_count >= ids.len() {
        return Err(Error::invalid(
            "val-count must leave at least one training case",
        ));
    }
    let split = ids.len() - val_count;
    let train_set: Vec<TrainVolume> = ids[..split]
        .iter()
        .map(|id| load_case(&data, id))
        .collect::<Result<_>>()?;
    let val_set: Vec<TrainVolume> = ids[split..]
        .iter()
        .map(|id| load_case(&data, id))
        .collect::<Result<_>>()?;

    let dims = train_set[0].intensity.dims;
    for case in train_set.iter().chain(&val_set) {
        if case.intensity.dims != dims {
            return Err(Error::invalid(format!(
                "case '{}' has dims {:?}, expected {:?}",
                case.id, case.intensity.dims, dims
            )));
        }
    }
    ensure_dir(&out)?;

    let model = MvttModel::new(MvttConfig::desk_scale(channels), dims, seed)?;
    let result = train(model, &train_set, &val_set, &train_config, None)?;

    let checkpoint_path = out.join("checkpoint.json");
    save_checkpoint(&result.model, &checkpoint_path)?;
    let log_path = out.join("train_log.jsonl");
    let mut log_text = String::new();
    for entry in &result.log {
        log_text.push_str(&serde_json::to_string(entry).map_err(|e| Error::Malformed {
            path: log_path.display().to_string(),
            reason: e.to_string(),
        })?);
        log_text.push('\n');
    }
    std::fs::write(&log_path, log_text).map_err(|e| Error::Io {
        path: log_path.display().to_string(),
        source: e,
    })?;

    let manifest = RunManifest {
        command: "train".to_string(),
        config: serde_json::json!({
            "data": data,
            "out": out,
            "channels": channels,
            "val_count": val_count,
            "train": train_config,
            "best_epoch": result.best_epoch,
            "stopped_early": result.stopped_early,
            "deterministic": runtime::deterministic(),
        }),
        seed,
        artifacts: vec![
            checkpoint_path.display().to_string(),
            log_path.display().to_string(),
        ],
        tool_version: TOOL_VERSION.to_string(),
        seconds: manifest_seconds(t0),
    };
    write_json(&manifest, &out.join("manifest.json"))
}

// ------------------------------------------------------------------ infer

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOptions {
    pub checkpoint: Option<PathBuf>,
    pub volume: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Intensity volume (.vjson) to segment.
    #[arg(long)]
    pub volume: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let t0 = Instant::now();
    let file: InferOptions = match &args.config {
        Some(p) => load_config_file(p)?,
        None => InferOptions::default(),
    };
    let checkpoint = args
        .checkpoint
        .clone()
        .or(file.checkpoint)
        .ok_or_else(|| Error::invalid("infer: --checkpoint is required"))?;
    let volume_path = args
        .volume
        .clone()
        .or(file.volume)
        .ok_or_else(|| Error::invalid("infer: --volume is required"))?;
    let out = args
        .out
        .clone()
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut model = load_checkpoint(&checkpoint)?;
    let raw = read_volume(&volume_path)?;
    let normalized = normalize(&raw)?;
    ensure_dir(&out)?;

    let case_t0 = Instant::now();
    let pair = model.infer(&normalized)?;
    let case_seconds = case_t0.elapsed().as_secs_f64();

    let stem = volume_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "volume".to_string());
    let stem = stem.strip_suffix("_intensity").unwrap_or(&stem).to_string();

    let mut artifacts = Vec::new();
    for (suffix, vol) in [
        ("ml", &pair.m_l),
        ("mas", &pair.m_as),
        ("anatomy_mask", &pair.anatomy_mask),
        ("scar_mask", &pair.scar_mask),
    ] {
        let path = out.join(format!("{stem}_{suffix}.vjson"));
        write_volume(vol, &path)?;
        artifacts.push(path.display().to_string());
    }

    let manifest = RunManifest {
        command: "infer".to_string(),
        config: serde_json::json!({
            "checkpoint": checkpoint,
            "volume": volume_path,
            "out": out,
            "dims": [raw.dims.0, raw.dims.1, raw.dims.2],
            "case_seconds": if runtime::deterministic() { 0.0 } else { case_seconds },
            "deterministic": runtime::deterministic(),
        }),
        seed: 0,
        artifacts,
        tool_version: TOOL_VERSION.to_string(),
        seconds: manifest_seconds(t0),
    };
    write_json(&manifest, &out.join(format!("{stem}_manifest.json")))
}

// ------------------------------------------------------------------- eval

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of predicted <id>_anatomy_mask/_scar_mask volumes.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Directory of ground-truth <id>_anatomy/_scar volumes.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Report path (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let t0 = Instant::now();
    let file: EvalOptions = match &args.config {
        Some(p) => load_config_file(p)?,
        None => EvalOptions::default(),
    };
    let pred = args
        .pred
        .clone()
        .or(file.pred)
        .ok_or_else(|| Error::invalid("eval: --pred is required"))?;
    let gt = args
        .gt
        .clone()
        .or(file.gt)
        .ok_or_else(|| Error::invalid("eval: --gt is required"))?;
    let out = args
        .out
        .clone()
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("report.json"));

    let ids = {
        let mut ids = Vec::new();
        let entries = std::fs::read_dir(&gt).map_err(|e| Error::Io {
            path: gt.display().to_string(),
            source: e,
        })?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::Io {
                path: gt.display().to_string(),
                source: e,
            })?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(id) = name.strip_suffix("_anatomy.vjson") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        ids
    };
    if ids.is_empty() {
        return Err(Error::invalid(format!(
            "no ground-truth cases under {}",
            gt.display()
        )));
    }

    let mut records = Vec::new();
    for id in &ids {
        let gt_anatomy = read_volume(&gt.join(format!("{id}_anatomy.vjson")))?;
        let gt_scar = read_volume(&gt.join(format!("{id}_scar.vjson")))?;
        let pred_anatomy = read_volume(&pred.join(format!("{id}_anatomy_mask.vjson")))?;
        let pred_scar = read_volume(&pred.join(format!("{id}_scar_mask.vjson")))?;
        records.push(case_record(
            id,
            &pred_anatomy,
            &pred_scar,
            &gt_anatomy,
            &gt_scar,
        )?);
    }
    let report = MetricsReport::from_records(records);
    write_json(&report, &out)?;

    let manifest_path = out.with_extension("manifest.json");
    let manifest = RunManifest {
        command: "eval".to_string(),
        config: serde_json::json!({
            "pred": pred,
            "gt": gt,
            "out": out,
            "cases": ids,
            "deterministic": runtime::deterministic(),
        }),
        seed: 0,
        artifacts: vec![out.display().to_string()],
        tool_version: TOOL_VERSION.to_string(),
        seconds: manifest_seconds(t0),
    };
    write_json(&manifest, &manifest_path)
}

/// Score one case: anatomy/scar overlap metrics plus scar burden of the
/// prediction and of the ground truth under the fixed-thickness wall model.
pub fn case_record(
    id: &str,
    pred_anatomy: &Volume,
    pred_scar: &Volume,
    gt_anatomy: &Volume,
    gt_scar: &Volume,
) -> Result<VolumeRecord> {
    let anatomy = metrics::metrics(&metrics::confusion(pred_anatomy, gt_anatomy)?);
    let scar = metrics::metrics(&metrics::confusion(pred_scar, gt_scar)?);
    let burden = metrics::scar_burden(pred_scar, pred_anatomy, WALL_THICKNESS_MM)?;
    let burden_gt = metrics::scar_burden(gt_scar, gt_anatomy, WALL_THICKNESS_MM)?;
    Ok(VolumeRecord {
        id: id.to_string(),
        anatomy,
        scar,
        scar_burden_pct: burden.percentage,
        scar_burden_pct_gt: burden_gt.percentage,
    })
}

// -------------------------------------------------------------- gradcheck

#[derive(Args)]
pub struct GradcheckArgs {
    /// Output path of the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let t0 = Instant::now();
    // Test hook: name a check whose analytic gradient gets perturbed, to
    // prove the suite actually detects wrong gradients.
    let sabotage = std::env::var("MVTT_GRADCHECK_SABOTAGE").ok();
    let checks = gradcheck::run_suite(sabotage.as_deref())?;
    let mut all_passed = true;
    for check in &checks {
        let status = if check.passed() { "pass" } else { "FAIL" };
        println!(
            "{status}  {name}  max rel err {err:.3e} (tol {tol:.0e})",
            name = check.name,
            err = check.max_rel_err,
            tol = check.tolerance
        );
        all_passed &= check.passed();
    }

    if let Some(out) = &args.out {
        let report: Vec<serde_json::Value> = checks
            .iter()
            .map(|c| {
                serde_json::json!({
                    "name": c.name,
                    "max_rel_err": c.max_rel_err,
                    "tolerance": c.tolerance,
                    "passed": c.passed(),
                })
            })
            .collect();
        write_json(&report, out)?;
        let manifest = RunManifest {
            command: "gradcheck".to_string(),
            config: serde_json::json!({
                "out": out,
                "deterministic": runtime::deterministic(),
            }),
            seed: 0,
            artifacts: vec![out.display().to_string()],
            tool_version: TOOL_VERSION.to_string(),
            seconds: manifest_seconds(t0),
        };
        write_json(&manifest, &out.with_extension("manifest.json"))?;
    }
    if !all_passed {
        return Err(Error::invalid("gradient check failed"));
    }
    Ok(())
}

// ---------------------------------------------------------- export-slices

#[derive(Args)]
pub struct ExportArgs {
    /// Volume or probability map (.vjson) to export.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Write one 8-bit PGM (P5) per axial slice, min-max windowed over the whole
/// volume; a constant volume maps to mid-gray 128.
pub fn export_pgm_slices(volume: &Volume, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let (nz, ny, nx) = volume.dims;
    let min = volume.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = volume
        .values()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let mut paths = Vec::with_capacity(nz);
    for z in 0..nz {
        let mut bytes = Vec::with_capacity(ny * nx + 32);
        bytes.extend_from_slice(format!("P5\n{nx} {ny}\n255\n").as_bytes());
        for v in &volume.values()[z * ny * nx..(z + 1) * ny * nx] {
            let g = if range == 0.0 {
                128u8
            } else {
                (((v - min) / range) * 255.0).round().clamp(0.0, 255.0) as u8
            };
            bytes.push(g);
        }
        let path = dir.join(format!("slice_{z:03}.pgm"));
        std::fs::write(&path, bytes).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn cmd_export_slices(args: &ExportArgs) -> Result<()> {
    let t0 = Instant::now();
    let input = args
        .input
        .clone()
        .ok_or_else(|| Error::invalid("export-slices: --input is required"))?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("slices"));
    let volume = read_volume(&input)?;
    let paths = export_pgm_slices(&volume, &out)?;
    let manifest = RunManifest {
        command: "export-slices".to_string(),
        config: serde_json::json!({
            "input": input,
            "out": out,
            "deterministic": runtime::deterministic(),
        }),
        seed: 0,
        artifacts: paths.iter().map(|p| p.display().to_string()).collect(),
        tool_version: TOOL_VERSION.to_string(),
        seconds: manifest_seconds(t0),
    };
    write_json(&manifest, &out.join("manifest.json"))
}

/// Dispatch a parsed command line; the binary maps an Err to exit code 1.
pub fn run(cli: &Cli) -> Result<()> {
    runtime::set_deterministic(cli.deterministic);
    runtime::init_threads();
    match &cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::ExportSlices(args) => cmd_export_slices(args),
    }
}
