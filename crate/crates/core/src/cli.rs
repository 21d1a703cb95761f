//! Command-line entry points: `run`, `lift`, `synth`, `eval`, `overlay`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 a backend failed fatally
//! during a run (the run still completes and records those samples), 3 I/O or
//! data error.
//!
//! Each `run` invocation creates a fresh timestamped directory under `--out`;
//! existing run directories are never modified. The run manifest is written
//! before the first sample so an interrupted run still leaves a record, and
//! finalized afterwards with the backend call count.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backends::sha256_hex;
use crate::dataset::synth::{generate, SyntheticSpec};
use crate::eval;
use crate::geometry::lift_box_to_3d;
use crate::pipeline::{render_overlay, run_scenes, PipelineConfig, PipelineError, Runtime,
    Variant};
use crate::scene::{GroundingResult, Scene};
use crate::{BBox2D, LiftPolicy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BACKEND_FATAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser)]
#[command(
    name = "llm-rg",
    about = "Referential grounding for driving scenes: detector + VLM captions + LLM reasoning"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the grounding pipeline over an annotated dataset.
    Run(RunArgs),
    /// Lift one 2D box to a partial 3D box against a point cloud.
    Lift(LiftArgs),
    /// Generate a synthetic dataset tree with scripted backends.
    Synth(SynthArgs),
    /// Re-aggregate a results stream into reports.
    Eval(EvalArgs),
    /// Render a ground-truth (red) / prediction (green) overlay image.
    Overlay(OverlayArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Annotation file; paths inside it resolve relative to its directory.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory that receives one timestamped run directory per invocation.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Override the variant named in the config.
    #[arg(long)]
    variant: Option<Variant>,
    /// Process only the first N scenes.
    #[arg(long)]
    limit: Option<usize>,
    /// Override the worker count from the config.
    #[arg(long)]
    workers: Option<usize>,
    /// Validate config, dataset and backends, then exit without calling any
    /// backend.
    #[arg(long)]
    dry_run: bool,
    /// Report formats to emit (repeatable): json, csv, md.
    #[arg(long, value_delimiter = ',', default_values = ["json", "csv", "md"])]
    format: Vec<String>,
}

#[derive(Args)]
struct LiftArgs {
    /// Point cloud file (binary sweep layout or CSV).
    #[arg(long)]
    cloud: PathBuf,
    /// Calibration file.
    #[arg(long)]
    calib: PathBuf,
    /// Pixel box as x1,y1,x2,y2.
    #[arg(long = "box", value_name = "X1,Y1,X2,Y2", value_delimiter = ',')]
    bbox: Vec<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the generated tree.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    /// Hardest distractor level to include (0-2).
    #[arg(long, default_value_t = 2)]
    distractor_level: u8,
    /// Emit LiDAR clouds and depth-disambiguation scenes.
    #[arg(long)]
    three_d: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// results.jsonl produced by a run.
    #[arg(long)]
    results: PathBuf,
    /// Variant label for the report.
    #[arg(long, default_value = "llm_rg")]
    variant: String,
    /// Output directory for the regenerated reports.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values = ["json", "csv", "md"])]
    format: Vec<String>,
}

#[derive(Args)]
struct OverlayArgs {
    /// Annotation file naming the scene.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    scene_id: String,
    /// Optional results.jsonl; when given, the scene's predicted box is
    /// drawn in green.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
}

/// Run metadata persisted alongside results. Written with `status: running`
/// before the first sample, rewritten as `complete` at the end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub created_unix_ms: u64,
    pub variant: String,
    pub config_path: String,
    pub config_digest: String,
    pub annotations_path: String,
    pub annotations_digest: String,
    pub scene_count: usize,
    pub worker_count: usize,
    pub status: String,
    /// Underlying backend invocations (cache hits excluded); filled in at
    /// completion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_calls: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fatal_count: Option<usize>,
}

fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn exit_code_of(e: &PipelineError) -> i32 {
    match e {
        PipelineError::Config(_) => EXIT_CONFIG,
        PipelineError::Backend(_) => EXIT_BACKEND_FATAL,
        PipelineError::Dataset(_) | PipelineError::Image(_) | PipelineError::Io(_) => EXIT_IO,
    }
}

/// Parses argv and runs; returns the process exit code.
pub fn run() -> i32 {
    run_with(Cli::parse())
}

/// Testable entry point: parse explicit arguments.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run_with(cli),
        Err(e) => {
            // --help and --version are successful exits, not usage errors
            let ok = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            eprint!("{e}");
            if ok {
                EXIT_OK
            } else {
                EXIT_CONFIG
            }
        }
    }
}

fn run_with(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Lift(args) => cmd_lift(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Overlay(args) => cmd_overlay(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_of(&e)
        }
    }
}

fn file_digest(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Creates a fresh `run-<unix-seconds>-<nn>` directory; never reuses one.
fn create_run_dir(base: &Path) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(base)?;
    let secs = now_unix_ms() / 1000;
    for counter in 0..100u32 {
        let candidate = base.join(format!("run-{secs}-{counter:02}"));
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(PipelineError::Io(std::io::Error::other(
        "could not allocate a unique run directory",
    )))
}

fn load_scenes(path: &Path, limit: Option<usize>) -> Result<Vec<Scene>, PipelineError> {
    let load = crate::dataset::load_annotations(path)?;
    let mut scenes = load.scenes;
    if let Some(n) = limit {
        scenes.truncate(n);
    }
    Ok(scenes)
}

fn write_reports(
    dir: &Path,
    results: &[GroundingResult],
    variant: &str,
    formats: &[String],
) -> Result<(), PipelineError> {
    let report = eval::aggregate(results, variant);
    for format in formats {
        match format.as_str() {
            "json" => std::fs::write(dir.join("report.json"), eval::to_json(&report))?,
            "csv" => std::fs::write(dir.join("report.csv"), eval::to_csv(results, variant))?,
            "md" => std::fs::write(dir.join("report.md"), eval::to_markdown(&report))?,
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown report format {other} (expected json, csv or md)"
                )))
            }
        }
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<i32, PipelineError> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(variant) = args.variant {
        config.variant = variant;
    }
    if let Some(workers) = args.workers {
        config.worker_count = workers;
    }
    config.validate()?;
    let scenes = load_scenes(&args.annotations, args.limit)?;
    config.validate_scenes(&scenes)?;
    let variant_name = config.variant.as_str().to_string();
    let worker_count = config.worker_count;
    let runtime = Runtime::from_config(config)?;

    if args.dry_run {
        println!(
            "dry run: {} scene(s), variant {variant_name}, {worker_count} worker(s); no backend calls made",
            scenes.len()
        );
        assert_eq!(runtime.backend_calls(), 0, "dry run must not call backends");
        return Ok(EXIT_OK);
    }

    let run_dir = create_run_dir(&args.out)?;
    let mut manifest = RunManifest {
        created_unix_ms: now_unix_ms(),
        variant: variant_name.clone(),
        config_path: args.config.display().to_string(),
        config_digest: file_digest(&args.config)?,
        annotations_path: args.annotations.display().to_string(),
        annotations_digest: file_digest(&args.annotations)?,
        scene_count: scenes.len(),
        worker_count,
        status: "running".into(),
        backend_calls: None,
        fatal_count: None,
    };
    let manifest_path = run_dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;

    let outcome = run_scenes(&scenes, &runtime);

    let mut results_jsonl = String::new();
    for r in &outcome.results {
        results_jsonl.push_str(&serde_json::to_string(r).expect("result serializes"));
        results_jsonl.push('\n');
    }
    std::fs::write(run_dir.join("results.jsonl"), results_jsonl)?;
    write_reports(&run_dir, &outcome.results, &variant_name, &args.format)?;

    manifest.status = "complete".into();
    manifest.backend_calls = Some(runtime.backend_calls());
    manifest.fatal_count = Some(outcome.fatal_count);
    std::fs::write(
        &manifest_path,
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;

    let hits = outcome.results.iter().filter(|r| r.hit_at_05).count();
    println!(
        "{} scene(s), acc@0.5 {:.4}, {} fallback(s), {} fatal; results in {}",
        outcome.results.len(),
        if outcome.results.is_empty() {
            0.0
        } else {
            hits as f64 / outcome.results.len() as f64
        },
        outcome.results.iter().filter(|r| r.fallback_used).count(),
        outcome.fatal_count,
        run_dir.display()
    );
    Ok(if outcome.fatal_count > 0 {
        EXIT_BACKEND_FATAL
    } else {
        EXIT_OK
    })
}

fn cmd_lift(args: LiftArgs) -> Result<i32, PipelineError> {
    if args.bbox.len() != 4 {
        return Err(PipelineError::Config(
            "--box requires exactly four values x1,y1,x2,y2".into(),
        ));
    }
    let bbox = BBox2D::new(args.bbox[0], args.bbox[1], args.bbox[2], args.bbox[3])
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let (cloud, dropped) = crate::dataset::load_pointcloud(&args.cloud)?;
    let calib = crate::dataset::load_calibration(&args.calib)?;
    match lift_box_to_3d(&bbox, &cloud, &calib, &LiftPolicy::default()) {
        Ok(partial) => {
            println!(
                "{}",
                serde_json::json!({
                    "centroid": partial.centroid,
                    "extents": partial.extents,
                    "point_count": partial.point_count,
                    "dropped_nonfinite": dropped,
                })
            );
            Ok(EXIT_OK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(EXIT_IO)
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<i32, PipelineError> {
    let spec = SyntheticSpec {
        seed: args.seed,
        scene_count: args.scenes,
        distractor_level: args.distractor_level.min(2),
        three_d: args.three_d,
        ..SyntheticSpec::default()
    };
    let summary = generate(&spec, &args.out)?;
    println!(
        "generated {} scene(s) under {}",
        summary.scene_count,
        summary.out_dir.display()
    );
    for config in &summary.config_paths {
        println!("config: {}", config.display());
    }
    Ok(EXIT_OK)
}

fn load_results(path: &Path) -> Result<Vec<GroundingResult>, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let mut results = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: GroundingResult = serde_json::from_str(line).map_err(|e| {
            PipelineError::Config(format!(
                "{} line {}: {e}",
                path.display(),
                line_no + 1
            ))
        })?;
        results.push(r);
    }
    Ok(results)
}

fn cmd_eval(args: EvalArgs) -> Result<i32, PipelineError> {
    let results = load_results(&args.results)?;
    std::fs::create_dir_all(&args.out)?;
    write_reports(&args.out, &results, &args.variant, &args.format)?;
    println!(
        "aggregated {} result(s) into {}",
        results.len(),
        args.out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_overlay(args: OverlayArgs) -> Result<i32, PipelineError> {
    let scenes = load_scenes(&args.annotations, None)?;
    let scene = scenes
        .iter()
        .find(|s| s.scene_id == args.scene_id)
        .ok_or_else(|| {
            PipelineError::Config(format!("scene {} not found in annotations", args.scene_id))
        })?;
    let predicted = match &args.results {
        Some(path) => load_results(path)?
            .into_iter()
            .find(|r| r.scene_id == args.scene_id)
            .and_then(|r| r.predicted_box),
        None => None,
    };
    let image = render_overlay(&scene.image_path, &scene.gt_box, predicted.as_ref())?;
    image
        .save(&args.out)
        .map_err(|e| PipelineError::Image(e.to_string()))?;
    println!("overlay written to {}", args.out.display());
    Ok(EXIT_OK)
}
