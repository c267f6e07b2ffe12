//! `chaoseval` command line.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Config, ConfigError, ConfigLayer, CONFIG_ENV};
use crate::data::{self, DetectionStore, GroundTruthStore};
use crate::fusion::{dual_stream_demo, ToyDims};
use crate::metrics::{mean_average_precision, EvalReport};
use crate::output::write_atomic;
use crate::prune::{prune, PruneMode};
use crate::sweep::{compare_runs, curve_csv, deltas_csv, sweep, CapacityRange, SweepError};
use crate::synth::{generate, ScenarioSpec};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    pub hint: Option<String>,
}

impl CliError {
    fn usage(message: impl fmt::Display, command: &str) -> Self {
        Self {
            kind: ErrorKind::Usage,
            message: message.to_string(),
            hint: Some(format!("run `chaoseval {command} --help` for usage")),
        }
    }

    fn data(message: impl fmt::Display) -> Self {
        Self { kind: ErrorKind::Data, message: message.to_string(), hint: None }
    }

    fn runtime(message: impl fmt::Display) -> Self {
        Self { kind: ErrorKind::Runtime, message: message.to_string(), hint: None }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Runtime => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Runtime => "runtime",
        };
        write!(f, "error[{kind}]: {}", self.message)?;
        if let Some(h) = &self.hint {
            write!(f, "\nhint: {h}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "chaoseval", version, propagate_version = true)]
#[command(about = "Confidence pruning, capacity sweeps and frame-mAP evaluation for action localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file (defaults to $CHAOSEVAL_CONFIG).
    #[arg(long, value_name = "TOML")]
    config: Option<PathBuf>,
    /// Clamp out-of-range coordinates instead of rejecting them.
    #[arg(long)]
    lenient: bool,
    /// Accept and ignore extra (score) columns in ground-truth files.
    #[arg(long)]
    ignore_gt_score: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Keep the top-capacity anchors of every frame.
    Prune {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        capacity: usize,
        #[arg(long)]
        mode: Option<PruneMode>,
        /// Pruned CSV; a `<out>.meta.json` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Frame-mAP of detections against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        /// JSON report (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Prune and evaluate at every capacity of a range.
    Sweep {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// lo:hi[:step]
        #[arg(long)]
        range: Option<CapacityRange>,
        #[arg(long)]
        mode: Option<PruneMode>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        workers: Option<usize>,
        /// Enables the two-pass schedule with this coarse stride.
        #[arg(long)]
        coarse_step: Option<usize>,
        /// Curve CSV (`capacity,map,ap_std`).
        #[arg(long)]
        curve: Option<PathBuf>,
        /// JSON result (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-class AP differences between two eval reports.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Delta CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic scenario from a JSON spec.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dets: PathBuf,
        #[arg(long)]
        out_gt: PathBuf,
    },
    /// Run the toy dual-stream fusion pipeline and summarize the fused map.
    FuseDemo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// vit=CxTxHxW,slow=CxTxHxW,fast=CxTxHxW
        #[arg(long)]
        dims: Option<ToyDims>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Prune { .. } => "prune",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Compare { .. } => "compare",
            Command::GenSynth { .. } => "gen-synth",
            Command::FuseDemo { .. } => "fuse-demo",
        }
    }
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Metadata<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a Config>,
    inputs: Vec<InputDigest>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest(path: &Path) -> Result<InputDigest, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

fn metadata<'a>(command: &'static str, config: Option<&'a Config>, inputs: &[&Path]) -> Result<Metadata<'a>, CliError> {
    Ok(Metadata {
        tool: "chaoseval",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
    })
}

fn resolve_config(
    command: &str,
    common: &Common,
    flags: ConfigLayer,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<Config, CliError> {
    let cfg_err = |e: ConfigError| match e {
        ConfigError::Invalid(_) => CliError::usage(e, command),
        _ => CliError::data(e),
    };
    let file = match common.config.clone().or_else(|| env(CONFIG_ENV).map(PathBuf::from)) {
        Some(p) => ConfigLayer::from_toml_file(&p).map_err(cfg_err)?,
        None => ConfigLayer::default(),
    };
    let env_layer = ConfigLayer::from_env(env).map_err(cfg_err)?;
    let flags = ConfigLayer {
        lenient: common.lenient.then_some(true),
        ignore_gt_score: common.ignore_gt_score.then_some(true),
        ..flags
    };
    Config::resolve(flags.over(env_layer.over(file))).map_err(cfg_err)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn emit(path: Option<&Path>, contents: &str, stdout: &mut dyn std::io::Write) -> Result<(), CliError> {
    match path {
        Some(p) => write_atomic(p, contents.as_bytes())
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", p.display()))),
        None => stdout
            .write_all(contents.as_bytes())
            .map_err(|e| CliError::runtime(format!("cannot write to stdout: {e}"))),
    }
}

fn load_dets(path: &Path, cfg: &Config) -> Result<DetectionStore, CliError> {
    data::load_detections(path, cfg.load_options())
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_gt(path: &Path, cfg: &Config) -> Result<GroundTruthStore, CliError> {
    data::load_ground_truth(path, cfg.load_options())
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn distinct_outputs(command: &str, paths: &[Option<&Path>]) -> Result<(), CliError> {
    let set: Vec<&Path> = paths.iter().flatten().copied().collect();
    for (i, a) in set.iter().enumerate() {
        if set[i + 1..].contains(a) {
            return Err(CliError::usage(
                format!("output path {} is given for two different outputs", a.display()),
                command,
            ));
        }
    }
    Ok(())
}

/// Runs one invocation and returns the process exit status.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env = |k: &str| std::env::var(k).ok();
    run_with(args, &env, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with injected environment and output streams.
pub fn run_with<I, T>(
    args: I,
    env: &dyn Fn(&str) -> Option<String>,
    stdout: &mut dyn std::io::Write,
    stderr: &mut dyn std::io::Write,
) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            let informational = matches!(e.kind(), K::DisplayHelp | K::DisplayVersion);
            let text = e.render().to_string();
            if informational {
                let _ = stdout.write_all(text.as_bytes());
                return EXIT_OK;
            }
            let _ = write!(stderr, "error[usage]: {text}");
            return EXIT_USAGE;
        }
    };
    match execute(cli.command, env, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "{e}");
            e.exit_code()
        }
    }
}

fn execute(
    command: Command,
    env: &dyn Fn(&str) -> Option<String>,
    stdout: &mut dyn std::io::Write,
) -> Result<(), CliError> {
    let name = command.name();
    match command {
        Command::Prune { detections, capacity, mode, out, common } => {
            let cfg = resolve_config(name, &common, ConfigLayer { mode, ..Default::default() }, env)?;
            if capacity == 0 {
                return Err(CliError::usage("capacity must be at least 1 (0 would drop all anchors)", name));
            }
            let sidecar = sidecar_path(&out);
            distinct_outputs(name, &[Some(&out), Some(&sidecar), Some(&detections)])?;
            let store = load_dets(&detections, &cfg)?;
            let pruned = prune(&store, capacity, cfg.mode).map_err(|e| CliError::usage(e, name))?;
            let meta = json!({
                "capacity": capacity,
                "mode": cfg.mode,
                "input_rows": store.len(),
                "output_rows": pruned.len(),
                "frames": store.frame_count(),
                "metadata": metadata(name, Some(&cfg), &[&detections])?,
            });
            emit(Some(&out), &data::detections_to_csv(&pruned), stdout)?;
            emit(Some(&sidecar), &to_json(&meta), stdout)
        }
        Command::Eval { detections, gt, iou, out, common } => {
            let cfg = resolve_config(name, &common, ConfigLayer { iou_threshold: iou, ..Default::default() }, env)?;
            let dets = load_dets(&detections, &cfg)?;
            let gts = load_gt(&gt, &cfg)?;
            let report = mean_average_precision(&dets, &gts, cfg.iou_threshold).map_err(CliError::data)?;
            let doc = ReportDoc { report: &report, metadata: metadata(name, Some(&cfg), &[&detections, &gt])? };
            emit(out.as_deref(), &to_json(&doc), stdout)
        }
        Command::Sweep { detections, gt, range, mode, iou, workers, coarse_step, curve, out, common } => {
            let flags = ConfigLayer {
                range,
                mode,
                iou_threshold: iou,
                workers,
                coarse_step,
                ..Default::default()
            };
            let cfg = resolve_config(name, &common, flags, env)?;
            distinct_outputs(name, &[curve.as_deref(), out.as_deref()])?;
            let dets = load_dets(&detections, &cfg)?;
            let gts = load_gt(&gt, &cfg)?;
            let result = sweep(&dets, &gts, cfg.range, cfg.schedule, cfg.mode, cfg.iou_threshold, cfg.workers)
                .map_err(|e| match e {
                    SweepError::Eval(e) => CliError::data(e),
                    SweepError::Pool(e) => CliError::runtime(e),
                    e => CliError::usage(e, name),
                })?;
            let doc = json!({
                "range": cfg.range,
                "schedule": cfg.schedule,
                "mode": cfg.mode,
                "iou_threshold": cfg.iou_threshold,
                "best": result.best,
                "points": result.points,
                "metadata": metadata(name, Some(&cfg), &[&detections, &gt])?,
            });
            if let Some(c) = &curve {
                emit(Some(c), &curve_csv(&result), stdout)?;
            }
            emit(out.as_deref(), &to_json(&doc), stdout)
        }
        Command::Compare { a, b, out } => {
            let read = |p: &Path| -> Result<EvalReport, CliError> {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::data(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::data(format!("{} is not an eval report: {e}", p.display())))
            };
            let deltas = compare_runs(&read(&a)?, &read(&b)?).map_err(CliError::data)?;
            emit(out.as_deref(), &deltas_csv(&deltas), stdout)
        }
        Command::GenSynth { spec, out_dets, out_gt } => {
            distinct_outputs(name, &[Some(&out_dets), Some(&out_gt)])?;
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| CliError::data(format!("cannot read {}: {e}", spec.display())))?;
            let spec: ScenarioSpec = serde_json::from_str(&text)
                .map_err(|e| CliError::data(format!("invalid scenario spec: {e}")))?;
            let (dets, gts) = generate(&spec).map_err(CliError::data)?;
            emit(Some(&out_dets), &data::detections_to_csv(&dets), stdout)?;
            emit(Some(&out_gt), &data::ground_truth_to_csv(&gts), stdout)
        }
        Command::FuseDemo { seed, dims, out } => {
            let dims = dims.unwrap_or_default();
            let res = dual_stream_demo(seed, dims).map_err(|e| CliError::usage(e, name))?;
            let fused = &res.fused;
            let plane = fused.h * fused.w;
            let bytes: Vec<u8> = fused.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let blocks: Vec<_> = ["vit", "slow", "fast"]
                .iter()
                .zip(res.blocks)
                .map(|(stream, (start, end))| {
                    let sum: f64 = fused.data()[start * plane..end * plane].iter().sum();
                    json!({ "stream": stream, "start": start, "end": end, "sum": sum })
                })
                .collect();
            let doc = json!({
                "seed": seed,
                "dims": dims,
                "fused": { "c": fused.c, "h": fused.h, "w": fused.w },
                "blocks": blocks,
                "matcher": { "kernel": res.matcher.kernel, "stride": res.matcher.stride, "padding": res.matcher.padding },
                "checksums": {
                    "sum": fused.data().iter().sum::<f64>(),
                    "sum_sq": fused.data().iter().map(|v| v * v).sum::<f64>(),
                    "sha256": sha256_hex(&bytes),
                },
                "metadata": metadata(name, None, &[])?,
            });
            emit(out.as_deref(), &to_json(&doc), stdout)
        }
    }
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    metadata: Metadata<'a>,
}

/// `<out>.meta.json` next to a pruned CSV.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}
