//! Command-line surface: synthesize data, train a victim, run attack campaigns and
//! turn reports into plot-ready tables. Every command also writes a run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attack::{AttackConfig, StepSchedule, TargetRange};
use crate::campaign::run_campaign;
use crate::dataset::{grand_mean, read_dataset, synth_dataset, write_dataset};
use crate::metrics::{
    boundary_report, dither, read_report, summarize, trend_statistic, unsound_records, write_report,
    AttackRecord, BoundaryReport, Summary,
};
use crate::model::{default_victim, load_model, save_model, PreprocessSpec};
use crate::train::{train, TrainConfig};

/// Distance from the nearer bound beyond which a success counts as a rounding outlier.
pub const BOUNDARY_TOLERANCE: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "range-attack", version, about = "Targeted range attacks on image regression networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic dataset as PPM files plus a manifest CSV.
    Synth(SynthArgs),
    /// Train the default victim on a dataset manifest.
    Train(TrainArgs),
    /// Attack every image of a dataset and write a per-image report.
    Attack(AttackArgs),
    /// Turn an attack report into scatter and norm tables.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value = "3x32x32", value_parser = parse_shape)]
    pub shape: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Feed channels to the network in reversed order.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub swap_channels: bool,
    /// Model file to write; the loss history goes to `<stem>_loss.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    MakeHealthy,
    MakeObese,
}

impl Preset {
    pub fn range(self) -> TargetRange {
        match self {
            Preset::MakeHealthy => TargetRange::MAKE_HEALTHY,
            Preset::MakeObese => TargetRange::MAKE_OBESE,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    InvSqrt,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("target").required(true).args(["range", "preset"])))]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset manifest CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Target range as `L:U`.
    #[arg(long)]
    pub range: Option<String>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Maximum number of iterations.
    #[arg(long = "K", default_value_t = 500)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[arg(long, value_enum, default_value_t = Schedule::Constant)]
    pub schedule: Schedule,
    #[arg(long, default_value_t = 1)]
    pub check_period: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV; the summary goes to `<stem>_summary.json` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Attack report CSV.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.005)]
    pub dither_variance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Norm table; the scatter table goes to `<stem>_scatter.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("shape must look like CxHxW: {e}"))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(format!("shape must be three positive dimensions CxHxW, got {s:?}")),
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub config: &'a C,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
}

/// `<dir>/<stem><suffix>`, e.g. `out/report.csv` + `_summary.json` -> `out/report_summary.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Write through a temporary file in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path.file_name().ok_or_else(|| anyhow!("{} has no file name", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes).with_context(|| format!("writing {}", tmp.display()))?;
    f.sync_all().with_context(|| format!("syncing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

fn write_manifest<C: Serialize>(
    path: &Path,
    command: &str,
    config: &C,
    seed: u64,
    artifacts: &[&Path],
    started: Instant,
) -> anyhow::Result<()> {
    let manifest = RunManifest {
        command,
        config,
        seed,
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

/// Outcome of a successful command. `per_image_errors` drives the exit status.
#[derive(Debug, Default)]
pub struct RunStatus {
    pub per_image_errors: usize,
}

pub fn run(cli: Cli) -> anyhow::Result<RunStatus> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<RunStatus> {
    let started = Instant::now();
    if args.n == 0 {
        bail!("--n must be >= 1");
    }
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let ds = synth_dataset(args.n, args.shape, args.seed)?;
    let manifest = write_dataset(&ds, &args.out_dir)?;
    let run = args.out_dir.join("run_manifest.json");
    write_manifest(&run, "synth", args, args.seed, &[&manifest], started)?;
    println!("wrote {} images, manifest {}", ds.len(), manifest.display());
    Ok(RunStatus::default())
}

#[derive(Debug, Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

#[derive(Serialize)]
struct TrainManifestConfig<'a> {
    args: &'a TrainArgs,
    train: &'a TrainConfig,
    grand_mean: f64,
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<RunStatus> {
    let started = Instant::now();
    let ds = read_dataset(&args.data)?;
    let shape = ds.shape().ok_or_else(|| anyhow!("dataset {} is empty", args.data.display()))?;
    let mean = grand_mean(&ds)?;
    let pre = PreprocessSpec::new(mean, args.swap_channels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let initial = default_victim(shape, pre, &mut rng)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let (net, history) = train(&initial, &ds, &cfg)?;

    ensure_parent(&args.out)?;
    save_model(&net, &args.out)?;
    let loss_path = sibling(&args.out, "_loss.csv");
    let mut w = csv::Writer::from_path(&loss_path).with_context(|| format!("writing {}", loss_path.display()))?;
    for (epoch, &loss) in history.iter().enumerate() {
        w.serialize(LossRow { epoch, loss })?;
    }
    if history.is_empty() {
        w.write_record(["epoch", "loss"])?;
    }
    w.flush()?;

    let config = TrainManifestConfig { args, train: &cfg, grand_mean: mean };
    let run = sibling(&args.out, "_manifest.json");
    write_manifest(&run, "train", &config, args.seed, &[&args.out, &loss_path], started)?;
    match (history.first(), history.last()) {
        (Some(first), Some(last)) => println!("trained {} epochs, loss {first:.4} -> {last:.4}", history.len()),
        _ => println!("wrote untrained model"),
    }
    Ok(RunStatus::default())
}

#[derive(Debug, Serialize)]
struct ImageError {
    image_id: String,
    message: String,
}

#[derive(Debug, Serialize)]
struct AttackSummary {
    lower: f64,
    upper: f64,
    attack: AttackConfig,
    /// Absent when every image errored.
    summary: Option<Summary>,
    boundary: BoundaryReport,
    /// Spearman correlation of distance-to-range and l2 over moved successes.
    trend: Option<f64>,
    unsound: usize,
    errors: Vec<ImageError>,
}

pub fn resolve_range(args: &AttackArgs) -> anyhow::Result<TargetRange> {
    match (&args.range, args.preset) {
        (Some(text), None) => Ok(text.parse()?),
        (None, Some(p)) => Ok(p.range()),
        _ => bail!("give exactly one of --range or --preset"),
    }
}

pub fn cmd_attack(args: &AttackArgs) -> anyhow::Result<RunStatus> {
    let started = Instant::now();
    let range = resolve_range(args)?;
    let cfg = AttackConfig {
        max_iterations: args.k,
        step_size: args.eta,
        schedule: match args.schedule {
            Schedule::Constant => StepSchedule::Constant,
            Schedule::InvSqrt => StepSchedule::InvSqrt,
        },
        rounded_check_period: args.check_period,
        seed: args.seed,
    };
    cfg.validate()?;
    let net = load_model(&args.model)?;
    let ds = read_dataset(&args.data)?;

    let outcome = run_campaign(&net, &ds.samples, &range, &cfg);
    ensure_parent(&args.out)?;
    write_report(&outcome.records, &args.out)?;

    let successes: Vec<AttackRecord> = outcome.records.iter().filter(|r| r.success).cloned().collect();
    let report = AttackSummary {
        lower: range.lower(),
        upper: range.upper(),
        attack: cfg,
        summary: summarize(&outcome.records).ok(),
        boundary: boundary_report(&outcome.records, &range, BOUNDARY_TOLERANCE),
        trend: trend_statistic(&successes).ok(),
        unsound: unsound_records(&outcome.records, &range).len(),
        errors: outcome
            .errors
            .iter()
            .map(|(id, e)| ImageError { image_id: id.clone(), message: e.to_string() })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    let summary_path = sibling(&args.out, "_summary.json");
    write_atomic(&summary_path, text.as_bytes())?;
    print!("{text}");
    for e in &report.errors {
        eprintln!("error on {}: {}", e.image_id, e.message);
    }

    let run = sibling(&args.out, "_manifest.json");
    write_manifest(&run, "attack", args, args.seed, &[&args.out, &summary_path], started)?;
    Ok(RunStatus { per_image_errors: report.errors.len() })
}

#[derive(Debug, Serialize)]
struct ScatterRow<'a> {
    image_id: &'a str,
    f_before: f64,
    f_after: f64,
    success: bool,
}

#[derive(Debug, Serialize)]
struct NormRow<'a> {
    image_id: &'a str,
    f_before: f64,
    distance_to_range: f64,
    success: bool,
    l0: f64,
    l2: f64,
    l_inf: f64,
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<RunStatus> {
    let started = Instant::now();
    let records = read_report(&args.input)?;
    let column = |f: fn(&AttackRecord) -> f64, offset: u64| {
        dither(&records.iter().map(f).collect::<Vec<_>>(), args.dither_variance, args.seed.wrapping_add(offset))
    };
    let l0 = column(|r| r.l0 as f64, 0)?;
    let l2 = column(|r| r.l2, 1)?;
    let l_inf = column(|r| f64::from(r.l_inf), 2)?;

    ensure_parent(&args.out)?;
    let mut w = csv::Writer::from_path(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    for (i, r) in records.iter().enumerate() {
        w.serialize(NormRow {
            image_id: &r.image_id,
            f_before: r.f_before,
            distance_to_range: r.distance_to_range,
            success: r.success,
            l0: l0[i],
            l2: l2[i],
            l_inf: l_inf[i],
        })?;
    }
    if records.is_empty() {
        w.write_record(["image_id", "f_before", "distance_to_range", "success", "l0", "l2", "l_inf"])?;
    }
    w.flush()?;

    let scatter_path = sibling(&args.out, "_scatter.csv");
    let mut w = csv::Writer::from_path(&scatter_path).with_context(|| format!("writing {}", scatter_path.display()))?;
    for r in &records {
        w.serialize(ScatterRow { image_id: &r.image_id, f_before: r.f_before, f_after: r.f_after, success: r.success })?;
    }
    if records.is_empty() {
        w.write_record(["image_id", "f_before", "f_after", "success"])?;
    }
    w.flush()?;

    let run = sibling(&args.out, "_manifest.json");
    write_manifest(&run, "report", args, args.seed, &[&args.out, &scatter_path], started)?;
    println!("wrote {} rows to {} and {}", records.len(), args.out.display(), scatter_path.display());
    Ok(RunStatus::default())
}
