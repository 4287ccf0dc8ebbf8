//! The `umc` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{build_frames, evaluate, parse_jsonl, DetectionFrame, GtFrame, MetricsReport};
use crate::simulator::{init_params, run_episode_with, EpisodeReport, RunOptions, ScenarioConfig};
use crate::tensor::ParamSet;
use crate::wire;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const THREADS_ENV: &str = "UMC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "umc", version, about = "Multi-resolution collaborative perception runner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one episode and write its reports.
    Run(RunArgs),
    /// Run one episode per (delta_s, delta_c) point.
    Sweep(SweepArgs),
    /// Score a detection dump against ground truth.
    Eval(EvalArgs),
    /// Pretty-print a .umcw packet.
    InspectPacket { path: PathBuf },
    /// Write the seeded parameter set for a config.
    InitParams(InitArgs),
}

#[derive(Debug, Args)]
pub struct Source {
    /// Scenario config (TOML). Defaults apply when omitted.
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-run from a manifest written by an earlier run.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Parameter file; seeded weights are used when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub out: PathBuf,
    /// Self-select keep fraction, e.g. `0.5` or `50%`.
    #[arg(long, value_parser = parse_fraction)]
    pub delta_s: Option<f64>,
    /// Cross-select keep fraction, e.g. `0.5` or `50%`.
    #[arg(long, value_parser = parse_fraction)]
    pub delta_c: Option<f64>,
    /// Send every cell at every level without queries.
    #[arg(long)]
    pub srar: bool,
    /// Also write every feature packet under `packets/`.
    #[arg(long)]
    pub dump_packets: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated `delta_s:delta_c` points, e.g. `1:1,0.5:0.5`.
    #[arg(long)]
    pub grid: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Comma-separated IoU thresholds.
    #[arg(long, default_value = "0.5,0.7")]
    pub iou: String,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_TAU)]
    pub tau: u32,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Accepts `0.25` or `25%`; the result must lie in (0, 1].
pub fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let t = s.trim();
    let v = match t.strip_suffix('%') {
        Some(p) => p.trim().parse::<f64>().map_err(|e| e.to_string())? / 100.0,
        None => t.parse::<f64>().map_err(|e| e.to_string())?,
    };
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{s} is not a fraction in (0, 1]"))
    }
}

pub fn parse_grid(s: &str) -> Result<Vec<(f64, f64)>> {
    let points: Vec<(f64, f64)> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("grid point {p:?} needs delta_s:delta_c")))?;
            Ok((parse_fraction(a).map_err(Error::Config)?, parse_fraction(b).map_err(Error::Config)?))
        })
        .collect::<Result<_>>()?;
    if points.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    Ok(points)
}

fn parse_ious(s: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| parse_fraction(p).map_err(|e| Error::Config(format!("iou: {e}"))))
        .collect::<Result<_>>()?;
    Ok(v)
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub delta_s: f64,
    pub delta_c: f64,
    pub ladder: String,
    pub selection: bool,
    /// `seeded:<seed>` or `sha256:<hex>` of the parameter file.
    pub params: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_path: Option<PathBuf>,
    pub config: ScenarioConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.config.validate()?;
        Ok(m)
    }
}

pub fn params_digest(bytes: &[u8]) -> String {
    let hash = Sha256::digest(bytes);
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

struct Resolved {
    cfg: ScenarioConfig,
    params: ParamSet,
    params_id: String,
    params_path: Option<PathBuf>,
    selection: bool,
}

fn resolve(source: &Source, srar: bool) -> Result<Resolved> {
    let (mut cfg, mut params_path, mut selection, expected) = match &source.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            (m.config, m.params_path, m.selection, Some(m.params))
        }
        None => {
            let cfg = match &source.config {
                Some(p) => ScenarioConfig::load(p)?,
                None => ScenarioConfig::default(),
            };
            (cfg, None, true, None)
        }
    };
    if let Some(seed) = source.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &source.params {
        params_path = Some(p.clone());
    }
    if srar {
        selection = false;
    }
    let (params, params_id) = match &params_path {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            let id = params_digest(&bytes);
            (ParamSet::from_bytes(&bytes)?, id)
        }
        None => (init_params(&cfg, cfg.seed)?, format!("seeded:{}", cfg.seed)),
    };
    if let Some(expected) = expected {
        if source.seed.is_none() && source.params.is_none() && expected != params_id {
            return Err(Error::Config(format!("manifest expects parameters {expected}, found {params_id}")));
        }
    }
    Ok(Resolved { cfg, params, params_id, params_path, selection })
}

fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(Error::Io)
}

fn write_run(dir: &Path, report: &EpisodeReport, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    write(&dir.join("detections.jsonl"), report.detections_jsonl())?;
    write(&dir.join("ground_truth.jsonl"), report.ground_truth_jsonl())?;
    write(&dir.join("metrics.csv"), report.metrics_csv())?;
    write(&dir.join("ledger.csv"), report.ledger_csv())?;
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    write(&dir.join("manifest.json"), json)?;
    if !report.packets.is_empty() {
        let pdir = dir.join("packets");
        fs::create_dir_all(&pdir)?;
        for p in &report.packets {
            write(&pdir.join(&p.name), &p.bytes)?;
        }
    }
    Ok(())
}

fn manifest_for(r: &Resolved, cfg: &ScenarioConfig) -> RunManifest {
    RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        delta_s: cfg.delta_s,
        delta_c: cfg.delta_c,
        ladder: cfg.ladder.clone(),
        selection: r.selection,
        params: r.params_id.clone(),
        params_path: r.params_path.clone(),
        config: cfg.clone(),
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut r = resolve(&args.source, args.srar)?;
    if let Some(v) = args.delta_s {
        r.cfg.delta_s = v;
    }
    if let Some(v) = args.delta_c {
        r.cfg.delta_c = v;
    }
    r.cfg.validate()?;
    let opts = RunOptions { selection: r.selection, keep_packets: args.dump_packets, threads: threads_from_env()? };
    let report = run_episode_with(&r.cfg, &r.params, &opts)?;
    write_run(&args.out, &report, &manifest_for(&r, &r.cfg))?;
    println!(
        "wrote {} ({} frames, communication volume {:.4})",
        args.out.display(),
        report.detections.len(),
        report.communication_volume()?
    );
    Ok(())
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub delta_s: f64,
    pub delta_c: f64,
    pub comm_volume: f64,
    pub selected_fraction: f64,
    pub mean_feature_scalars: f64,
    pub metrics: MetricsReport,
}

pub fn sweep_csv(rows: &[SweepRow], ious: &[f64]) -> String {
    const NAMES: [&str; 5] = ["AP", "ARSV", "ARCV", "ARCI", "ARTC"];
    let mut out = String::from("delta_s,delta_c,comm_volume,selected_fraction,mean_feature_scalars");
    for iou in ious {
        for n in NAMES {
            out.push_str(&format!(",{n}@{iou}"));
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.delta_s, r.delta_c, r.comm_volume, r.selected_fraction, r.mean_feature_scalars
        ));
        for &iou in ious {
            for n in NAMES {
                match r.metrics.get(n, iou) {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn point_dir_name(delta_s: f64, delta_c: f64) -> String {
    format!("ds{delta_s}_dc{delta_c}")
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let grid = parse_grid(&args.grid)?;
    let r = resolve(&args.source, false)?;
    let threads = threads_from_env()?;
    let workers = if threads == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        threads
    }
    .clamp(1, grid.len());
    let cfgs: Vec<ScenarioConfig> = grid
        .iter()
        .map(|&(ds, dc)| {
            let cfg = ScenarioConfig { delta_s: ds, delta_c: dc, ..r.cfg.clone() };
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(&args.out)?;

    let run_point = |cfg: &ScenarioConfig| -> Result<SweepRow> {
        let opts = RunOptions { selection: r.selection, keep_packets: false, threads: 1 };
        let report = run_episode_with(cfg, &r.params, &opts)?;
        write_run(&args.out.join(point_dir_name(cfg.delta_s, cfg.delta_c)), &report, &manifest_for(&r, cfg))?;
        Ok(SweepRow {
            delta_s: cfg.delta_s,
            delta_c: cfg.delta_c,
            comm_volume: report.communication_volume()?,
            selected_fraction: report.selected_fraction().unwrap_or(0.0),
            mean_feature_scalars: report.mean_feature_scalars_per_transfer().unwrap_or(0.0),
            metrics: report.metrics,
        })
    };
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<SweepRow>>> = (0..cfgs.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= cfgs.len() {
                    break;
                }
                let row = run_point(&cfgs[i]);
                done.lock().expect("sweep worker poisoned")[i] = Some(row);
            });
        }
    });
    let rows = slots.into_iter().map(|r| r.expect("every point ran")).collect::<Result<Vec<_>>>()?;
    write(&args.out.join("sweep.csv"), sweep_csv(&rows, &r.cfg.iou_thresholds))?;
    println!("wrote {} ({} points)", args.out.display(), rows.len());
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_jsonl(&text).map_err(|e| match e {
        Error::Parse { line, message } => Error::Parse { line, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ious = parse_ious(&args.iou)?;
    let dets: Vec<DetectionFrame> = read_jsonl(&args.detections)?;
    let gts: Vec<GtFrame> = read_jsonl(&args.gt)?;
    let csv = evaluate(&build_frames(&dets, &gts, args.tau), &ious).to_csv();
    match &args.out {
        Some(p) => write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let packet = wire::decode(&bytes)?;
    println!("{}: {} bytes", path.display(), bytes.len());
    print!("{packet}");
    Ok(())
}

fn cmd_init(args: &InitArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    init_params(&cfg, cfg.seed)?.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectPacket { path } => cmd_inspect(path),
        Command::InitParams(a) => cmd_init(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("umc: {e}");
            exit_code(&e)
        }
    }
}
