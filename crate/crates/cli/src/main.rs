//! `adaedit` command-line driver. Every command writes deterministic CSV
//! artifacts plus a `manifest.json` whose only run-dependent field is the
//! timestamp.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use adaedit::fmt::fmt_f64;
use adaedit::metrics::{default_peak, psnr, ssim, SsimParams};
use adaedit::perturb::channel_report_csv;
use adaedit::pipeline::{
    run_ablation_grid, run_reconstruction, summary_csv, trace_csv, Axis, EditConfig, GridRun,
    SummaryRow,
};
use adaedit::schedule::{InjectionSchedule, ScheduleFamily};
use adaedit::solver::{order_study, orders_csv, SolverKind};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const ORDER_LADDER: [usize; 3] = [10, 20, 40];
const ORDER_TOLERANCE: f64 = 0.3;

#[derive(Parser)]
#[command(name = "adaedit", version, about = "Progressive-injection latent editing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One edit of the configured synthetic source.
    Edit(RunArgs),
    /// Inversion followed by resampling under the source prompt.
    Reconstruct(RunArgs),
    /// The edit under every schedule family.
    SweepSchedule(RunArgs),
    /// The edit under a list of channel-weight temperatures.
    SweepTemperature {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated temperatures.
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        taus: Vec<f64>,
    },
    /// Convergence orders of the solvers on an analytic flow.
    SolverOrder(RunArgs),
    /// Cartesian grid over config fields.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// JSON list of `{"field": ..., "values": [...]}` axes.
        #[arg(long)]
        axes: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Override one config field, e.g. `--set tau=2` or `--set model.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug)]
enum CliError {
    Core(adaedit::Error),
    Usage(String),
    Check(String),
}

impl From<adaedit::Error> for CliError {
    fn from(e: adaedit::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use adaedit::Error as E;
        match self {
            CliError::Core(E::Divergence { .. } | E::CacheMiss { .. } | E::State(_)) => 3,
            CliError::Core(_) | CliError::Usage(_) => 2,
            CliError::Check(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<String>,
    out_dir: String,
    timestamp: u64,
    config_hash: String,
}

/// SHA-256 of the compact JSON with sorted keys.
fn config_hash(value: &Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn load_config(args: &RunArgs) -> CliResult<EditConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<EditConfig>(&text)
                .map_err(|e| adaedit::Error::Parse(format!("{}: {e}", path.display())))?
        }
        None => EditConfig::default(),
    };
    if let Ok(seed) = std::env::var("ADAEDIT_SEED") {
        cfg.seed = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("ADAEDIT_SEED must be an unsigned integer, got `{seed}`")))?;
    }
    for item in &args.overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        cfg = cfg.with_field(key.trim(), value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_manifest(command: &str, args: &RunArgs, hashed: &Value) -> CliResult<()> {
    let manifest = RunManifest {
        command,
        config_path: args.config.as_ref().map(|p| p.display().to_string()),
        out_dir: args.out.display().to_string(),
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config_hash: config_hash(hashed),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&args.out, "manifest.json", &(text + "\n"))
}

fn prepare(args: &RunArgs) -> CliResult<EditConfig> {
    let cfg = load_config(args)?;
    fs::create_dir_all(&args.out)?;
    write(
        &args.out,
        "config.json",
        &(serde_json::to_string_pretty(&cfg.to_value()).expect("config serializes") + "\n"),
    )?;
    Ok(cfg)
}

fn grid(cfg: &EditConfig, axes: &[Axis]) -> CliResult<Vec<GridRun>> {
    let source = cfg.source_latent()?;
    let c_src = cfg.source_conditioning()?;
    let c_tgt = cfg.target_conditioning()?;
    Ok(run_ablation_grid(&source, &c_src, &c_tgt, cfg, axes)?)
}

fn summaries(runs: &[GridRun]) -> Vec<SummaryRow> {
    runs.iter().map(|r| r.summary.clone()).collect()
}

fn cmd_edit(args: &RunArgs) -> CliResult<()> {
    let cfg = prepare(args)?;
    let run = grid(&cfg, &[])?.remove(0);
    let r = &run.result;
    write(&args.out, "result.csv", &summary_csv(std::slice::from_ref(&run.summary)))?;
    write(&args.out, "mask.csv", &r.mask.to_csv())?;
    write(
        &args.out,
        "channels.csv",
        &channel_report_csv(&r.channel_gaps, &r.channel_weights, cfg.alpha),
    )?;
    write(&args.out, "schedule.csv", &trace_csv(&r.schedule_trace))?;
    write(&args.out, "edited.csv", &r.edited.to_csv_string())?;
    write_manifest("edit", args, &cfg.to_value())
}

fn cmd_reconstruct(args: &RunArgs) -> CliResult<()> {
    let cfg = prepare(args)?;
    let source = cfg.source_latent()?;
    let recon = run_reconstruction(&source, &cfg.source_conditioning()?, &cfg)?;
    let peak = default_peak(&source);
    let metrics = format!(
        "T,solver,psnr,ssim,max_abs_error\n{},{},{},{},{}\n",
        cfg.total_steps,
        cfg.solver.name(),
        fmt_f64(psnr(&source, &recon, peak)?),
        fmt_f64(ssim(&source, &recon, &SsimParams::with_peak(peak))?),
        fmt_f64(source.max_abs_diff(&recon)?)
    );
    write(&args.out, "reconstruction.csv", &recon.to_csv_string())?;
    write(&args.out, "metrics.csv", &metrics)?;
    write_manifest("reconstruct", args, &cfg.to_value())
}

fn cmd_sweep_schedule(args: &RunArgs) -> CliResult<()> {
    let cfg = prepare(args)?;
    let families: Vec<Value> = ScheduleFamily::ALL.iter().map(|f| json!(f.name())).collect();
    let runs = grid(&cfg, &[Axis::new("schedule", families)])?;
    write(&args.out, "sweep.csv", &summary_csv(&summaries(&runs)))?;

    let mut curves = String::from("step,family,weight\n");
    for family in ScheduleFamily::ALL {
        let s = InjectionSchedule::new(adaedit::schedule::ScheduleParams {
            family,
            ..cfg.schedule_params()
        })?;
        for (i, w) in s.weights().iter().enumerate() {
            let _ = writeln!(curves, "{i},{},{}", family.name(), fmt_f64(*w));
        }
    }
    write(&args.out, "schedule_curves.csv", &curves)?;
    write_manifest("sweep-schedule", args, &cfg.to_value())
}

fn cmd_sweep_temperature(args: &RunArgs, taus: &[f64]) -> CliResult<()> {
    if taus.is_empty() {
        return Err(CliError::Usage("--taus needs at least one value".into()));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(CliError::Usage(format!("--taus: every temperature must be positive, got {t}")));
    }
    let cfg = prepare(args)?;
    let runs = grid(&cfg, &[Axis::new("tau", taus.iter().map(|t| json!(t)).collect())])?;
    let channels = cfg.model.channels;
    let mut table = String::from("run_id,tau,variance");
    for c in 0..channels {
        let _ = write!(table, ",alpha_{c}");
    }
    table.push('\n');
    for run in &runs {
        let w = &run.result.channel_weights;
        let _ = write!(table, "{},{},{}", run.summary.run_id, fmt_f64(w.tau), fmt_f64(w.variance()));
        for a in &w.alpha_c {
            let _ = write!(table, ",{}", fmt_f64(*a));
        }
        table.push('\n');
    }
    write(&args.out, "temperature.csv", &table)?;
    write(&args.out, "sweep.csv", &summary_csv(&summaries(&runs)))?;
    let mut hashed = cfg.to_value();
    hashed["taus"] = json!(taus);
    write_manifest("sweep-temperature", args, &hashed)
}

fn cmd_solver_order(args: &RunArgs) -> CliResult<()> {
    fs::create_dir_all(&args.out)?;
    let studies = SolverKind::ALL
        .iter()
        .map(|&k| order_study(k, &ORDER_LADDER))
        .collect::<Result<Vec<_>, _>>()?;
    write(&args.out, "orders.csv", &orders_csv(&studies))?;
    write_manifest("solver-order", args, &json!({ "steps": ORDER_LADDER }))?;
    let order = |k: SolverKind| studies.iter().find(|s| s.kind == k).map_or(f64::NAN, |s| s.order);
    let (euler, mid) = (order(SolverKind::Euler), order(SolverKind::Midpoint));
    if (euler - 1.0).abs() > ORDER_TOLERANCE || (mid - 2.0).abs() > ORDER_TOLERANCE {
        return Err(CliError::Check(format!(
            "fitted orders euler {euler:.3}, midpoint {mid:.3} outside ±{ORDER_TOLERANCE}"
        )));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisSpec {
    field: String,
    values: Vec<Value>,
}

fn cmd_ablate(args: &RunArgs, axes_path: Option<&Path>) -> CliResult<()> {
    let cfg = prepare(args)?;
    let specs: Vec<AxisSpec> = match axes_path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| adaedit::Error::Parse(format!("{}: {e}", p.display())))?,
        None => Vec::new(),
    };
    let axes: Vec<Axis> = specs.into_iter().map(|s| Axis::new(s.field, s.values)).collect();
    let runs = grid(&cfg, &axes)?;
    write(&args.out, "ablation.csv", &summary_csv(&summaries(&runs)))?;
    let mut hashed = cfg.to_value();
    hashed["axes"] = Value::Array(
        axes.iter()
            .map(|a| json!({ "field": a.field, "values": a.values }))
            .collect(),
    );
    write_manifest("ablate", args, &hashed)
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Edit(a) => cmd_edit(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::SweepSchedule(a) => cmd_sweep_schedule(a),
        Command::SweepTemperature { run, taus } => cmd_sweep_temperature(run, taus),
        Command::SolverOrder(a) => cmd_solver_order(a),
        Command::Ablate { run, axes } => cmd_ablate(run, axes.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
