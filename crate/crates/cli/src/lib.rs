//! Command-line driver: data generation, training, comparisons, sweeps and
//! charts.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 diverged
//! run, 4 malformed input data.

pub mod svg;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use redreg::checkpoint;
use redreg::config::{DataSource, Method, RunConfig};
use redreg::data::generate_synthetic;
use redreg::telemetry::{read_jsonl, RecordKind, TelemetryRecord};
use redreg::trainer::{self, aggregate, summary_csv, MeanStd, SummaryRow, AGGREGATE_HEADER};
use redreg::Error;

use svg::{Chart, Series, COLOR_A, COLOR_AUX, COLOR_JOINT, COLOR_V};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_MALFORMED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "redreg", version, about = "Redundancy-regulated multimodal training experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as CSV files.
    GenData(RunArgs),
    /// Train one run and write telemetry, summary and checkpoint.
    Train(RunArgs),
    /// Train several methods over several seeds.
    Compare(CompareArgs),
    /// Train over a grid of values for one config key.
    Sweep(SweepArgs),
    /// Render SVG charts from a telemetry file.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON config; defaults are used for absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key.path=value` override, applied after the file in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, env = "REDREG_OUT", default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated seeds; defaults to the config seed.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, default_value = "joint,redreg")]
    pub methods: String,
    /// Worker threads; 0 picks the number of CPUs.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Config key to vary, either a dotted path or one of
    /// gamma, beta, R, tau_min, tau_max, lr, momentum.
    #[arg(long)]
    pub param: String,
    /// Comma-separated grid.
    #[arg(long)]
    pub values: String,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub telemetry: PathBuf,
    #[arg(long, env = "REDREG_OUT", default_value = ".")]
    pub out: PathBuf,
}

/// An error with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, message: message.into() }
    }

    fn malformed(message: impl Into<String>) -> Self {
        Failure { code: EXIT_MALFORMED, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
            Error::Load(_) | Error::Malformed { .. } => EXIT_MALFORMED,
            Error::InvalidArgument(_) | Error::Shape(_) | Error::Io { .. } => EXIT_CONFIG,
        };
        Failure { code, message: e.to_string() }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs a parsed invocation and returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Plot(a) => cmd_plot(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

fn load_config(args: &RunArgs) -> CliResult<RunConfig> {
    let cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text, &args.overrides)
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::from_json("{}", &args.overrides)?,
    };
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::config(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

fn parse_seeds(list: Option<&str>, default: u64) -> CliResult<Vec<u64>> {
    let Some(list) = list else {
        return Ok(vec![default]);
    };
    let seeds = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().map_err(|_| Failure::config(format!("bad seed {s:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(Failure::config("--seeds lists no seeds"));
    }
    Ok(seeds)
}

fn parse_methods(list: &str) -> CliResult<Vec<Method>> {
    let methods = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Method>().map_err(Failure::from))
        .collect::<CliResult<Vec<_>>>()?;
    if methods.is_empty() {
        return Err(Failure::config("--methods lists no methods"));
    }
    Ok(methods)
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::config(format!("cannot start worker pool: {e}")))
}

/// Runs every config in parallel; results keep the input order.
fn run_all(configs: &[RunConfig], jobs: usize) -> CliResult<Vec<SummaryRow>> {
    let results: Vec<redreg::Result<SummaryRow>> =
        pool(jobs)?.install(|| configs.par_iter().map(|c| trainer::run_once(c).map(|r| r.0)).collect());
    results.into_iter().map(|r| r.map_err(Failure::from)).collect()
}

pub fn cmd_gen_data(args: &RunArgs) -> CliResult<()> {
    let cfg = load_config(args)?;
    let DataSource::Synthetic(src) = &cfg.data else {
        return Err(Failure::config("gen-data needs a synthetic data source"));
    };
    let ds = generate_synthetic(&src.synth_config(cfg.seed))?;
    ensure_dir(&args.out)?;
    ds.write_csv(
        &args.out.join("features_a.csv"),
        &args.out.join("features_v.csv"),
        &args.out.join("labels.csv"),
    )?;
    Ok(())
}

pub fn cmd_train(args: &RunArgs) -> CliResult<()> {
    let cfg = load_config(args)?;
    let (train_set, test_set) = trainer::prepare_data(&cfg)?;
    ensure_dir(&args.out)?;
    write_file(&args.out.join("config.json"), &(cfg.to_json_pretty() + "\n"))?;

    let tel_path = args.out.join("telemetry.jsonl");
    let file = File::create(&tel_path).map_err(|e| Failure::config(format!("cannot write {}: {e}", tel_path.display())))?;
    let mut w = BufWriter::new(file);
    let mut write_err: Option<std::io::Error> = None;
    let outcome = trainer::train(&cfg, &train_set, Some(&test_set), |r| {
        if write_err.is_none() {
            if let Err(e) = writeln!(w, "{}", r.to_json_line()) {
                write_err = Some(e);
            }
        }
    });
    let flushed = w.flush();
    if let Some(e) = write_err.or(flushed.err()) {
        return Err(Failure::config(format!("cannot write {}: {e}", tel_path.display())));
    }
    let outcome = outcome?;

    let report = outcome.report.as_ref().expect("eval set was provided");
    let row = SummaryRow::from_report(cfg.method, cfg.seed, report);
    write_file(&args.out.join("summary.csv"), &summary_csv(&[row]))?;
    checkpoint::save(&outcome.model, &args.out.join("checkpoint.json"))?;
    Ok(())
}

fn aggregate_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(AGGREGATE_HEADER);
    s.push('\n');
    for a in aggregate(rows) {
        s.push_str(&a.to_csv());
        s.push('\n');
    }
    s
}

pub fn cmd_compare(args: &CompareArgs) -> CliResult<()> {
    let cfg = load_config(&args.run)?;
    let seeds = parse_seeds(args.seeds.as_deref(), cfg.seed)?;
    let methods = parse_methods(&args.methods)?;
    let configs: Vec<RunConfig> = methods
        .iter()
        .flat_map(|&method| seeds.iter().map(move |&seed| (method, seed)))
        .map(|(method, seed)| RunConfig { method, seed, ..cfg.clone() })
        .collect();
    let rows = run_all(&configs, args.jobs)?;
    ensure_dir(&args.run.out)?;
    write_file(&args.run.out.join("summary.csv"), &summary_csv(&rows))?;
    write_file(&args.run.out.join("aggregate.csv"), &aggregate_csv(&rows))?;
    Ok(())
}

/// Expands the short hyperparameter names accepted by `sweep --param`.
pub fn sweep_key(param: &str) -> &str {
    match param {
        "gamma" => "monitor.gamma",
        "beta" => "regulation.beta",
        "R" | "r_threshold" => "gate.r_threshold",
        "tau_min" => "gate.tau_min",
        "tau_max" => "gate.tau_max",
        "lr" => "optimizer.lr",
        "momentum" => "optimizer.momentum",
        other => other,
    }
}

pub const SWEEP_RUNS_HEADER: &str = "param,value,method,seed,acc,acc_a,acc_v,f1,gap";
pub const SWEEP_MEAN_HEADER: &str =
    "param,value,runs,acc_mean,acc_std,acc_a_mean,acc_a_std,acc_v_mean,acc_v_std,f1_mean,f1_std,gap_mean,gap_std";

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let base = load_config(&args.run)?;
    let key = sweep_key(args.param.trim());
    let values: Vec<&str> = args.values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::config("sweep grid is empty"));
    }
    let seeds = parse_seeds(args.seeds.as_deref(), base.seed)?;

    let mut configs = Vec::with_capacity(values.len() * seeds.len());
    for v in &values {
        let cfg = base
            .with_overrides(&[format!("{key}={v}")])
            .map_err(|e| Failure::config(format!("sweep {key}={v}: {e}")))?;
        for &seed in &seeds {
            configs.push(RunConfig { seed, ..cfg.clone() });
        }
    }
    let rows = run_all(&configs, args.jobs)?;

    let mut runs = String::from(SWEEP_RUNS_HEADER);
    runs.push('\n');
    let mut mean = String::from(SWEEP_MEAN_HEADER);
    mean.push('\n');
    for (vi, v) in values.iter().enumerate() {
        let group = &rows[vi * seeds.len()..(vi + 1) * seeds.len()];
        for r in group {
            runs.push_str(&format!("{key},{v},{}\n", r.to_csv()));
        }
        let col = |f: fn(&SummaryRow) -> f64| {
            let m = MeanStd::of(&group.iter().map(f).collect::<Vec<_>>());
            format!("{},{}", m.mean, m.std)
        };
        mean.push_str(&format!(
            "{key},{v},{},{},{},{},{},{}\n",
            group.len(),
            col(|r| r.acc),
            col(|r| r.acc_a),
            col(|r| r.acc_v),
            col(|r| r.f1),
            col(|r| r.gap)
        ));
    }
    ensure_dir(&args.run.out)?;
    write_file(&args.run.out.join("sweep_runs.csv"), &runs)?;
    write_file(&args.run.out.join("sweep_mean.csv"), &mean)?;
    Ok(())
}

/// Chart file names written by `plot`.
pub const CHART_FILES: [&str; 5] = ["rlc.svg", "growth.svg", "redundancy.svg", "gate.svg", "branch_accuracy.svg"];

fn epoch_series(records: &[&TelemetryRecord], label: &str, color: &'static str, f: fn(&TelemetryRecord) -> Option<f64>) -> Series {
    let points = records.iter().map(|r| (r.epoch as f64, f(r).unwrap_or(f64::NAN))).collect();
    Series::new(label, color, points)
}

/// Builds the five charts from the epoch records of a telemetry stream.
pub fn build_charts(records: &[TelemetryRecord]) -> Vec<(&'static str, Chart)> {
    let epochs: Vec<&TelemetryRecord> = records.iter().filter(|r| r.kind == Some(RecordKind::Epoch)).collect();
    let chart = |title: &str, y: &str, series: Vec<Series>| Chart {
        title: title.to_string(),
        x_label: "epoch".to_string(),
        y_label: y.to_string(),
        series,
    };
    vec![
        (
            CHART_FILES[0],
            chart(
                "Representation-to-logit coupling",
                "RLC",
                vec![
                    epoch_series(&epochs, "a", COLOR_A, |r| r.rlc_a),
                    epoch_series(&epochs, "v", COLOR_V, |r| r.rlc_v),
                ],
            ),
        ),
        (
            CHART_FILES[1],
            chart(
                "Gain growth rate",
                "growth rate",
                vec![
                    epoch_series(&epochs, "a", COLOR_A, |r| r.s_a),
                    epoch_series(&epochs, "v", COLOR_V, |r| r.s_v),
                ],
            ),
        ),
        (
            CHART_FILES[2],
            chart(
                "Redundancy",
                "redundancy score",
                vec![
                    epoch_series(&epochs, "red a", COLOR_A, |r| r.red_a),
                    epoch_series(&epochs, "red v", COLOR_V, |r| r.red_v),
                    epoch_series(&epochs, "monitor a", COLOR_A, |r| r.r_a).dashed(),
                    epoch_series(&epochs, "monitor v", COLOR_V, |r| r.r_v).dashed(),
                ],
            ),
        ),
        (
            CHART_FILES[3],
            chart(
                "Gate timeline",
                "gate / similarity",
                vec![
                    epoch_series(&epochs, "gate a", COLOR_A, |r| r.gate_a.map(f64::from)),
                    epoch_series(&epochs, "gate v", COLOR_V, |r| r.gate_v.map(f64::from)),
                    epoch_series(&epochs, "similarity", COLOR_AUX, |r| r.sim),
                    epoch_series(&epochs, "threshold", COLOR_JOINT, |r| r.tau).dashed(),
                ],
            ),
        ),
        (
            CHART_FILES[4],
            chart(
                "Held-out accuracy",
                "accuracy",
                vec![
                    epoch_series(&epochs, "branch a", COLOR_A, |r| r.acc_a),
                    epoch_series(&epochs, "branch v", COLOR_V, |r| r.acc_v),
                    epoch_series(&epochs, "fused", COLOR_JOINT, |r| r.acc),
                ],
            ),
        ),
    ]
}

pub fn cmd_plot(args: &PlotArgs) -> CliResult<()> {
    let file = File::open(&args.telemetry)
        .map_err(|e| Failure::config(format!("cannot read telemetry {}: {e}", args.telemetry.display())))?;
    let records = read_jsonl(BufReader::new(file))
        .map_err(|e| Failure::malformed(format!("{}: {e}", args.telemetry.display())))?;
    if records.is_empty() {
        return Err(Failure::malformed(format!("{}: telemetry is empty", args.telemetry.display())));
    }
    if !records.iter().any(|r| r.kind == Some(RecordKind::Epoch)) {
        return Err(Failure::malformed(format!("{}: no epoch records", args.telemetry.display())));
    }
    ensure_dir(&args.out)?;
    for (name, chart) in build_charts(&records) {
        write_file(&args.out.join(name), &svg::render(&chart))?;
    }
    Ok(())
}
