//! `tqs`: quorum calculator, simulator driver and trace checker.
//!
//! Exit codes: 0 when everything passed, 1 when a check failed, 2 on I/O,
//! configuration or trace-format errors.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use tqs_core::analysis::{check_trace, CheckOptions};
use tqs_core::membership::MembershipMode;
use tqs_core::quorum::{Derived, SystemParams};
use tqs_core::sim::{ExperimentConfig, Workload};
use tqs_core::trace;

use output::{write_run, Manifest};

#[derive(Parser, Debug)]
#[command(name = "tqs", version, about = "Timed quorum system memory: calculator, simulator and checker")]
struct Cli {
    /// Output style: `csv` prints plain key=value lines or tables, `json`
    /// prints one JSON document.
    #[arg(long, value_enum, default_value_t = Format::Csv, global = true)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the derived quorum quantities for a parameter set.
    Calc(CalcArgs),
    /// Run one experiment and write its trace.
    Simulate(SimulateArgs),
    /// Check a trace directory and write report.json next to it.
    Check(CheckArgs),
    /// Run a grid of experiments, one directory per run.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct CalcArgs {
    #[arg(long)]
    n: u64,
    #[arg(long)]
    beta: f64,
    #[arg(long, default_value_t = 0.0)]
    c: f64,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 2)]
    k: u64,
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug, Default, Clone)]
struct Overrides {
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, value_enum)]
    membership: Option<Membership>,
    /// Also write messages.csv (large).
    #[arg(long)]
    record_messages: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Membership {
    Perfect,
    Cyclon,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let p = &mut cfg.params;
        if let Some(v) = self.n {
            p.n = v;
        }
        if let Some(v) = self.c {
            p.c = v;
        }
        if let Some(v) = self.delta {
            p.delta = v;
        }
        if let Some(v) = self.beta {
            p.beta = v;
        }
        if let Some(v) = self.k {
            p.k = v;
        }
        if let Some(v) = self.duration {
            cfg.duration = v;
        }
        if let Some(m) = self.membership {
            cfg.membership.mode = match m {
                Membership::Perfect => MembershipMode::Perfect,
                Membership::Cyclon => MembershipMode::Cyclon,
            };
        }
        cfg.record_messages |= self.record_messages;
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Directory holding ops.csv, and optionally snapshots.csv and config.json.
    #[arg(long)]
    trace: PathBuf,
    /// Timing window; defaults to the config's delta.
    #[arg(long)]
    delta: Option<f64>,
    /// Confidence parameter; defaults to the config's beta.
    #[arg(long)]
    beta: Option<f64>,
    /// Where to write the report. Defaults to TRACE/report.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Minimum fraction of snapshots above the up-to-date floor.
    #[arg(long, default_value_t = 0.95)]
    floor_fraction: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seeds `first..first+seeds` are run for every grid point.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Grid axis as `key=v1,v2,...` with key one of n, c, delta, beta, k,
    /// duration. Repeatable; the grid is the cartesian product.
    #[arg(long = "vary")]
    vary: Vec<String>,
    /// Concurrent runs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

/// Failure classes, mapped onto exit codes.
enum Failure {
    Checks(Vec<String>),
    Error(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TQS_LOG")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Calc(a) => calc(a, cli.format),
        Command::Simulate(a) => simulate(a, cli.format),
        Command::Check(a) => check(a, cli.format),
        Command::Sweep(a) => sweep(a, cli.format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks(names)) => {
            for n in names {
                eprintln!("FAILED: {n}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn calc(a: &CalcArgs, format: Format) -> Result<(), Failure> {
    let p = SystemParams { n: a.n, c: a.c, delta: a.delta, beta: a.beta, k: a.k };
    let d = Derived::compute(&p).map_err(anyhow::Error::from)?;
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&d).map_err(anyhow::Error::from)?),
        Format::Csv => {
            println!("q={}", d.q);
            println!("D={:.6}", d.d);
            println!("l={}", d.depth);
            println!("tree_size={}", d.tree_size);
            println!("miss={:.3e}", d.miss_bound);
            println!("replica_floor={:.4}", d.replica_floor);
        }
    }
    Ok(())
}

fn load_config(path: &Path, seed: Option<u64>, overrides: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    overrides.apply(&mut cfg);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn simulate(a: &SimulateArgs, format: Format) -> Result<(), Failure> {
    let cfg = load_config(&a.config, a.seed, &a.overrides)?;
    let manifest = write_run(&cfg, &a.out)?;
    print_manifest(&manifest, format)?;
    Ok(())
}

fn print_manifest(m: &Manifest, format: Format) -> anyhow::Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(m)?),
        Format::Csv => {
            println!("config_digest={}", m.config_digest);
            println!("trace_digest={}", m.trace_digest);
            println!("seed={}", m.seed);
            println!("ops={}", m.ops);
            println!("completed={}", m.completed);
            println!("end_time={}", m.summary.end_time);
            println!("out={}", m.out_dir.display());
        }
    }
    Ok(())
}

fn check(a: &CheckArgs, format: Format) -> Result<(), Failure> {
    let dir = &a.trace;
    let ops_path = dir.join(output::OPS_FILE);
    let ops_file = std::fs::File::open(&ops_path).with_context(|| format!("opening {}", ops_path.display()))?;
    let ops = trace::read_ops(ops_file).with_context(|| format!("reading {}", ops_path.display()))?;

    let snap_path = dir.join(output::SNAPSHOTS_FILE);
    let snapshots = if snap_path.exists() {
        let f = std::fs::File::open(&snap_path).with_context(|| format!("opening {}", snap_path.display()))?;
        trace::read_snapshots(f).with_context(|| format!("reading {}", snap_path.display()))?
    } else {
        Vec::new()
    };

    let cfg_path = dir.join(output::CONFIG_FILE);
    let cfg = if cfg_path.exists() {
        Some(ExperimentConfig::load(&cfg_path).with_context(|| format!("loading {}", cfg_path.display()))?)
    } else {
        None
    };
    let beta = a.beta.or(cfg.as_ref().map(|c| c.params.beta));
    let delta = a.delta.or(cfg.as_ref().map(|c| c.params.delta));
    let (Some(beta), Some(delta)) = (beta, delta) else {
        return Err(anyhow::anyhow!("no {} in {}; pass --beta and --delta", output::CONFIG_FILE, dir.display()).into());
    };
    // The floor only holds when writes keep coming at least every delta.
    let assert_floor = cfg.as_ref().is_some_and(|c| {
        matches!(c.workload, Workload::Periodic { write_period, .. } if write_period <= c.params.delta)
    });
    let opts = CheckOptions {
        beta,
        delta,
        params: cfg.map(|c| c.params),
        assert_floor,
        floor_fraction: a.floor_fraction,
    };
    let report = check_trace(&ops, &snapshots, &opts).context("checking trace")?;

    let out = a.out.clone().unwrap_or_else(|| dir.join(output::REPORT_FILE));
    std::fs::write(&out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    match format {
        Format::Json => println!("{}", report.to_json()),
        Format::Csv => print!("{}", report.summary_table()),
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Checks(report.failures().iter().map(|c| c.name.clone()).collect()))
    }
}

/// One axis of a sweep grid.
#[derive(Debug, Clone, PartialEq)]
struct Axis {
    key: String,
    values: Vec<f64>,
}

fn parse_axis(arg: &str) -> anyhow::Result<Axis> {
    let Some((key, vals)) = arg.split_once('=') else {
        bail!("--vary expects key=v1,v2,... but got {arg:?}");
    };
    if !["n", "c", "delta", "beta", "k", "duration"].contains(&key) {
        bail!("--vary: unknown key {key:?}");
    }
    let values = vals
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("--vary {key}: bad value {v:?}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if values.is_empty() {
        bail!("--vary {key}: no values");
    }
    Ok(Axis { key: key.to_string(), values })
}

fn grid(axes: &[Axis]) -> Vec<Vec<(String, f64)>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|point| {
                axis.values.iter().map(move |v| {
                    let mut p = point.clone();
                    p.push((axis.key.clone(), *v));
                    p
                })
            })
            .collect()
    })
}

fn set_key(cfg: &mut ExperimentConfig, key: &str, v: f64) {
    match key {
        "n" => cfg.params.n = v as u64,
        "c" => cfg.params.c = v,
        "delta" => cfg.params.delta = v,
        "beta" => cfg.params.beta = v,
        "k" => cfg.params.k = v as u64,
        "duration" => cfg.duration = v,
        _ => unreachable!("keys are checked when parsing"),
    }
}

fn sweep(a: &SweepArgs, format: Format) -> Result<(), Failure> {
    let base = load_config(&a.config, None, &Overrides::default())?;
    let axes = a.vary.iter().map(|s| parse_axis(s)).collect::<anyhow::Result<Vec<_>>>()?;
    let mut runs = Vec::new();
    for point in grid(&axes) {
        for seed in a.first_seed..a.first_seed + a.seeds {
            let mut cfg = base.clone();
            for (k, v) in &point {
                set_key(&mut cfg, k, *v);
            }
            cfg.seed = seed;
            runs.push(cfg);
        }
    }
    // Reject the whole grid up front rather than leaving half of it on disk.
    for (i, cfg) in runs.iter().enumerate() {
        cfg.resolve().with_context(|| format!("grid point {i}"))?;
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs).build().context("building worker pool")?;
    let manifests: Vec<anyhow::Result<Manifest>> = pool.install(|| {
        runs.par_iter()
            .enumerate()
            .map(|(i, cfg)| write_run(cfg, &a.out.join(format!("run-{i:04}"))))
            .collect()
    });
    let manifests = manifests.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    let table = output::sweep_table(&runs, &manifests);
    let table_path = a.out.join("sweep.csv");
    std::fs::write(&table_path, &table).with_context(|| format!("writing {}", table_path.display()))?;
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&manifests).map_err(anyhow::Error::from)?),
        Format::Csv => print!("{table}"),
    }
    Ok(())
}
