use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tap_core::bench::experiment::write_outputs;
use tap_core::bench::metrics::{samples_from_selection_csv, stats_from_samples, to_stable_json, write_stats_csv};
use tap_core::bench::sweep::{write_comparison_csv, write_frontier_csv};
use tap_core::bench::{compare, run_experiment, sweep, ExperimentConfig};
use tap_core::cost::{flops_full, flops_probe, hbm_peak, schedule_speedup, TransformerDims};
use tap_core::Error;

#[derive(Parser)]
#[command(name = "tap", version, about = "Token-adaptive predictor selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write summary.json, trace.csv and selection.csv
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory (overrides `out`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one parameter and print an error/speedup frontier as CSV
    Sweep {
        #[command(flatten)]
        common: Common,
        /// N, lambda, delta, O_r, metric, probe_mode or strategy
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare strategies against an exact run; `globals` expands to every family member
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "exact,reuse,global,tap")]
        strategies: Vec<String>,
    },
    /// Schedule speedup and, given dimensions, FLOPs and peak memory
    Cost(CostArgs),
    /// Per-step selection statistics from a selection CSV
    Stats {
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long = "probe-mode")]
    probe_mode: Option<String>,
    #[arg(long = "T")]
    steps: Option<usize>,
    #[arg(long = "N")]
    window: Option<usize>,
    #[arg(long = "W")]
    warmup: Option<usize>,
    /// Any config key, as key=value; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("strategy", self.strategy.clone()),
            ("scenario", self.scenario.clone()),
            ("metric", self.metric.clone()),
            ("probe_mode", self.probe_mode.clone()),
            ("steps", self.steps.map(|v| v.to_string())),
            ("window", self.window.map(|v| v.to_string())),
            ("warmup", self.warmup.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config { key: pair.clone(), message: "expected KEY=VALUE".into() })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        cfg.seed()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct CostArgs {
    #[arg(long = "T")]
    steps: usize,
    #[arg(long = "N")]
    window: usize,
    #[arg(long = "W")]
    warmup: usize,
    #[arg(long = "probe-fraction", default_value_t = 0.0)]
    probe_fraction: f64,
    #[arg(long)]
    layers: Option<u64>,
    #[arg(long, default_value_t = 1)]
    tokens: u64,
    #[arg(long, default_value_t = 1)]
    channels: u64,
    #[arg(long, default_value_t = 0)]
    params: u64,
    #[arg(long, default_value_t = 2)]
    bytes: u64,
    #[arg(long, default_value_t = 2)]
    cached: u64,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    batch: u64,
}

fn cost(args: &CostArgs) -> Result<String, Error> {
    let speedup = schedule_speedup(args.steps, args.window, args.warmup, args.probe_fraction)?;
    let mut record = json!({
        "T": args.steps,
        "N": args.window,
        "W": args.warmup,
        "probe_fraction": args.probe_fraction,
        "speedup": speedup,
    });
    if let Some(layers) = args.layers {
        let dims = TransformerDims {
            layers,
            tokens: args.tokens,
            channels: args.channels,
            params: args.params,
            bytes_per_element: args.bytes,
            cached_tensors: args.cached,
            activation_factor: args.alpha,
            batch: args.batch,
        };
        dims.validate()?;
        record["flops_full"] = json!(flops_full(&dims));
        record["flops_probe"] = json!(flops_probe(&dims));
        record["hbm_peak_bytes"] = json!(hbm_peak(&dims));
    }
    to_stable_json(&record)
}

fn execute(cli: Cli) -> Result<(), Error> {
    let stdout = io::stdout();
    match cli.command {
        Command::Run { common, out } => {
            let mut cfg = common.load()?;
            if out.is_some() {
                cfg.out = out;
            }
            let output = run_experiment(&cfg)?;
            if let Some(dir) = &cfg.out {
                write_outputs(dir, &output)?;
            }
            stdout.lock().write_all(to_stable_json(&output.report)?.as_bytes())?;
        }
        Command::Sweep { common, axis, values, out } => {
            let cfg = common.load()?;
            let rows = sweep(&cfg, &axis, &values)?;
            match out {
                Some(path) => write_frontier_csv(&axis, &rows, fs::File::create(path)?)?,
                None => write_frontier_csv(&axis, &rows, stdout.lock())?,
            }
        }
        Command::Compare { common, strategies } => {
            let cfg = common.load()?;
            write_comparison_csv(&compare(&cfg, &strategies)?, stdout.lock())?;
        }
        Command::Cost(args) => stdout.lock().write_all(cost(&args)?.as_bytes())?,
        Command::Stats { trace } => {
            let samples = samples_from_selection_csv(&trace)?;
            write_stats_csv(&stats_from_samples(&samples), stdout.lock())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tap: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
