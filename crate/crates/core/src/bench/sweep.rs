//! One-axis parameter sweeps and multi-strategy comparisons.

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::experiment::{build_simulation, run_experiment};
use super::metrics::fmt_real;
use crate::engine::{compare_strategies, ComparisonRow};
use crate::error::{Error, Result};
use crate::predictor::build_family;

/// Environment variable capping worker threads; 0 or unset means the rayon
/// default.
pub const THREADS_ENV: &str = "TAP_THREADS";

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(THREADS_ENV, format!("expected a thread count, got `{v}`")))?,
        _ => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Io(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Window,
    Lambda,
    Delta,
    OrderHigh,
    Metric,
    ProbeMode,
    Strategy,
}

impl Axis {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.trim() {
            "N" | "window" => Axis::Window,
            "lambda" | "λ" => Axis::Lambda,
            "delta" | "δ" => Axis::Delta,
            "O_r" | "order_high" => Axis::OrderHigh,
            "metric" => Axis::Metric,
            "probe_mode" => Axis::ProbeMode,
            "strategy" => Axis::Strategy,
            other => return Err(Error::UnknownAxis(other.to_string())),
        })
    }

    /// Config key the axis writes.
    pub fn key(&self) -> &'static str {
        match self {
            Axis::Window => "window",
            Axis::Lambda => "family.lambda",
            Axis::Delta => "family.delta",
            Axis::OrderHigh => "family.order_high",
            Axis::Metric => "metric",
            Axis::ProbeMode => "probe_mode",
            Axis::Strategy => "strategy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontierRow {
    pub value: String,
    pub final_state_mse: f64,
    pub final_state_psnr_db: f64,
    pub total_residual_error: f64,
    pub full_count: usize,
    pub speedup: f64,
    /// 1 for the lowest total residual error; ties share the better rank.
    pub rank: usize,
}

/// Runs `base` once per value of `axis`, in parallel, keeping input order.
pub fn sweep(base: &ExperimentConfig, axis: &str, values: &[String]) -> Result<Vec<FrontierRow>> {
    let axis = Axis::parse(axis)?;
    let cfgs = values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(axis.key(), v)?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = thread_pool()?.install(|| {
        cfgs.par_iter()
            .map(|c| run_experiment(c).map(|o| o.report))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows: Vec<FrontierRow> = values
        .iter()
        .zip(reports)
        .map(|(v, r)| FrontierRow {
            value: v.clone(),
            final_state_mse: r.final_state_mse,
            final_state_psnr_db: r.final_state_psnr_db,
            total_residual_error: r.total_residual_error,
            full_count: r.full_count,
            speedup: r.speedup_estimate,
            rank: 0,
        })
        .collect();
    let errors: Vec<f64> = rows.iter().map(|r| r.total_residual_error).collect();
    for (row, e) in rows.iter_mut().zip(&errors) {
        row.rank = 1 + errors.iter().filter(|o| o.total_cmp(e).is_lt()).count();
    }
    Ok(rows)
}

pub fn write_frontier_csv<W: std::io::Write>(axis: &str, rows: &[FrontierRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "axis",
        "value",
        "final_state_mse",
        "final_state_psnr_db",
        "total_residual_error",
        "full_count",
        "speedup",
        "rank",
    ])?;
    for r in rows {
        w.write_record([
            axis.to_string(),
            r.value.clone(),
            fmt_real(r.final_state_mse),
            fmt_real(r.final_state_psnr_db),
            fmt_real(r.total_residual_error),
            r.full_count.to_string(),
            fmt_real(r.speedup),
            r.rank.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Compares named strategies against an exact run. `globals` expands to one
/// `global` run per family member.
pub fn compare(base: &ExperimentConfig, strategies: &[String]) -> Result<Vec<ComparisonRow>> {
    let mut cfgs = Vec::new();
    for name in strategies {
        let name = name.trim().to_ascii_lowercase();
        if name == "globals" {
            for spec in build_family(&base.family)? {
                let mut c = base.clone();
                c.strategy = "global".into();
                c.global = spec;
                cfgs.push(c.engine_config()?);
            }
        } else {
            let mut c = base.clone();
            c.set("strategy", &name)?;
            c.validate()?;
            cfgs.push(c.engine_config()?);
        }
    }
    let (denoiser, x0) = build_simulation(base)?;
    thread_pool()?.install(|| compare_strategies(&denoiser, &x0, &cfgs))
}

pub fn write_comparison_csv<W: std::io::Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "strategy",
        "final_state_mse",
        "final_relative_error",
        "mean_step_residual_error",
        "total_residual_error",
        "full_count",
    ])?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            fmt_real(r.final_state_mse),
            fmt_real(r.final_relative_error),
            fmt_real(r.mean_step_residual_error),
            fmt_real(r.total_residual_error),
            r.full_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
