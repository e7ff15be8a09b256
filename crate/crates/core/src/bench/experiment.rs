//! Experiment execution and output files.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use super::config::{ExperimentConfig, ModulationKind, Scenario};
use super::metrics::{fmt_real, psnr, selection_stats, to_stable_json, MetricsReport};
use crate::engine::{run, EngineConfig, RunTrace};
use crate::error::Result;
use crate::predictor::PredictorSpec;
use crate::simulator::{
    affine_suite, heterogeneous_suite, initial_state, make_denoiser, quadratic_suite,
    rough_early_smooth_late, ModulationSchedule, SimulatedDenoiser, TrajectorySpec,
};
use crate::tensor::mse;

pub const SUMMARY_FILE: &str = "summary.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const SELECTION_FILE: &str = "selection.csv";

pub fn trajectory_spec(cfg: &ExperimentConfig, seed: u64) -> Result<TrajectorySpec> {
    let (t, shape) = (cfg.steps, cfg.shape());
    match &cfg.scenario {
        Scenario::Heterogeneous => Ok(heterogeneous_suite(t, shape, seed)?.0),
        Scenario::RoughSmooth => rough_early_smooth_late(t, shape, seed),
        Scenario::Linear => affine_suite(t, shape, seed),
        Scenario::Quadratic => quadratic_suite(t, shape, seed),
        Scenario::Inline(classes) => {
            TrajectorySpec::from_fn(t, shape, |_, n, _| classes[n % classes.len()].clone())
        }
    }
}

/// Simulated denoiser and initial state for a config.
pub fn build_simulation(cfg: &ExperimentConfig) -> Result<(SimulatedDenoiser, Array3<f64>)> {
    let seed = cfg.seed()?;
    let spec = trajectory_spec(cfg, seed)?;
    let modulation = match cfg.modulation {
        ModulationKind::Identity => ModulationSchedule::identity(cfg.steps, cfg.channels),
        ModulationKind::Drifting => ModulationSchedule::drifting(cfg.steps, cfg.channels),
    };
    let denoiser = make_denoiser(&spec, modulation, cfg.probe_mode)?;
    Ok((denoiser, initial_state(cfg.shape(), seed)))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub trace: RunTrace,
}

/// `T / (full + probe_fraction · skip)` from the run's actual counts.
pub fn speedup_estimate(trace: &RunTrace, probe_fraction: f64) -> f64 {
    let t = (trace.full_count + trace.skip_count) as f64;
    t / (trace.full_count as f64 + probe_fraction * trace.skip_count as f64)
}

/// Runs the configured strategy and an exact reference on the same seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let engine_cfg = cfg.engine_config()?;
    let (denoiser, x0) = build_simulation(cfg)?;
    let exact_cfg = EngineConfig {
        strategy: "exact".into(),
        ..engine_cfg.clone()
    };
    let (trace, reference) = rayon::join(|| run(&denoiser, &x0, &engine_cfg), || run(&denoiser, &x0, &exact_cfg));
    let (trace, reference) = (trace?, reference?);
    let selection = if trace.strategy == "tap" {
        selection_stats(&trace, &trace.family)?
    } else {
        Vec::new()
    };
    let report = MetricsReport {
        strategy: engine_cfg.label(),
        scenario: cfg.scenario.name().to_string(),
        seed: engine_cfg.seed,
        total_steps: cfg.steps,
        final_state_mse: mse(&reference.final_state, &trace.final_state)?,
        final_state_psnr_db: psnr(&reference.final_state, &trace.final_state, None)?,
        mean_step_residual_error: trace.mean_step_residual_error(),
        total_residual_error: trace.total_residual_error(),
        full_count: trace.full_count,
        skip_count: trace.skip_count,
        degenerate_token_count: trace.degenerate_token_count,
        speedup_estimate: speedup_estimate(&trace, cfg.probe_fraction),
        selection,
    };
    Ok(ExperimentOutput { report, trace })
}

/// One row per step.
pub fn write_trace_csv<W: std::io::Write>(trace: &RunTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "step",
        "was_full",
        "steps_since_full",
        "residual_error",
        "active_candidates",
        "degenerate_tokens",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(trace.family.iter().map(|s| format!("loss[{s}]")));
    w.write_record(&header)?;
    for rec in &trace.steps {
        let mut row = vec![
            rec.step.to_string(),
            rec.was_full.to_string(),
            rec.steps_since_full.to_string(),
            rec.residual_error.map_or_else(String::new, fmt_real),
            rec.candidate_losses.iter().filter(|l| l.is_some()).count().to_string(),
            rec.selection.as_ref().map_or(0, |s| s.degenerate_tokens).to_string(),
        ];
        for i in 0..trace.family.len() {
            row.push(rec.candidate_losses.get(i).copied().flatten().map_or_else(String::new, fmt_real));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per `(skipped step, batch, token)` of a selecting run.
pub fn write_selection_csv<W: std::io::Write>(trace: &RunTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "token",
        "batch",
        "was_full",
        "chosen_index",
        "chosen_order",
        "chosen_kp",
        "proxy_loss",
        "true_error",
    ])?;
    for rec in &trace.steps {
        let Some(sel) = &rec.selection else { continue };
        for ((b, n), &idx) in sel.chosen.indexed_iter() {
            let spec = &trace.family[idx];
            let kp = match spec {
                PredictorSpec::Taylor { .. } => spec.horizon(rec.steps_since_full),
                PredictorSpec::Hermite { .. } => None,
            };
            let true_error = rec.token_errors.as_ref().map_or_else(String::new, |e| fmt_real(e[[b, n]]));
            w.write_record([
                rec.step.to_string(),
                n.to_string(),
                b.to_string(),
                rec.was_full.to_string(),
                idx.to_string(),
                spec.order().to_string(),
                kp.map_or_else(String::new, |k| k.to_string()),
                fmt_real(sel.chosen_loss[[b, n]]),
                true_error,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `summary.json`, `trace.csv` and `selection.csv` into `dir`.
pub fn write_outputs(dir: &Path, output: &ExperimentOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SUMMARY_FILE), to_stable_json(&output.report)?)?;
    write_trace_csv(&output.trace, fs::File::create(dir.join(TRACE_FILE))?)?;
    write_selection_csv(&output.trace, fs::File::create(dir.join(SELECTION_FILE))?)?;
    Ok(())
}
