//! Sampling-run orchestration.
//!
//! Every step computes the probe from the current state. Full steps run the
//! denoiser and cache `(probe, residual)`; skipped steps ask the configured
//! [`Strategy`] for a residual forecast. The state then advances to the
//! step's output.

mod registry;
mod strategy;

pub use registry::{StrategyBuilder, StrategyParams, StrategyRegistry};
pub use strategy::{
    ExactStrategy, Forecast, GlobalStrategy, ReuseStrategy, StepContext, Strategy, TapStrategy,
    ThresholdStrategy,
};

use ndarray::{Array2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheState, Schedule};
use crate::error::{Error, Result};
use crate::predictor::PredictorSpec;
use crate::selector::SelectionMap;
use crate::tensor::{ensure_same_shape, mse, relative_error, FeatureTensor};

/// The model being accelerated.
pub trait Denoiser {
    /// Full model output `f(x, step)`.
    fn full_eval(&self, x: &FeatureTensor, step: usize) -> FeatureTensor;

    /// Cheap first-layer probe of `x`.
    fn probe_eval(&self, x: &FeatureTensor, step: usize) -> FeatureTensor;

    /// Ground-truth residual at `x` for diagnostics, when the model can supply
    /// it without counting as a full evaluation.
    fn reference_residual(&self, _x: &FeatureTensor, _step: usize) -> Option<FeatureTensor> {
        None
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn full_eval(&self, x: &FeatureTensor, step: usize) -> FeatureTensor {
        (**self).full_eval(x, step)
    }

    fn probe_eval(&self, x: &FeatureTensor, step: usize) -> FeatureTensor {
        (**self).probe_eval(x, step)
    }

    fn reference_residual(&self, x: &FeatureTensor, step: usize) -> Option<FeatureTensor> {
        (**self).reference_residual(x, step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub schedule: Schedule,
    /// Registry name of the strategy.
    pub strategy: String,
    pub params: StrategyParams,
    pub seed: u64,
}

impl EngineConfig {
    pub fn new(schedule: Schedule, strategy: &str) -> Self {
        Self {
            schedule,
            strategy: strategy.to_string(),
            params: StrategyParams::default(),
            seed: 0,
        }
    }

    pub fn with_params(mut self, params: StrategyParams) -> Self {
        self.params = params;
        self
    }

    /// Human-readable strategy label, including the predictor for `global`.
    pub fn label(&self) -> String {
        match self.strategy.as_str() {
            "global" => format!("global:{}", self.params.global),
            "threshold" => format!("threshold:{}", self.params.threshold),
            s => s.to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub was_full: bool,
    /// Steps since the previous full evaluation (0 on full steps).
    pub steps_since_full: usize,
    pub output: FeatureTensor,
    /// Per-token choice on skipped steps of selecting strategies.
    pub selection: Option<SelectionMap>,
    /// Mean proxy loss per family member; empty for non-selecting strategies.
    pub candidate_losses: Vec<Option<f64>>,
    /// MSE between the applied residual and the reference residual.
    pub residual_error: Option<f64>,
    /// Per-token MSE over channels of the applied residual on skipped steps.
    pub token_errors: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub strategy: String,
    pub family: Vec<PredictorSpec>,
    pub schedule: Schedule,
    pub steps: Vec<StepRecord>,
    pub full_count: usize,
    pub skip_count: usize,
    pub degenerate_token_count: usize,
    pub final_state: FeatureTensor,
}

impl RunTrace {
    /// Mean of the per-step residual errors; `NaN` if the denoiser provides no
    /// reference.
    pub fn mean_step_residual_error(&self) -> f64 {
        self.total_residual_error() / self.steps.len().max(1) as f64
    }

    /// Sum of the per-step residual errors.
    pub fn total_residual_error(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.residual_error.unwrap_or(f64::NAN))
            .sum()
    }
}

/// Number of full denoiser evaluations in a run.
pub fn full_call_count(trace: &RunTrace) -> usize {
    trace.full_count
}

/// Runs a whole sampling trajectory with a strategy from the built-in registry.
pub fn run<D: Denoiser + ?Sized>(denoiser: &D, x_init: &FeatureTensor, cfg: &EngineConfig) -> Result<RunTrace> {
    run_with_registry(&StrategyRegistry::with_builtins(), denoiser, x_init, cfg)
}

fn per_token_mse(a: &FeatureTensor, b: &FeatureTensor) -> Array2<f64> {
    let c = a.len_of(Axis(2)) as f64;
    let (bn, nn, _) = a.dim();
    let mut out = Array2::zeros((bn, nn));
    Zip::from(&mut out)
        .and(a.lanes(Axis(2)))
        .and(b.lanes(Axis(2)))
        .for_each(|o, x, y| {
            *o = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / c;
        });
    out
}

pub fn run_with_registry<D: Denoiser + ?Sized>(
    registry: &StrategyRegistry,
    denoiser: &D,
    x_init: &FeatureTensor,
    cfg: &EngineConfig,
) -> Result<RunTrace> {
    cfg.schedule.validate()?;
    let schedule = cfg.schedule;
    let mut strategy = registry.build(&cfg.strategy, &cfg.params)?;
    let mut cache = CacheState::new(strategy.required_history().max(1))?;
    let mut x = x_init.clone();
    let mut steps = Vec::with_capacity(schedule.total_steps);
    let (mut full_count, mut degenerate) = (0, 0);

    for u in 0..schedule.total_steps {
        let probe = denoiser.probe_eval(&x, u);
        ensure_same_shape(&x, &probe)?;
        let ctx = StepContext {
            step: u,
            schedule: &schedule,
            probe: &probe,
            state: &x,
            cache: &cache,
        };
        let full = strategy.wants_full(&ctx)?;
        let reference = denoiser.reference_residual(&x, u);

        let record = if full {
            let candidate_losses = strategy.full_step_losses(&ctx)?;
            let output = denoiser.full_eval(&x, u);
            ensure_same_shape(&x, &output)?;
            let residual = &output - &x;
            let residual_error = reference.as_ref().map(|r| mse(r, &residual)).transpose()?;
            cache.record_full(u, probe, residual)?;
            full_count += 1;
            StepRecord {
                step: u,
                was_full: true,
                steps_since_full: 0,
                output,
                selection: None,
                candidate_losses,
                residual_error,
                token_errors: None,
            }
        } else {
            if cache.residual_stack.is_empty() {
                return Err(Error::InsufficientSnapshots { needed: 1, have: 0 });
            }
            let k = ctx.k();
            let forecast = strategy.forecast(&ctx)?;
            ensure_same_shape(&x, &forecast.residual)?;
            if let Some(sel) = &forecast.selection {
                degenerate += sel.degenerate_tokens;
            }
            let residual_error = reference
                .as_ref()
                .map(|r| mse(r, &forecast.residual))
                .transpose()?;
            let token_errors = reference.as_ref().map(|r| per_token_mse(&forecast.residual, r));
            let output = &x + &forecast.residual;
            StepRecord {
                step: u,
                was_full: false,
                steps_since_full: k,
                output,
                selection: forecast.selection,
                candidate_losses: forecast.candidate_losses,
                residual_error,
                token_errors,
            }
        };
        x = record.output.clone();
        steps.push(record);
    }

    Ok(RunTrace {
        strategy: strategy.name().to_string(),
        family: strategy.family().to_vec(),
        schedule,
        full_count,
        skip_count: schedule.total_steps - full_count,
        degenerate_token_count: degenerate,
        final_state: x,
        steps,
    })
}

/// One line of a strategy comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub final_state_mse: f64,
    pub final_relative_error: f64,
    pub mean_step_residual_error: f64,
    pub total_residual_error: f64,
    pub full_count: usize,
}

/// Runs every config and measures it against an exact run of the same schedule.
pub fn compare_strategies<D: Denoiser + Sync + ?Sized>(
    denoiser: &D,
    x_init: &FeatureTensor,
    cfgs: &[EngineConfig],
) -> Result<Vec<ComparisonRow>> {
    let first = cfgs
        .first()
        .ok_or_else(|| Error::ConfigMismatch("no strategies to compare".into()))?;
    if let Some(bad) = cfgs
        .iter()
        .find(|c| c.schedule.total_steps != first.schedule.total_steps || c.seed != first.seed)
    {
        return Err(Error::ConfigMismatch(format!(
            "{} does not share steps/seed with {}",
            bad.label(),
            first.label()
        )));
    }
    let mut exact_cfg = first.clone();
    exact_cfg.strategy = "exact".into();
    let reference = run(denoiser, x_init, &exact_cfg)?;
    cfgs.par_iter()
        .map(|cfg| {
            let trace = run(denoiser, x_init, cfg)?;
            Ok(ComparisonRow {
                strategy: cfg.label(),
                final_state_mse: mse(&reference.final_state, &trace.final_state)?,
                final_relative_error: relative_error(&reference.final_state, &trace.final_state)?,
                mean_step_residual_error: trace.mean_step_residual_error(),
                total_residual_error: trace.total_residual_error(),
                full_count: trace.full_count,
            })
        })
        .collect()
}
