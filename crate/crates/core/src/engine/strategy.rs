//! Built-in step strategies.

use ndarray::{Array2, Zip};

use crate::cache::{CacheState, Schedule};
use crate::error::{Error, Result};
use crate::predictor::{build_family, predict, required_capacity, PredictorSpec};
use crate::selector::{assemble_residual, proxy_loss, select, LossMatrix, ProxyMetric, SelectionMap};
use crate::tensor::FeatureTensor;

/// What a strategy sees at each step.
pub struct StepContext<'a> {
    pub step: usize,
    pub schedule: &'a Schedule,
    /// Probe computed from the current state.
    pub probe: &'a FeatureTensor,
    pub state: &'a FeatureTensor,
    pub cache: &'a CacheState,
}

impl StepContext<'_> {
    /// Steps since the last full evaluation.
    pub fn k(&self) -> usize {
        self.cache.steps_since_full(self.step).unwrap_or(0)
    }
}

/// Forecast produced on a skipped step.
pub struct Forecast {
    pub residual: FeatureTensor,
    /// Per-token choice, indexed into [`Strategy::family`].
    pub selection: Option<SelectionMap>,
    /// Mean proxy loss per family member; `None` for inactive members.
    pub candidate_losses: Vec<Option<f64>>,
}

impl Forecast {
    fn plain(residual: FeatureTensor) -> Self {
        Self {
            residual,
            selection: None,
            candidate_losses: Vec::new(),
        }
    }
}

/// One way of deciding full vs. skipped steps and forecasting the residual
/// on skipped ones.
pub trait Strategy: Send {
    fn name(&self) -> &str;

    /// Whether to run the full denoiser at this step.
    fn wants_full(&mut self, ctx: &StepContext) -> Result<bool> {
        ctx.schedule.is_full_step(ctx.step)
    }

    /// Residual forecast for a skipped step.
    fn forecast(&mut self, ctx: &StepContext) -> Result<Forecast>;

    /// Diagnostic candidate losses on a full step, computed before the new
    /// snapshot is cached. Never acted upon.
    fn full_step_losses(&mut self, _ctx: &StepContext) -> Result<Vec<Option<f64>>> {
        Ok(Vec::new())
    }

    /// Candidate predictors, for strategies that select among them.
    fn family(&self) -> &[PredictorSpec] {
        &[]
    }

    /// Snapshots the caches must retain.
    fn required_history(&self) -> usize {
        1
    }
}

fn newest_residual(cache: &CacheState) -> Result<FeatureTensor> {
    cache
        .residual_stack
        .newest()
        .map(|s| s.value.clone())
        .ok_or(Error::InsufficientSnapshots { needed: 1, have: 0 })
}

/// Runs the full model on every step.
#[derive(Debug, Default)]
pub struct ExactStrategy;

impl Strategy for ExactStrategy {
    fn name(&self) -> &str {
        "exact"
    }

    fn wants_full(&mut self, _ctx: &StepContext) -> Result<bool> {
        Ok(true)
    }

    fn forecast(&mut self, _ctx: &StepContext) -> Result<Forecast> {
        unreachable!("exact strategy never skips")
    }
}

/// Copies the newest cached residual forward.
#[derive(Debug, Default)]
pub struct ReuseStrategy;

impl Strategy for ReuseStrategy {
    fn name(&self) -> &str {
        "reuse"
    }

    fn forecast(&mut self, ctx: &StepContext) -> Result<Forecast> {
        newest_residual(ctx.cache).map(Forecast::plain)
    }
}

/// One predictor applied to every token. Falls back to reuse while the
/// predictor is inactive or lacks history.
#[derive(Debug)]
pub struct GlobalStrategy {
    spec: PredictorSpec,
}

impl GlobalStrategy {
    pub fn new(spec: PredictorSpec) -> Self {
        Self { spec }
    }
}

impl Strategy for GlobalStrategy {
    fn name(&self) -> &str {
        "global"
    }

    fn forecast(&mut self, ctx: &StepContext) -> Result<Forecast> {
        let k = ctx.k();
        let stack = &ctx.cache.residual_stack;
        if !self.spec.is_active(stack, k) {
            return newest_residual(ctx.cache).map(Forecast::plain);
        }
        let n = ctx.schedule.window;
        let r = predict(&self.spec, stack, k, n)?.expect("active spec forecasts");
        Ok(Forecast::plain(r))
    }

    fn required_history(&self) -> usize {
        self.spec.required_snapshots()
    }
}

/// Skips while the accumulated relative L1 change of the probe stays below a
/// threshold; reuses the cached residual on skipped steps.
#[derive(Debug)]
pub struct ThresholdStrategy {
    threshold: f64,
    accumulated: f64,
    previous_probe: Option<FeatureTensor>,
}

impl ThresholdStrategy {
    pub fn new(threshold: f64) -> Result<Self> {
        if threshold.is_nan() || threshold < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "threshold must be ≥ 0, got {threshold}"
            )));
        }
        Ok(Self {
            threshold,
            accumulated: 0.0,
            previous_probe: None,
        })
    }
}

/// `mean|a − b| / mean|b|`
fn relative_l1(current: &FeatureTensor, previous: &FeatureTensor) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    Zip::from(current).and(previous).for_each(|&a, &b| {
        num += (a - b).abs();
        den += b.abs();
    });
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

impl Strategy for ThresholdStrategy {
    fn name(&self) -> &str {
        "threshold"
    }

    fn wants_full(&mut self, ctx: &StepContext) -> Result<bool> {
        let full = if ctx.step < ctx.schedule.warmup {
            true
        } else {
            let prev = self.previous_probe.as_ref().expect("warm-up stored a probe");
            self.accumulated += relative_l1(ctx.probe, prev);
            self.accumulated >= self.threshold
        };
        if full {
            self.accumulated = 0.0;
        }
        self.previous_probe = Some(ctx.probe.clone());
        Ok(full)
    }

    fn forecast(&mut self, ctx: &StepContext) -> Result<Forecast> {
        newest_residual(ctx.cache).map(Forecast::plain)
    }
}

/// Probe-then-select: scores every active candidate on the probe cache
/// against the actual probe, then forecasts each token's residual with its
/// argmin candidate.
#[derive(Debug)]
pub struct TapStrategy {
    family: Vec<PredictorSpec>,
    metric: ProxyMetric,
}

struct Scored {
    active: Vec<usize>,
    losses: LossMatrix,
    means: Vec<Option<f64>>,
}

impl TapStrategy {
    pub fn new(family: Vec<PredictorSpec>, metric: ProxyMetric) -> Result<Self> {
        if family.is_empty() {
            return Err(Error::NoActivePredictor);
        }
        metric.validate()?;
        Ok(Self { family, metric })
    }

    pub fn from_config(cfg: &crate::predictor::FamilyConfig, metric: ProxyMetric) -> Result<Self> {
        Self::new(build_family(cfg)?, metric)
    }

    fn score(&self, ctx: &StepContext, k: usize) -> Result<Option<Scored>> {
        let stack = &ctx.cache.probe_stack;
        let active: Vec<usize> = (0..self.family.len())
            .filter(|&i| self.family[i].is_active(stack, k))
            .collect();
        if active.is_empty() {
            return Ok(None);
        }
        let n = ctx.schedule.window;
        let rows = active
            .iter()
            .map(|&i| {
                let h_hat = predict(&self.family[i], stack, k, n)?.expect("active spec forecasts");
                proxy_loss(&h_hat, ctx.probe, &self.metric)
            })
            .collect::<Result<Vec<Array2<f64>>>>()?;
        let mut means = vec![None; self.family.len()];
        for (row, &i) in rows.iter().zip(&active) {
            means[i] = row.mean();
        }
        Ok(Some(Scored {
            active,
            losses: LossMatrix::from_rows(&rows)?,
            means,
        }))
    }
}

impl Strategy for TapStrategy {
    fn name(&self) -> &str {
        "tap"
    }

    fn forecast(&mut self, ctx: &StepContext) -> Result<Forecast> {
        let k = ctx.k();
        let scored = self.score(ctx, k)?.ok_or(Error::NoActivePredictor)?;
        let selection = select(&scored.losses)?;
        let n = ctx.schedule.window;
        let candidates = scored
            .active
            .iter()
            .map(|&i| {
                predict(&self.family[i], &ctx.cache.residual_stack, k, n)
                    .map(|r| r.expect("active spec forecasts"))
            })
            .collect::<Result<Vec<_>>>()?;
        let residual = assemble_residual(&selection, &candidates)?;
        Ok(Forecast {
            residual,
            selection: Some(selection.remap(&scored.active)),
            candidate_losses: scored.means,
        })
    }

    fn full_step_losses(&mut self, ctx: &StepContext) -> Result<Vec<Option<f64>>> {
        let k = ctx.k();
        if k == 0 {
            return Ok(vec![None; self.family.len()]);
        }
        Ok(self
            .score(ctx, k)?
            .map(|s| s.means)
            .unwrap_or_else(|| vec![None; self.family.len()]))
    }

    fn family(&self) -> &[PredictorSpec] {
        &self.family
    }

    fn required_history(&self) -> usize {
        required_capacity(&self.family)
    }
}
