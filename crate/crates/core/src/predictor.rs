//! Candidate forecasters: Taylor expansions over cached differences and
//! least-squares fits in the probabilists' Hermite basis.

use std::fmt;

use nalgebra::DMatrix;
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::cache::{factorial, DifferenceStack, MAX_ORDER};
use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, FeatureTensor};

/// One candidate predictor.
///
/// Taylor specs store a horizon *offset* `o`; the horizon used at elapsed
/// distance `k` is `k_p = k − o`, and the candidate is inactive while `k < o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorSpec {
    Taylor { order: usize, horizon_offset: usize },
    Hermite { order: usize, window: usize },
}

impl PredictorSpec {
    pub fn order(&self) -> usize {
        match *self {
            PredictorSpec::Taylor { order, .. } | PredictorSpec::Hermite { order, .. } => order,
        }
    }

    pub fn is_hermite(&self) -> bool {
        matches!(self, PredictorSpec::Hermite { .. })
    }

    /// Horizon actually plugged into the forecast at elapsed distance `k`,
    /// or `None` when the candidate is inactive.
    pub fn horizon(&self, k: usize) -> Option<usize> {
        match *self {
            PredictorSpec::Taylor { horizon_offset, .. } => k.checked_sub(horizon_offset),
            PredictorSpec::Hermite { .. } => Some(k),
        }
    }

    /// Snapshots the candidate needs before it can forecast.
    pub fn required_snapshots(&self) -> usize {
        match *self {
            PredictorSpec::Taylor { order, .. } => order + 1,
            PredictorSpec::Hermite { window, .. } => window,
        }
    }

    /// Whether the candidate can produce a forecast at distance `k` from `stack`.
    pub fn is_active(&self, stack: &DifferenceStack, k: usize) -> bool {
        self.horizon(k).is_some() && stack.len() >= self.required_snapshots()
    }
}

impl fmt::Display for PredictorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictorSpec::Taylor {
                order,
                horizon_offset,
            } => write!(f, "taylor(m={order},o={horizon_offset})"),
            PredictorSpec::Hermite { order, window } => write!(f, "hermite(m={order},K={window})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub order_low: usize,
    pub order_high: usize,
    pub lambda: usize,
    pub delta: usize,
    pub include_hermite: bool,
    pub hermite_order: usize,
    pub hermite_window: usize,
}

impl Default for FamilyConfig {
    /// Orders 0..=2, offsets 0..=4 in unit steps: 15 Taylor candidates.
    fn default() -> Self {
        Self {
            order_low: 0,
            order_high: 2,
            lambda: 4,
            delta: 1,
            include_hermite: false,
            hermite_order: 2,
            hermite_window: 3,
        }
    }
}

impl FamilyConfig {
    /// Single Taylor candidate of the given order at offset 0.
    pub fn singleton(order: usize) -> Self {
        Self {
            order_low: order,
            order_high: order,
            lambda: 0,
            delta: 1,
            include_hermite: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order_low > self.order_high {
            return Err(Error::InvalidConfig(format!(
                "order_low {} exceeds order_high {}",
                self.order_low, self.order_high
            )));
        }
        if self.order_high > MAX_ORDER {
            return Err(Error::InvalidConfig(format!(
                "order_high {} exceeds {MAX_ORDER}",
                self.order_high
            )));
        }
        if self.delta == 0 {
            return Err(Error::InvalidConfig("delta must be ≥ 1".into()));
        }
        if self.delta > self.lambda + 1 {
            return Err(Error::InvalidConfig(format!(
                "delta {} exceeds lambda + 1 = {}, leaving no offsets",
                self.delta,
                self.lambda + 1
            )));
        }
        if self.include_hermite {
            if self.hermite_order > MAX_ORDER {
                return Err(Error::InvalidConfig(format!(
                    "hermite order {} exceeds {MAX_ORDER}",
                    self.hermite_order
                )));
            }
            if self.hermite_window < self.hermite_order + 1 {
                return Err(Error::InvalidConfig(format!(
                    "hermite window {} must be at least order + 1 = {}",
                    self.hermite_window,
                    self.hermite_order + 1
                )));
            }
        }
        Ok(())
    }

    /// Number of horizon offsets: `⌊(λ+1)/δ⌋`.
    pub fn offset_count(&self) -> usize {
        (self.lambda + 1) / self.delta
    }
}

/// Builds the candidate set ordered by ascending offset, then ascending order,
/// with the Hermite candidate (if any) last.
///
/// Offsets are `0, δ, …, (⌊(λ+1)/δ⌋ − 1)·δ`, giving `⌊(λ+1)/δ⌋ × M` Taylor
/// candidates.
pub fn build_family(cfg: &FamilyConfig) -> Result<Vec<PredictorSpec>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for j in 0..cfg.offset_count() {
        for order in cfg.order_low..=cfg.order_high {
            out.push(PredictorSpec::Taylor {
                order,
                horizon_offset: j * cfg.delta,
            });
        }
    }
    if cfg.include_hermite {
        out.push(PredictorSpec::Hermite {
            order: cfg.hermite_order,
            window: cfg.hermite_window,
        });
    }
    Ok(out)
}

/// Stack capacity needed to serve every spec in `family`.
pub fn required_capacity(family: &[PredictorSpec]) -> usize {
    family
        .iter()
        .map(PredictorSpec::required_snapshots)
        .max()
        .unwrap_or(1)
}

/// `Σ_{i=0..m} Δⁱ · (−k_p)ⁱ / (i! · Nⁱ)` evaluated elementwise.
///
/// The differences are rescaled to spacing `n` (see
/// [`DifferenceStack::scaled_differences`]), which is the verbatim sum when
/// the cached snapshots are `n` steps apart.
pub fn taylor_predict(
    stack: &DifferenceStack,
    order: usize,
    horizon: usize,
    n: usize,
) -> Result<FeatureTensor> {
    if n == 0 {
        return Err(Error::InvalidConfig("normalization N must be ≥ 1".into()));
    }
    if stack.len() < order + 1 {
        return Err(Error::InsufficientSnapshots {
            needed: order + 1,
            have: stack.len(),
        });
    }
    if order == 0 || horizon == 0 {
        return Ok(stack.newest().expect("non-empty").value.clone());
    }
    let diffs = stack.scaled_differences(order, n)?;
    let mut out = diffs[0].clone();
    let ratio = -(horizon as f64) / n as f64;
    for (i, d) in diffs.iter().enumerate().skip(1) {
        let w = ratio.powi(i as i32) / factorial(i)? as f64;
        out.scaled_add(w, d);
    }
    Ok(out)
}

/// `He₀(t)..He_m(t)` via `He_{k+1} = t·He_k − k·He_{k−1}`.
pub fn hermite_basis(order: usize, t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(order + 1);
    out.push(1.0);
    if order >= 1 {
        out.push(t);
    }
    for k in 1..order {
        let next = t * out[k] - k as f64 * out[k - 1];
        out.push(next);
    }
    out
}

/// Least-squares Hermite coefficients over a window of cached steps.
#[derive(Debug, Clone)]
pub struct HermiteFit {
    /// Shape `(order + 1) × batch × tokens × channels`.
    pub coefficients: Array4<f64>,
    pub oldest_step: usize,
    pub newest_step: usize,
}

impl HermiteFit {
    /// Affine map with the oldest fitted step at −1 and the newest at +1.
    pub fn normalized_time(&self, step: f64) -> f64 {
        normalize(step, self.oldest_step as f64, self.newest_step as f64)
    }

    pub fn predict_at_step(&self, step: f64) -> FeatureTensor {
        hermite_predict(&self.coefficients, self.normalized_time(step))
    }
}

fn normalize(step: f64, oldest: f64, newest: f64) -> f64 {
    -1.0 + 2.0 * (step - oldest) / (newest - oldest)
}

/// Fits `Σ_k c_k He_k(t)` to the `window` most recent snapshots (given
/// oldest → newest), independently for every tensor element.
pub fn hermite_fit(
    snapshots: &[(usize, &FeatureTensor)],
    order: usize,
    window: usize,
) -> Result<HermiteFit> {
    if window < order + 1 {
        return Err(Error::InsufficientSnapshots {
            needed: order + 1,
            have: window,
        });
    }
    if snapshots.len() < window {
        return Err(Error::InsufficientSnapshots {
            needed: window,
            have: snapshots.len(),
        });
    }
    let recent = &snapshots[snapshots.len() - window..];
    let oldest = recent[0].0;
    let newest = recent[window - 1].0;
    if newest <= oldest {
        return Err(Error::SingularSystem(format!(
            "cannot normalize steps {oldest}..{newest}"
        )));
    }
    for (_, v) in recent {
        ensure_same_shape(recent[0].1, v)?;
    }

    let basis = order + 1;
    let design = DMatrix::from_fn(window, basis, |j, k| {
        hermite_basis(order, normalize(recent[j].0 as f64, oldest as f64, newest as f64))[k]
    });
    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if min_sv.is_nan() || min_sv <= 1e-12 * max_sv {
        return Err(Error::SingularSystem(format!(
            "design matrix condition {max_sv:e}/{min_sv:e}"
        )));
    }
    let pinv = svd
        .pseudo_inverse(0.0)
        .map_err(|e| Error::SingularSystem(e.to_string()))?;

    let (b, n, c) = recent[0].1.dim();
    let mut coefficients = Array4::zeros((basis, b, n, c));
    for k in 0..basis {
        let mut slot = coefficients.index_axis_mut(Axis(0), k);
        for (j, (_, value)) in recent.iter().enumerate() {
            slot.scaled_add(pinv[(k, j)], *value);
        }
    }
    Ok(HermiteFit {
        coefficients,
        oldest_step: oldest,
        newest_step: newest,
    })
}

/// `Σ_k c_k · He_k(t)`; `t` may lie outside `[−1, 1]`.
pub fn hermite_predict(coefficients: &Array4<f64>, t: f64) -> FeatureTensor {
    let order = coefficients.len_of(Axis(0)) - 1;
    let he = hermite_basis(order, t);
    let (_, b, n, c) = coefficients.dim();
    let mut out = Array3::zeros((b, n, c));
    for (k, w) in he.iter().enumerate() {
        out.scaled_add(*w, &coefficients.index_axis(Axis(0), k));
    }
    out
}

/// Forecast for `spec` at `k` steps past the newest snapshot, or `None` when
/// the candidate is inactive at this distance.
pub fn predict(
    spec: &PredictorSpec,
    stack: &DifferenceStack,
    k: usize,
    n: usize,
) -> Result<Option<FeatureTensor>> {
    match *spec {
        PredictorSpec::Taylor { order, .. } => match spec.horizon(k) {
            Some(kp) => taylor_predict(stack, order, kp, n).map(Some),
            None => Ok(None),
        },
        PredictorSpec::Hermite { order, window } => {
            let snaps: Vec<(usize, &FeatureTensor)> =
                stack.snapshots().map(|s| (s.step_index, &s.value)).collect();
            let fit = hermite_fit(&snaps, order, window)?;
            Ok(Some(fit.predict_at_step((fit.newest_step + k) as f64)))
        }
    }
}
