//! Synthetic denoisers with known per-token residual trajectories.
//!
//! A run advances `x ← x + r(u)`, where `r(u)` is read from a
//! [`TrajectorySpec`] indexed by step `u` in sampling order. Probes are derived
//! from `x` the same way a first transformer layer would (norm then modulate),
//! or taken from the true residual for oracle checks.

use std::f64::consts::TAU;

use ndarray::{Array1, Array2, Array3, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::Denoiser;
use crate::error::{Error, Result};
use crate::selector::{LossMatrix, ProxyMetric, SelectionMap};
use crate::tensor::{ensure_same_shape, FeatureTensor};

/// Residual trajectory of a single `(batch, token, channel)` element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// `Σ c_j · uʲ`
    Polynomial { coefficients: Vec<f64> },
    /// `A · e^(−decay·u/T) · sin(2π·f·u/T + φ)`; `frequency` is in cycles per run.
    Sinusoid {
        amplitude: f64,
        frequency: f64,
        phase: f64,
        #[serde(default)]
        decay: f64,
    },
    PiecewiseJump {
        jump_step: usize,
        before: f64,
        after: f64,
    },
    Sum(Vec<Trajectory>),
}

impl Trajectory {
    pub fn constant(c: f64) -> Self {
        Trajectory::Polynomial {
            coefficients: vec![c],
        }
    }

    pub fn value(&self, u: usize, total_steps: usize) -> f64 {
        let uf = u as f64;
        match self {
            Trajectory::Polynomial { coefficients } => {
                coefficients.iter().rev().fold(0.0, |acc, c| acc * uf + c)
            }
            Trajectory::Sinusoid {
                amplitude,
                frequency,
                phase,
                decay,
            } => {
                let s = uf / total_steps as f64;
                amplitude * (-decay * s).exp() * (TAU * frequency * s + phase).sin()
            }
            Trajectory::PiecewiseJump {
                jump_step,
                before,
                after,
            } => {
                if u < *jump_step {
                    *before
                } else {
                    *after
                }
            }
            Trajectory::Sum(parts) => parts.iter().map(|p| p.value(u, total_steps)).sum(),
        }
    }

    fn validate(&self, total_steps: usize) -> Result<()> {
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("non-finite {what}")))
            }
        };
        match self {
            Trajectory::Polynomial { coefficients } => {
                if coefficients.is_empty() {
                    return Err(Error::InvalidConfig("polynomial needs coefficients".into()));
                }
                coefficients.iter().try_for_each(|&c| finite(c, "coefficient"))
            }
            Trajectory::Sinusoid {
                amplitude,
                frequency,
                phase,
                decay,
            } => {
                finite(*amplitude, "amplitude")?;
                finite(*frequency, "frequency")?;
                finite(*phase, "phase")?;
                finite(*decay, "decay")
            }
            Trajectory::PiecewiseJump {
                jump_step,
                before,
                after,
            } => {
                if *jump_step > total_steps {
                    return Err(Error::InvalidConfig(format!(
                        "jump step {jump_step} beyond {total_steps} steps"
                    )));
                }
                finite(*before, "jump value")?;
                finite(*after, "jump value")
            }
            Trajectory::Sum(parts) => parts.iter().try_for_each(|p| p.validate(total_steps)),
        }
    }
}

/// Per-element trajectories for a `batch × tokens × channels` run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    total_steps: usize,
    shape: (usize, usize, usize),
    entries: Vec<Trajectory>,
}

impl TrajectorySpec {
    pub fn from_fn(
        total_steps: usize,
        shape: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> Trajectory,
    ) -> Result<Self> {
        let (b, n, c) = shape;
        let mut entries = Vec::with_capacity(b * n * c);
        for bi in 0..b {
            for ni in 0..n {
                for ci in 0..c {
                    entries.push(f(bi, ni, ci));
                }
            }
        }
        let spec = Self {
            total_steps,
            shape,
            entries,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn broadcast(total_steps: usize, shape: (usize, usize, usize), t: Trajectory) -> Result<Self> {
        Self::from_fn(total_steps, shape, |_, _, _| t.clone())
    }

    fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("trajectory needs at least one step".into()));
        }
        let (b, n, c) = self.shape;
        if b == 0 || n == 0 || c == 0 {
            return Err(Error::InvalidConfig(format!("degenerate shape {:?}", self.shape)));
        }
        self.entries.iter().try_for_each(|t| t.validate(self.total_steps))
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn entry(&self, b: usize, n: usize, c: usize) -> &Trajectory {
        let (_, tn, tc) = self.shape;
        &self.entries[(b * tn + n) * tc + c]
    }

    /// Ground-truth residual tensor at step `u`.
    pub fn residual_truth(&self, u: usize) -> Result<FeatureTensor> {
        if u >= self.total_steps {
            return Err(Error::OutOfRange {
                step: u,
                total: self.total_steps,
            });
        }
        let values = self.entries.iter().map(|t| t.value(u, self.total_steps)).collect();
        Ok(Array3::from_shape_vec(self.shape, values).expect("entry count matches shape"))
    }
}

/// Per-token layer normalization over channels (population variance).
pub fn layer_norm(x: &FeatureTensor, eps: f64) -> FeatureTensor {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(2)) {
        let n = lane.len() as f64;
        let mean = lane.sum() / n;
        let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        lane.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// `scale ⊙ xn + shift`, broadcasting channel vectors over batch and tokens.
pub fn modulate(xn: &FeatureTensor, shift: &Array1<f64>, scale: &Array1<f64>) -> Result<FeatureTensor> {
    let c = xn.len_of(Axis(2));
    for v in [shift, scale] {
        if v.len() != c {
            return Err(Error::ShapeMismatch {
                expected: vec![c],
                actual: vec![v.len()],
            });
        }
    }
    let mut out = xn.clone();
    for mut lane in out.lanes_mut(Axis(2)) {
        Zip::from(&mut lane)
            .and(scale)
            .and(shift)
            .for_each(|v, &g, &s| *v = g * *v + s);
    }
    Ok(out)
}

/// Per-step shift and scale vectors feeding [`modulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationSchedule {
    /// `steps × channels`
    pub shift: Array2<f64>,
    /// `steps × channels`
    pub scale: Array2<f64>,
    pub norm_epsilon: f64,
}

impl ModulationSchedule {
    pub fn identity(total_steps: usize, channels: usize) -> Self {
        Self {
            shift: Array2::zeros((total_steps, channels)),
            scale: Array2::ones((total_steps, channels)),
            norm_epsilon: 1e-6,
        }
    }

    /// Slowly drifting, channel-dependent shift and scale.
    pub fn drifting(total_steps: usize, channels: usize) -> Self {
        let t = total_steps as f64;
        Self {
            shift: Array2::from_shape_fn((total_steps, channels), |(u, c)| {
                0.1 * (TAU * u as f64 / t + c as f64).sin()
            }),
            scale: Array2::from_shape_fn((total_steps, channels), |(u, c)| {
                1.0 + 0.2 * (TAU * u as f64 / t + 0.5 * c as f64).cos()
            }),
            norm_epsilon: 1e-6,
        }
    }

    fn validate(&self, total_steps: usize, channels: usize) -> Result<()> {
        if self.shift.dim() != (total_steps, channels) || self.scale.dim() != (total_steps, channels) {
            return Err(Error::ShapeMismatch {
                expected: vec![total_steps, channels],
                actual: self.shift.shape().to_vec(),
            });
        }
        if self.norm_epsilon.is_nan() || self.norm_epsilon <= 0.0 {
            return Err(Error::InvalidConfig("norm epsilon must be positive".into()));
        }
        if self.shift.iter().chain(self.scale.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite modulation".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// `modulate(layer_norm(x), s(u), g(u))`
    Modulated,
    /// `x` itself
    RawInput,
    /// The exact residual `full_eval(x, u) − x`.
    TruthResidual,
}

impl ProbeMode {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeMode::Modulated => "modulated",
            ProbeMode::RawInput => "raw_input",
            ProbeMode::TruthResidual => "truth_residual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "modulated" => Some(ProbeMode::Modulated),
            "raw_input" | "raw" | "input" => Some(ProbeMode::RawInput),
            "truth_residual" | "truth" | "oracle" => Some(ProbeMode::TruthResidual),
            _ => None,
        }
    }
}

/// Denoiser backed by a [`TrajectorySpec`].
#[derive(Debug, Clone)]
pub struct SimulatedDenoiser {
    residuals: Vec<FeatureTensor>,
    modulation: ModulationSchedule,
    mode: ProbeMode,
}

pub fn make_denoiser(
    spec: &TrajectorySpec,
    modulation: ModulationSchedule,
    mode: ProbeMode,
) -> Result<SimulatedDenoiser> {
    modulation.validate(spec.total_steps(), spec.shape().2)?;
    let residuals = (0..spec.total_steps())
        .map(|u| spec.residual_truth(u))
        .collect::<Result<_>>()?;
    Ok(SimulatedDenoiser {
        residuals,
        modulation,
        mode,
    })
}

impl SimulatedDenoiser {
    pub fn probe_mode(&self) -> ProbeMode {
        self.mode
    }

    pub fn residual(&self, step: usize) -> &FeatureTensor {
        &self.residuals[step]
    }

    fn exact_residual(&self, x: &FeatureTensor, step: usize) -> FeatureTensor {
        // same arithmetic as `full_eval(x) − x`, so cached and probed
        // residuals agree bitwise
        &(x + &self.residuals[step]) - x
    }
}

impl Denoiser for SimulatedDenoiser {
    fn full_eval(&self, x: &FeatureTensor, step: usize) -> FeatureTensor {
        x + &self.residuals[step]
    }

    fn probe_eval(&self, x: &FeatureTensor, step: usize) -> FeatureTensor {
        match self.mode {
            ProbeMode::Modulated => {
                let xn = layer_norm(x, self.modulation.norm_epsilon);
                modulate(
                    &xn,
                    &self.modulation.shift.row(step).to_owned(),
                    &self.modulation.scale.row(step).to_owned(),
                )
                .expect("modulation validated against channel count")
            }
            ProbeMode::RawInput => x.clone(),
            ProbeMode::TruthResidual => self.exact_residual(x, step),
        }
    }

    fn reference_residual(&self, x: &FeatureTensor, step: usize) -> Option<FeatureTensor> {
        Some(self.exact_residual(x, step))
    }
}

/// Brute-force per-token argmin of `metric(candidate, truth)`, ties to the
/// lowest index, non-finite distances excluded.
pub fn oracle_best(
    candidates: &[FeatureTensor],
    truth: &FeatureTensor,
    metric: &ProxyMetric,
) -> Result<SelectionMap> {
    if candidates.is_empty() {
        return Err(Error::NoActivePredictor);
    }
    for c in candidates {
        ensure_same_shape(truth, c)?;
    }
    let (b, n, _) = truth.dim();
    let mut chosen = Array2::zeros((b, n));
    let mut chosen_loss = Array2::from_elem((b, n), f64::NAN);
    let mut degenerate = 0;
    for bi in 0..b {
        for ni in 0..n {
            let target = truth.slice(ndarray::s![bi, ni, ..]);
            let mut best = f64::INFINITY;
            let mut best_idx = None;
            for (p, cand) in candidates.iter().enumerate() {
                let d = metric.distance(cand.slice(ndarray::s![bi, ni, ..]), target);
                if d.is_finite() && d < best {
                    best = d;
                    best_idx = Some(p);
                }
            }
            match best_idx {
                Some(p) => {
                    chosen[[bi, ni]] = p;
                    chosen_loss[[bi, ni]] = best;
                }
                None => degenerate += 1,
            }
        }
    }
    Ok(SelectionMap {
        chosen,
        chosen_loss,
        degenerate_tokens: degenerate,
    })
}

/// True per-candidate errors as a loss matrix, for diagnostics.
pub fn true_losses(
    candidates: &[FeatureTensor],
    truth: &FeatureTensor,
    metric: &ProxyMetric,
) -> Result<LossMatrix> {
    let rows = candidates
        .iter()
        .map(|c| crate::selector::proxy_loss(c, truth, metric))
        .collect::<Result<Vec<_>>>()?;
    LossMatrix::from_rows(&rows)
}

/// Token behaviour classes used by the mixed scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Constant,
    Linear,
    Sinusoid,
    Jump,
}

impl TokenClass {
    pub const ALL: [TokenClass; 4] = [
        TokenClass::Constant,
        TokenClass::Linear,
        TokenClass::Sinusoid,
        TokenClass::Jump,
    ];
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Equal shares of constant, linear, sinusoidal and jump tokens, shuffled
/// over `(batch, token)` with per-channel parameters. Returns the trajectories and
/// the class of every token.
pub fn heterogeneous_suite(
    total_steps: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<(TrajectorySpec, Array2<TokenClass>)> {
    let (b, n, _) = shape;
    let mut rng = rng_for(seed, 1);
    let mut order: Vec<usize> = (0..b * n).collect();
    order.shuffle(&mut rng);
    let mut classes = Array2::from_elem((b, n), TokenClass::Constant);
    for (rank, &flat) in order.iter().enumerate() {
        classes[[flat / n, flat % n]] = TokenClass::ALL[rank * 4 / (b * n)];
    }
    let t = total_steps as f64;
    let mut jump_steps = Array2::zeros((b, n));
    for v in jump_steps.iter_mut() {
        let lo = total_steps / 4;
        let hi = (3 * total_steps / 4).max(lo + 1);
        *v = rng.random_range(lo..hi);
    }
    let spec = TrajectorySpec::from_fn(total_steps, shape, |bi, ni, _| match classes[[bi, ni]] {
        TokenClass::Constant => Trajectory::constant(rng.random_range(-1.0..1.0)),
        TokenClass::Linear => Trajectory::Polynomial {
            coefficients: vec![rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0) / t],
        },
        TokenClass::Sinusoid => Trajectory::Sinusoid {
            amplitude: rng.random_range(0.5..1.5),
            frequency: rng.random_range(1.0..3.0),
            phase: rng.random_range(0.0..TAU),
            decay: 0.0,
        },
        TokenClass::Jump => Trajectory::PiecewiseJump {
            jump_step: jump_steps[[bi, ni]],
            before: rng.random_range(-1.0..1.0),
            after: rng.random_range(-1.0..1.0),
        },
    })?;
    Ok((spec, classes))
}

/// Smooth quadratic trend plus a fast oscillation whose amplitude decays over
/// the run: rough early, smooth late.
pub fn rough_early_smooth_late(
    total_steps: usize,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<TrajectorySpec> {
    let mut rng = rng_for(seed, 2);
    let t = total_steps as f64;
    TrajectorySpec::from_fn(total_steps, shape, |_, _, _| {
        Trajectory::Sum(vec![
            Trajectory::Polynomial {
                coefficients: vec![
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-3.0..3.0) / t,
                    rng.random_range(-3.0..3.0) / (t * t),
                ],
            },
            Trajectory::Sinusoid {
                amplitude: rng.random_range(0.5..1.0),
                frequency: rng.random_range(0.15..0.25) * t,
                phase: rng.random_range(0.0..TAU),
                decay: 8.0,
            },
        ])
    })
}

/// Affine residuals on every element.
pub fn affine_suite(total_steps: usize, shape: (usize, usize, usize), seed: u64) -> Result<TrajectorySpec> {
    let mut rng = rng_for(seed, 3);
    let t = total_steps as f64;
    TrajectorySpec::from_fn(total_steps, shape, |_, _, _| Trajectory::Polynomial {
        coefficients: vec![rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0) / t],
    })
}

/// Smooth quadratic residuals on every element.
pub fn quadratic_suite(total_steps: usize, shape: (usize, usize, usize), seed: u64) -> Result<TrajectorySpec> {
    let mut rng = rng_for(seed, 4);
    let t = total_steps as f64;
    TrajectorySpec::from_fn(total_steps, shape, |_, _, _| Trajectory::Polynomial {
        coefficients: vec![
            rng.random_range(-1.0..1.0),
            rng.random_range(-2.0..2.0) / t,
            rng.random_range(2.0..4.0) / (t * t),
        ],
    })
}

/// Standard-normal initial state.
pub fn initial_state(shape: (usize, usize, usize), seed: u64) -> FeatureTensor {
    let mut rng = rng_for(seed, 0);
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}
