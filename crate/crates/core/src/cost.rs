//! Analytic FLOPs, memory and schedule accounting.

use serde::{Deserialize, Serialize};

use crate::cache::Schedule;
use crate::error::{Error, Result};

/// Transformer dimensions relevant to cost estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerDims {
    pub layers: u64,
    pub tokens: u64,
    pub channels: u64,
    pub params: u64,
    pub bytes_per_element: u64,
    pub cached_tensors: u64,
    pub activation_factor: f64,
    pub batch: u64,
}

impl Default for TransformerDims {
    fn default() -> Self {
        Self {
            layers: 1,
            tokens: 1,
            channels: 1,
            params: 0,
            bytes_per_element: 2,
            cached_tensors: 2,
            activation_factor: 0.0,
            batch: 1,
        }
    }
}

impl TransformerDims {
    /// Checks element width and the non-negative activation factor. Zero
    /// sizes are accepted as degenerate inputs.
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bytes_per_element, 1 | 2 | 4 | 8) {
            return Err(Error::InvalidConfig(format!(
                "bytes_per_element must be 1, 2, 4 or 8, got {}",
                self.bytes_per_element
            )));
        }
        if !(self.activation_factor.is_finite() && self.activation_factor >= 0.0) {
            return Err(Error::InvalidConfig("activation_factor must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `L (24 Nx D^2 + 4 Nx^2 D)`.
pub fn flops_full(d: &TransformerDims) -> f64 {
    let (n, c) = (d.tokens as f64, d.channels as f64);
    d.layers as f64 * (24.0 * n * c * c + 4.0 * n * n * c)
}

/// One layer's projection term, without attention.
pub fn flops_probe(d: &TransformerDims) -> f64 {
    let (n, c) = (d.tokens as f64, d.channels as f64);
    24.0 * n * c * c
}

/// Peak HBM in bytes: weights plus cached tensors and activations.
pub fn hbm_peak(d: &TransformerDims) -> f64 {
    let b = d.bytes_per_element as f64;
    d.params as f64 * b
        + (d.cached_tensors as f64 + d.activation_factor)
            * d.batch as f64
            * d.tokens as f64
            * d.channels as f64
            * b
}

/// `T / (full + probe_fraction * skip)` for the warm-up plus window schedule.
pub fn schedule_speedup(total_steps: usize, window: usize, warmup: usize, probe_fraction: f64) -> Result<f64> {
    let schedule = Schedule::new(total_steps, window, warmup)
        .map_err(|e| Error::InvalidSchedule(e.to_string()))?;
    if !(0.0..=1.0).contains(&probe_fraction) {
        return Err(Error::InvalidSchedule(format!(
            "probe_fraction must lie in [0, 1], got {probe_fraction}"
        )));
    }
    let full = schedule.full_count() as f64;
    let skip = schedule.skip_count() as f64;
    Ok(total_steps as f64 / (full + probe_fraction * skip))
}
