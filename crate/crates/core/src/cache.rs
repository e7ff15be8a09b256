//! Bounded snapshot histories, finite differences and the full/skip schedule.
//!
//! Step indices are in sampling order (`0` is the first denoising step).
//! Differences are taken toward older snapshots: `Δ¹ = older − newer`, which
//! is the sign under which the forecast sum's `(−k_p)ⁱ` factor extrapolates
//! forward in sampling order.

use std::collections::VecDeque;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, FeatureTensor};

/// Largest expansion order whose factorial is computed.
pub const MAX_ORDER: usize = 12;

/// `i!` in exact integer arithmetic, rejecting orders above [`MAX_ORDER`].
pub fn factorial(i: usize) -> Result<u64> {
    if i > MAX_ORDER {
        return Err(Error::InvalidConfig(format!(
            "order {i} exceeds the supported maximum {MAX_ORDER}"
        )));
    }
    Ok((1..=i as u64).product())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step_index: usize,
    pub value: FeatureTensor,
}

/// Ring buffer of full-step snapshots ordered oldest → newest.
#[derive(Debug, Clone)]
pub struct DifferenceStack {
    capacity: usize,
    snapshots: VecDeque<Snapshot>,
}

impl DifferenceStack {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig(
                "difference stack capacity must be at least 1".into(),
            ));
        }
        Ok(Self {
            capacity,
            snapshots: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn newest(&self) -> Option<&Snapshot> {
        self.snapshots.back()
    }

    pub fn snapshots(&self) -> impl DoubleEndedIterator<Item = &Snapshot> + ExactSizeIterator {
        self.snapshots.iter()
    }

    pub fn shape(&self) -> Option<&[usize]> {
        self.snapshots.back().map(|s| s.value.shape())
    }

    /// Steps between the two newest snapshots.
    pub fn spacing(&self) -> Option<usize> {
        let n = self.snapshots.len();
        if n < 2 {
            return None;
        }
        Some(self.snapshots[n - 1].step_index - self.snapshots[n - 2].step_index)
    }

    /// Append a snapshot, evicting the oldest when over capacity.
    pub fn push(&mut self, step_index: usize, value: FeatureTensor) -> Result<()> {
        if let Some(newest) = self.snapshots.back() {
            if step_index <= newest.step_index {
                return Err(Error::NonMonotonicStep {
                    step: step_index,
                    newest: newest.step_index,
                });
            }
            ensure_same_shape(&newest.value, &value)?;
        }
        self.snapshots.push_back(Snapshot { step_index, value });
        while self.snapshots.len() > self.capacity {
            self.snapshots.pop_front();
        }
        Ok(())
    }

    fn require(&self, needed: usize) -> Result<()> {
        if self.snapshots.len() < needed {
            return Err(Error::InsufficientSnapshots {
                needed,
                have: self.snapshots.len(),
            });
        }
        Ok(())
    }

    /// The newest `count` snapshots, newest first.
    pub(crate) fn newest_first(&self, count: usize) -> Result<Vec<&Snapshot>> {
        self.require(count)?;
        Ok(self.snapshots.iter().rev().take(count).collect())
    }

    /// Raw backward differences `Δ⁰..Δᵐ` anchored at the newest snapshot,
    /// ignoring the step indices.
    pub fn differences(&self, max_order: usize) -> Result<Vec<FeatureTensor>> {
        let window = self.newest_first(max_order + 1)?;
        let mut level: Vec<FeatureTensor> = window.iter().map(|s| s.value.clone()).collect();
        let mut out = Vec::with_capacity(max_order + 1);
        out.push(level[0].clone());
        for _ in 0..max_order {
            level = level.windows(2).map(|w| &w[1] - &w[0]).collect();
            out.push(level[0].clone());
        }
        Ok(out)
    }

    /// Differences `Δ⁰..Δᵐ` rescaled to a uniform spacing of `spacing` steps.
    ///
    /// Built from Newton divided differences over the actual step indices, so
    /// `Dᵢ = (−1)ⁱ · i! · spacingⁱ · f[u₀, …, uᵢ]`. When the snapshots really
    /// are `spacing` apart this equals [`Self::differences`]; across the
    /// warm-up boundary (spacing 1 followed by the window) it stays exact for
    /// polynomials of degree ≤ `max_order`.
    pub fn scaled_differences(&self, max_order: usize, spacing: usize) -> Result<Vec<FeatureTensor>> {
        if spacing == 0 {
            return Err(Error::InvalidConfig("normalization spacing must be ≥ 1".into()));
        }
        let window = self.newest_first(max_order + 1)?;
        let steps: Vec<f64> = window.iter().map(|s| s.step_index as f64).collect();
        let mut level: Vec<FeatureTensor> = window.iter().map(|s| s.value.clone()).collect();
        let mut out = Vec::with_capacity(max_order + 1);
        out.push(level[0].clone());
        let h = spacing as f64;
        for order in 1..=max_order {
            level = (0..level.len() - 1)
                .map(|j| {
                    let du = steps[j] - steps[j + order];
                    (&level[j] - &level[j + 1]) / du
                })
                .collect();
            let scale = (-h).powi(order as i32) * factorial(order)? as f64;
            out.push(&level[0] * scale);
        }
        Ok(out)
    }
}

/// Full/skip schedule: the first `warmup` steps are full, then every
/// `window`-th step counting from step `warmup − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: usize,
    pub window: usize,
    pub warmup: usize,
}

impl Schedule {
    pub fn new(total_steps: usize, window: usize, warmup: usize) -> Result<Self> {
        let s = Self {
            total_steps,
            window,
            warmup,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidSchedule("window must be ≥ 1".into()));
        }
        if self.warmup == 0 {
            return Err(Error::InvalidSchedule("warmup must be ≥ 1".into()));
        }
        if self.total_steps < self.warmup {
            return Err(Error::InvalidSchedule(format!(
                "total steps {} smaller than warmup {}",
                self.total_steps, self.warmup
            )));
        }
        Ok(())
    }

    pub fn is_full_step(&self, step_index: usize) -> Result<bool> {
        if step_index >= self.total_steps {
            return Err(Error::OutOfRange {
                step: step_index,
                total: self.total_steps,
            });
        }
        Ok(self.is_full_unchecked(step_index))
    }

    fn is_full_unchecked(&self, step_index: usize) -> bool {
        step_index < self.warmup || (step_index - (self.warmup - 1)).is_multiple_of(self.window)
    }

    pub fn full_steps(&self) -> Vec<usize> {
        (0..self.total_steps)
            .filter(|&i| self.is_full_unchecked(i))
            .collect()
    }

    pub fn full_count(&self) -> usize {
        (0..self.total_steps)
            .filter(|&i| self.is_full_unchecked(i))
            .count()
    }

    pub fn skip_count(&self) -> usize {
        self.total_steps - self.full_count()
    }
}

/// The two compact caches kept across a run: probe history and residual history.
#[derive(Debug, Clone)]
pub struct CacheState {
    pub probe_stack: DifferenceStack,
    pub residual_stack: DifferenceStack,
    pub last_full_step: Option<usize>,
}

impl CacheState {
    pub fn new(capacity: usize) -> Result<Self> {
        Ok(Self {
            probe_stack: DifferenceStack::new(capacity)?,
            residual_stack: DifferenceStack::new(capacity)?,
            last_full_step: None,
        })
    }

    pub fn record_full(&mut self, step: usize, probe: FeatureTensor, residual: FeatureTensor) -> Result<()> {
        self.probe_stack.push(step, probe)?;
        self.residual_stack.push(step, residual)?;
        self.last_full_step = Some(step);
        Ok(())
    }

    /// `k`: steps elapsed since the last full evaluation.
    pub fn steps_since_full(&self, current_step: usize) -> Option<usize> {
        self.last_full_step.map(|f| current_step.saturating_sub(f))
    }
}
