//! Per-token proxy scoring, argmin selection and residual assembly.

use ndarray::{Array2, Array3, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, FeatureTensor};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Cosine,
    L1,
    Mse,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Cosine => "cosine",
            MetricKind::L1 => "l1",
            MetricKind::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" | "cos" => Some(MetricKind::Cosine),
            "l1" => Some(MetricKind::L1),
            "mse" | "l2" => Some(MetricKind::Mse),
            _ => None,
        }
    }
}

/// Distance used to compare a predicted probe with the actual probe, per
/// token over the channel axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyMetric {
    pub kind: MetricKind,
    /// Norm guard for the cosine distance.
    pub epsilon: f64,
}

impl Default for ProxyMetric {
    fn default() -> Self {
        Self::new(MetricKind::Cosine)
    }
}

impl ProxyMetric {
    pub fn new(kind: MetricKind) -> Self {
        Self {
            kind,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::InvalidConfig(format!(
                "metric epsilon {} outside (0, 1e-3]",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Distance between two channel vectors of equal length.
    pub fn distance(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        match self.kind {
            MetricKind::Cosine => cosine_view(a, b, self.epsilon),
            MetricKind::L1 => {
                let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
                s / a.len() as f64
            }
            MetricKind::Mse => {
                let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                s / a.len() as f64
            }
        }
    }
}

fn cosine_view(a: ArrayView1<f64>, b: ArrayView1<f64>, eps: f64) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    match (na < eps, nb < eps) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 2.0,
        (false, false) => 1.0 - dot / (na.max(eps) * nb.max(eps)),
    }
}

/// `1 − ⟨a,b⟩ / (max(‖a‖,ε)·max(‖b‖,ε))`, with both-degenerate inputs at 0
/// and exactly-one-degenerate at 2.
pub fn cosine_distance(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(cosine_view(ArrayView1::from(a), ArrayView1::from(b), eps))
}

/// Per-token loss matrix `batch × tokens`.
pub fn proxy_loss(
    predicted: &FeatureTensor,
    actual: &FeatureTensor,
    metric: &ProxyMetric,
) -> Result<Array2<f64>> {
    ensure_same_shape(actual, predicted)?;
    let (b, n, _) = actual.dim();
    let mut out = Array2::zeros((b, n));
    Zip::from(&mut out)
        .and(predicted.lanes(Axis(2)))
        .and(actual.lanes(Axis(2)))
        .for_each(|o, p, a| *o = metric.distance(p, a));
    Ok(out)
}

/// Proxy losses shaped `predictors × batch × tokens` with a per-predictor
/// activity mask.
#[derive(Debug, Clone)]
pub struct LossMatrix {
    pub values: Array3<f64>,
    pub active: Vec<bool>,
}

impl LossMatrix {
    pub fn new(values: Array3<f64>, active: Vec<bool>) -> Result<Self> {
        if values.len_of(Axis(0)) != active.len() {
            return Err(Error::LengthMismatch {
                left: values.len_of(Axis(0)),
                right: active.len(),
            });
        }
        Ok(Self { values, active })
    }

    /// Stacks per-predictor loss maps; every predictor is active.
    pub fn from_rows(rows: &[Array2<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::NoActivePredictor)?;
        let (b, n) = first.dim();
        let mut values = Array3::zeros((rows.len(), b, n));
        for (p, row) in rows.iter().enumerate() {
            if row.dim() != (b, n) {
                return Err(Error::ShapeMismatch {
                    expected: vec![b, n],
                    actual: row.shape().to_vec(),
                });
            }
            values.index_axis_mut(Axis(0), p).assign(row);
        }
        Self::new(values, vec![true; rows.len()])
    }

    pub fn predictors(&self) -> usize {
        self.active.len()
    }
}

/// Chosen predictor per `(batch, token)` and its loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMap {
    pub chosen: Array2<usize>,
    pub chosen_loss: Array2<f64>,
    /// Tokens whose losses were all non-finite.
    pub degenerate_tokens: usize,
}

impl SelectionMap {
    /// Same selection with indices rewritten through `map`.
    pub fn remap(&self, map: &[usize]) -> SelectionMap {
        SelectionMap {
            chosen: self.chosen.mapv(|i| map[i]),
            chosen_loss: self.chosen_loss.clone(),
            degenerate_tokens: self.degenerate_tokens,
        }
    }
}

/// Argmin over active predictors per token. Ties go to the lowest index and
/// non-finite losses count as `+∞`.
pub fn select(losses: &LossMatrix) -> Result<SelectionMap> {
    let first_active = losses
        .active
        .iter()
        .position(|&a| a)
        .ok_or(Error::NoActivePredictor)?;
    let (_, b, n) = losses.values.dim();
    let mut chosen = Array2::from_elem((b, n), first_active);
    let mut chosen_loss = Array2::zeros((b, n));
    let mut degenerate = 0;
    for bi in 0..b {
        for ni in 0..n {
            let mut best: Option<(usize, f64)> = None;
            for (p, _) in losses.active.iter().enumerate().filter(|(_, &a)| a) {
                let v = losses.values[[p, bi, ni]];
                if !v.is_finite() {
                    continue;
                }
                if best.is_none_or(|(_, bv)| v < bv) {
                    best = Some((p, v));
                }
            }
            match best {
                Some((p, v)) => {
                    chosen[[bi, ni]] = p;
                    chosen_loss[[bi, ni]] = v;
                }
                None => {
                    degenerate += 1;
                    chosen_loss[[bi, ni]] = losses.values[[first_active, bi, ni]];
                }
            }
        }
    }
    Ok(SelectionMap {
        chosen,
        chosen_loss,
        degenerate_tokens: degenerate,
    })
}

/// Gathers each token's channel vector from its chosen candidate.
pub fn assemble_residual(
    selection: &SelectionMap,
    candidates: &[FeatureTensor],
) -> Result<FeatureTensor> {
    let first = candidates.first().ok_or(Error::IndexOutOfRange { index: 0, len: 0 })?;
    for c in candidates {
        ensure_same_shape(first, c)?;
    }
    let (b, n, _) = first.dim();
    if selection.chosen.dim() != (b, n) {
        return Err(Error::ShapeMismatch {
            expected: vec![b, n],
            actual: selection.chosen.shape().to_vec(),
        });
    }
    let mut out = first.clone();
    for ((bi, ni), &p) in selection.chosen.indexed_iter() {
        let src = candidates.get(p).ok_or(Error::IndexOutOfRange {
            index: p,
            len: candidates.len(),
        })?;
        if p != 0 {
            out.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ni)
                .assign(&src.index_axis(Axis(0), bi).index_axis(Axis(0), ni));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;

    fn token(v: &[f64]) -> FeatureTensor {
        Array3::from_shape_vec((1, 1, v.len()), v.to_vec()).unwrap()
    }

    fn one_token_losses(v: &[f64]) -> LossMatrix {
        let values = Array3::from_shape_vec((v.len(), 1, 1), v.to_vec()).unwrap();
        LossMatrix::new(values, vec![true; v.len()]).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_relative_eq!(cosine_distance(&[3.0, 4.0], &[3.0, 4.0], 1e-8).unwrap(), 0.0, epsilon = 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0], 1e-8).unwrap(), 1.0);
        assert_relative_eq!(
            cosine_distance(&[1.0, 1.0], &[1.0, 0.0], 1e-8).unwrap(),
            1.0 - 1.0 / 2f64.sqrt(),
            epsilon = 1e-12
        );
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 0.0], 1e-8).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0], 1e-8).unwrap(), 2.0);
        assert!(cosine_distance(&[1.0], &[1.0, 2.0], 1e-8).is_err());
    }

    #[test]
    fn proxy_loss_examples() {
        let a = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i + 2 * j) as f64 - k as f64);
        for kind in [MetricKind::Cosine, MetricKind::L1, MetricKind::Mse] {
            let l = proxy_loss(&a, &a, &ProxyMetric::new(kind)).unwrap();
            assert!(l.iter().all(|&x| x.abs() < 1e-12), "{kind:?}");
        }
        let l1 = proxy_loss(&token(&[1.0, 2.0]), &token(&[1.0, 1.0]), &ProxyMetric::new(MetricKind::L1)).unwrap();
        assert_eq!(l1[[0, 0]], 0.5);
        let cos = proxy_loss(&token(&[1.0, 1.0]), &token(&[1.0, 0.0]), &ProxyMetric::default()).unwrap();
        assert_relative_eq!(cos[[0, 0]], 0.29289321881345254, epsilon = 1e-12);
        assert!(proxy_loss(&token(&[1.0]), &token(&[1.0, 0.0]), &ProxyMetric::default()).is_err());
    }

    #[test]
    fn metric_epsilon_bounds() {
        let mut m = ProxyMetric::default();
        assert!(m.validate().is_ok());
        m.epsilon = 0.0;
        assert!(m.validate().is_err());
        m.epsilon = 1e-2;
        assert!(m.validate().is_err());
    }

    #[test]
    fn select_examples() {
        let s = select(&one_token_losses(&[0.3, 0.1, 0.2])).unwrap();
        assert_eq!(s.chosen[[0, 0]], 1);
        assert_eq!(s.chosen_loss[[0, 0]], 0.1);
        assert_eq!(select(&one_token_losses(&[0.1, 0.1])).unwrap().chosen[[0, 0]], 0);
        assert_eq!(select(&one_token_losses(&[f64::NAN, 0.4])).unwrap().chosen[[0, 0]], 1);
    }

    #[test]
    fn select_masks_and_degenerate() {
        let mut m = one_token_losses(&[0.0, 0.5, 0.7]);
        m.active[0] = false;
        assert_eq!(select(&m).unwrap().chosen[[0, 0]], 1);
        let all_bad = one_token_losses(&[f64::NAN, f64::INFINITY]);
        let s = select(&all_bad).unwrap();
        assert_eq!(s.chosen[[0, 0]], 0);
        assert_eq!(s.degenerate_tokens, 1);
        let none = LossMatrix::new(Array3::zeros((1, 1, 1)), vec![false]).unwrap();
        assert_eq!(select(&none).unwrap_err(), Error::NoActivePredictor);
    }

    #[test]
    fn assemble_gathers_rows() {
        let c0 = Array3::from_elem((1, 2, 2), 1.0);
        let c1 = Array3::from_elem((1, 2, 2), 2.0);
        let sel = SelectionMap {
            chosen: arr2(&[[0, 1]]),
            chosen_loss: arr2(&[[0.0, 0.0]]),
            degenerate_tokens: 0,
        };
        let out = assemble_residual(&sel, &[c0.clone(), c1.clone()]).unwrap();
        assert_eq!(out.index_axis(Axis(1), 0), c0.index_axis(Axis(1), 0));
        assert_eq!(out.index_axis(Axis(1), 1), c1.index_axis(Axis(1), 1));

        let uniform = SelectionMap {
            chosen: arr2(&[[1, 1]]),
            ..sel.clone()
        };
        assert_eq!(assemble_residual(&uniform, &[c0.clone(), c1.clone()]).unwrap(), c1);

        let bad = SelectionMap {
            chosen: arr2(&[[0, 5]]),
            ..sel
        };
        assert!(matches!(
            assemble_residual(&bad, &[c0.clone(), c1]),
            Err(Error::IndexOutOfRange { index: 5, .. })
        ));
        assert!(assemble_residual(&uniform, &[c0, Array3::zeros((1, 3, 2))]).is_err());
    }

    #[test]
    fn quadratic_worked_selection() {
        // candidates of orders 0, 1, 2 against truth 1764 with the truth as probe
        let cands = [token(&[2025.0]), token(&[1740.0]), token(&[1749.0])];
        let truth = token(&[1764.0]);
        let metric = ProxyMetric::new(MetricKind::L1);
        let rows: Vec<_> = cands.iter().map(|c| proxy_loss(c, &truth, &metric).unwrap()).collect();
        let sel = select(&LossMatrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(sel.chosen[[0, 0]], 2);
        assert_eq!(sel.chosen_loss[[0, 0]], 15.0);
        assert_eq!(assemble_residual(&sel, &cands).unwrap()[[0, 0, 0]], 1749.0);
    }

    proptest! {
        #[test]
        fn cosine_range_and_scale(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            c in 0.01f64..100.0,
        ) {
            let d = cosine_distance(&a, &b, 1e-8).unwrap();
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&d));
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm * c.min(1.0) >= 1e-6 {
                let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
                let d2 = cosine_distance(&scaled, &b, 1e-8).unwrap();
                prop_assert!((d - d2).abs() < 1e-9);
            }
        }

        #[test]
        fn chosen_loss_is_min(vals in proptest::collection::vec(0.0f64..10.0, 12)) {
            let values = Array3::from_shape_vec((4, 1, 3), vals).unwrap();
            let m = LossMatrix::new(values.clone(), vec![true; 4]).unwrap();
            let s = select(&m).unwrap();
            for n in 0..3 {
                let min = (0..4).map(|p| values[[p, 0, n]]).fold(f64::INFINITY, f64::min);
                prop_assert_eq!(s.chosen_loss[[0, n]], min);
                prop_assert_eq!(values[[s.chosen[[0, n]], 0, n]], min);
            }
        }
    }
}
