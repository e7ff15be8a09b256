//! Run metrics and their serialized forms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::engine::RunTrace;
use crate::error::{Error, Result};
use crate::predictor::PredictorSpec;
use crate::tensor::{mse, FeatureTensor};

pub const PSNR_CAP_DB: f64 = 300.0;

/// `10·log₁₀(peak² / MSE)`, capped at [`PSNR_CAP_DB`]. With `peak = None` the
/// peak is `max |reference|`.
pub fn psnr(reference: &FeatureTensor, test: &FeatureTensor, peak: Option<f64>) -> Result<f64> {
    let err = mse(reference, test)?;
    let peak = peak.unwrap_or_else(|| reference.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    if peak.is_nan() || peak <= 0.0 || peak.is_infinite() {
        return Err(Error::ZeroPeak);
    }
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / err).log10()).min(PSNR_CAP_DB))
}

/// One token's choice on a skipped step. `horizon` is `None` for Hermite
/// candidates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChoiceSample {
    pub step: usize,
    pub order: usize,
    pub horizon: Option<usize>,
}

/// Selection statistics for one skipped step. Order and horizon moments cover
/// Taylor choices only; Hermite choices are counted separately.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSelectionStats {
    pub step: usize,
    pub taylor_tokens: usize,
    pub mean_order: f64,
    pub var_order: f64,
    pub mean_horizon: f64,
    pub var_horizon: f64,
    pub hermite_tokens: usize,
}

fn moments(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Groups samples by step (ascending) and computes population moments.
pub fn stats_from_samples(samples: &[ChoiceSample]) -> Vec<StepSelectionStats> {
    let mut by_step: BTreeMap<usize, Vec<&ChoiceSample>> = BTreeMap::new();
    for s in samples {
        by_step.entry(s.step).or_default().push(s);
    }
    by_step
        .into_iter()
        .map(|(step, group)| {
            let orders: Vec<f64> = group.iter().filter(|s| s.horizon.is_some()).map(|s| s.order as f64).collect();
            let horizons: Vec<f64> = group.iter().filter_map(|s| s.horizon.map(|h| h as f64)).collect();
            let (mean_order, var_order) = moments(&orders);
            let (mean_horizon, var_horizon) = moments(&horizons);
            StepSelectionStats {
                step,
                taylor_tokens: orders.len(),
                mean_order,
                var_order,
                mean_horizon,
                var_horizon,
                hermite_tokens: group.len() - orders.len(),
            }
        })
        .collect()
}

/// Per-token choices of a TAP trace.
pub fn choice_samples(trace: &RunTrace, family: &[PredictorSpec]) -> Result<Vec<ChoiceSample>> {
    if trace.strategy != "tap" {
        return Err(Error::NotATapTrace);
    }
    let mut out = Vec::new();
    for rec in &trace.steps {
        let Some(sel) = &rec.selection else { continue };
        for &idx in sel.chosen.iter() {
            let spec = family.get(idx).ok_or(Error::IndexOutOfRange {
                index: idx,
                len: family.len(),
            })?;
            out.push(ChoiceSample {
                step: rec.step,
                order: spec.order(),
                horizon: match spec {
                    PredictorSpec::Taylor { .. } => spec.horizon(rec.steps_since_full),
                    PredictorSpec::Hermite { .. } => None,
                },
            });
        }
    }
    Ok(out)
}

/// Per-step selection statistics over skipped steps of a TAP trace.
pub fn selection_stats(trace: &RunTrace, family: &[PredictorSpec]) -> Result<Vec<StepSelectionStats>> {
    Ok(stats_from_samples(&choice_samples(trace, family)?))
}

/// Reads the per-token selection CSV written by a TAP run. An empty
/// `chosen_kp` marks a Hermite choice.
pub fn samples_from_selection_csv(path: &Path) -> Result<Vec<ChoiceSample>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or(Error::NotATapTrace);
    let (step_c, full_c, order_c, kp_c) = (col("step")?, col("was_full")?, col("chosen_order")?, col("chosen_kp")?);
    let bad = |what: &str, v: &str| Error::Io(format!("{}: bad {what} `{v}`", path.display()));
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row[full_c].trim() == "true" {
            continue;
        }
        let step = row[step_c].parse().map_err(|_| bad("step", &row[step_c]))?;
        let order = row[order_c].parse().map_err(|_| bad("chosen_order", &row[order_c]))?;
        let kp = row[kp_c].trim();
        let horizon = if kp.is_empty() {
            None
        } else {
            Some(kp.parse().map_err(|_| bad("chosen_kp", kp))?)
        };
        out.push(ChoiceSample { step, order, horizon });
    }
    Ok(out)
}

pub fn write_stats_csv<W: std::io::Write>(rows: &[StepSelectionStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "step",
        "taylor_tokens",
        "mean_order",
        "var_order",
        "mean_horizon",
        "var_horizon",
        "hermite_tokens",
    ])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.taylor_tokens.to_string(),
            fmt_real(r.mean_order),
            fmt_real(r.var_order),
            fmt_real(r.mean_horizon),
            fmt_real(r.var_horizon),
            r.hermite_tokens.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub scenario: String,
    pub seed: u64,
    pub total_steps: usize,
    pub final_state_mse: f64,
    pub final_state_psnr_db: f64,
    pub mean_step_residual_error: f64,
    pub total_residual_error: f64,
    pub full_count: usize,
    pub skip_count: usize,
    pub degenerate_token_count: usize,
    pub speedup_estimate: f64,
    pub selection: Vec<StepSelectionStats>,
}

/// Rounds to `digits` significant digits.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x).parse().unwrap_or(x)
}

/// Shortest text that round-trips the 9-significant-digit value, in
/// exponent form for very small or large magnitudes; empty for NaN.
pub fn fmt_real(x: f64) -> String {
    if x.is_nan() {
        return String::new();
    }
    let r = round_sig(x, 9);
    let a = r.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{r:e}")
    } else {
        r.to_string()
    }
}

fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig(n.as_f64().unwrap_or(f64::NAN), 9);
            *v = serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number);
        }
        Value::Array(items) => items.iter_mut().for_each(round_json),
        Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Pretty JSON with keys sorted and reals at 9 significant digits. Non-finite
/// values become `null`.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::Io(e.to_string()))?;
    round_json(&mut v);
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn psnr_examples() {
        let r = Array3::from_elem((1, 2, 2), 1.0);
        assert_eq!(psnr(&r, &r, None).unwrap(), PSNR_CAP_DB);
        let t = Array3::from_elem((1, 2, 2), 1.1);
        assert!((psnr(&r, &t, Some(1.0)).unwrap() - 20.0).abs() < 1e-9);
        let t = Array3::from_elem((1, 2, 2), 3.0);
        assert!(psnr(&r, &t, Some(2.0)).unwrap().abs() < 1e-12);
        let z = Array3::zeros((1, 2, 2));
        assert_eq!(psnr(&z, &r, None), Err(Error::ZeroPeak));
        assert_eq!(psnr(&r, &r, Some(0.0)), Err(Error::ZeroPeak));
        assert!(matches!(
            psnr(&r, &Array3::zeros((1, 2, 3)), None),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn sample(step: usize, order: usize) -> ChoiceSample {
        ChoiceSample {
            step,
            order,
            horizon: Some(order),
        }
    }

    #[test]
    fn stats_examples() {
        let rows = stats_from_samples(&[sample(3, 2), sample(3, 2), sample(3, 2)]);
        assert_eq!((rows[0].mean_order, rows[0].var_order), (2.0, 0.0));
        let rows = stats_from_samples(&[sample(4, 0), sample(4, 2), sample(4, 0), sample(4, 2)]);
        assert_eq!((rows[0].mean_order, rows[0].var_order), (1.0, 1.0));
        let rows = stats_from_samples(&[
            sample(7, 1),
            sample(5, 1),
            ChoiceSample {
                step: 5,
                order: 2,
                horizon: None,
            },
        ]);
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 7]);
        assert_eq!((rows[0].taylor_tokens, rows[0].hermite_tokens), (1, 1));
    }

    #[test]
    fn rounding() {
        assert_eq!(round_sig(1.23456789012, 9), 1.23456789);
        assert_eq!(round_sig(-0.000123456789012, 9), -0.000123456789);
        assert_eq!(fmt_real(f64::NAN), "");
        assert_eq!(fmt_real(6.162975822e-32), "6.16297582e-32");
        assert_eq!(fmt_real(0.25), "0.25");
        assert_eq!(fmt_real(0.0), "0");
        #[derive(Serialize)]
        struct S {
            b: f64,
            a: f64,
        }
        let s = to_stable_json(&S { b: 1.0 / 3.0, a: f64::INFINITY }).unwrap();
        assert_eq!(s, "{\n  \"a\": null,\n  \"b\": 0.333333333\n}\n");
    }
}
