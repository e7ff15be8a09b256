//! Dense `batch × tokens × channels` feature tensors.

use ndarray::{Array3, Zip};

use crate::error::{Error, Result};

/// The value carrier for features, probes and residuals.
pub type FeatureTensor = Array3<f64>;

pub(crate) fn ensure_same_shape(expected: &FeatureTensor, actual: &FeatureTensor) -> Result<()> {
    if expected.shape() != actual.shape() {
        return Err(Error::ShapeMismatch {
            expected: expected.shape().to_vec(),
            actual: actual.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean squared difference over every element.
pub fn mse(reference: &FeatureTensor, test: &FeatureTensor) -> Result<f64> {
    ensure_same_shape(reference, test)?;
    if reference.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    Zip::from(reference).and(test).for_each(|&a, &b| {
        let d = a - b;
        acc += d * d;
    });
    Ok(acc / reference.len() as f64)
}

/// `‖test − reference‖ / ‖reference‖` in the Frobenius norm; falls back to the
/// absolute error norm when the reference is zero.
pub fn relative_error(reference: &FeatureTensor, test: &FeatureTensor) -> Result<f64> {
    ensure_same_shape(reference, test)?;
    let mut num = 0.0;
    let mut den = 0.0;
    Zip::from(reference).and(test).for_each(|&a, &b| {
        num += (a - b) * (a - b);
        den += a * a;
    });
    if den == 0.0 {
        Ok(num.sqrt())
    } else {
        Ok((num / den).sqrt())
    }
}
