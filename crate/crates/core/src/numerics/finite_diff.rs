use super::array::{lit, Array, Scalar};
use crate::error::{Error, Result};

/// Default central-difference step at 64-bit precision.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient of a scalar function,
/// `(f(x + eps·e_i) − f(x − eps·e_i)) / 2·eps` per coordinate.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Array<T>) -> T,
    x: &Array<T>,
    eps: f64,
) -> Result<Array<T>> {
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite difference step must be positive, got {eps}")));
    }
    let step = lit::<T>(eps);
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!(
                "function is not finite around coordinate {i}"
            )));
        }
        grad.push((up - down) / (step + step));
    }
    Array::new(x.shape().to_vec(), grad)
}

/// Worst coordinate of `|analytic − numeric| / max(1, |analytic|)`.
pub fn max_relative_error<T: Scalar>(analytic: &Array<T>, numeric: &Array<T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .to_f64_vec()
        .iter()
        .zip(numeric.to_f64_vec())
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
