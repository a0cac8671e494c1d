//! Central finite-difference gradient verification.
//!
//! Used by the engine's own unit tests and by loss-level integration tests:
//! build the loss twice per perturbed element and compare the numeric slope
//! against the analytic gradient from [`super::Graph::backward`].

use super::Arr;

/// Numeric gradient of `f` at `x0` by central differences with step `h`.
pub fn finite_difference(mut f: impl FnMut(&Arr) -> f64, x0: &Arr, h: f64) -> Arr {
    let mut grad = Arr::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for i in 0..x0.len() {
        let orig = x.as_slice_mut().unwrap()[i];
        x.as_slice_mut().unwrap()[i] = orig + h;
        let fp = f(&x);
        x.as_slice_mut().unwrap()[i] = orig - h;
        let fm = f(&x);
        x.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Compare analytic and numeric gradients element-wise with a mixed
/// relative/absolute tolerance: `|a - n| <= atol + rtol * max(|a|, |n|)`.
pub fn check_grads(analytic: &Arr, numeric: &Arr, rtol: f64, atol: f64) -> Result<(), String> {
    if analytic.shape() != numeric.shape() {
        return Err(format!(
            "gradient shape mismatch: analytic {:?} vs numeric {:?}",
            analytic.shape(),
            numeric.shape()
        ));
    }
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let tol = atol + rtol * a.abs().max(n.abs());
        if (a - n).abs() > tol {
            return Err(format!(
                "gradient mismatch at flat index {}: analytic {} vs numeric {} (tol {})",
                i, a, n, tol
            ));
        }
    }
    Ok(())
}
