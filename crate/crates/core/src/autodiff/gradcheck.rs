//! Central finite-difference oracle for verifying analytic gradients.
//!
//! Verification support: independent of the tape's backward pass, it
//! re-evaluates the target function at perturbed inputs.

use ndarray::ArrayD;

use super::Scalar;

/// Central-difference gradient of `f` with respect to `x`.
///
/// `f` must treat its argument as the only varying input.
pub fn finite_diff<A: Scalar>(
    x: &ArrayD<A>,
    step: A,
    mut f: impl FnMut(&ArrayD<A>) -> A,
) -> ArrayD<A> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    let two = A::lit(2.0);
    for idx in 0..x.len() {
        let orig = probe.as_slice().expect("standard layout")[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + step;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - step;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (two * step);
    }
    grad
}

/// Largest elementwise relative error between an analytic and a numeric
/// gradient. The denominator is floored at `1e-6` so that elements whose
/// true gradient vanishes compare absolutely.
pub fn max_rel_err<A: Scalar>(analytic: &ArrayD<A>, numeric: &ArrayD<A>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let floor = 1e-6f64;
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let a = a.to_f64_lossy();
        let n = n.to_f64_lossy();
        let denom = a.abs().max(n.abs()).max(floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
