//! Finite-difference gradient oracle. Re-evaluates a scalar function under
//! coordinate perturbations, so it never touches the tape's backward path;
//! tests compare its output against analytic gradients.

/// Central differences with step `h` on every coordinate of `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Largest relative error between analytic and numeric gradients, with a small
/// absolute floor so near-zero entries do not blow up the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Default step for central differences on O(1)-scaled inputs.
pub const FD_STEP: f64 = 1e-6;

/// Default acceptance bound for [`max_rel_err`].
pub const FD_TOL: f64 = 1e-5;
