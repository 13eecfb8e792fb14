//! Central finite-difference utilities for verifying analytic gradients.
//!
//! These only evaluate functions numerically; they never look at the tape's
//! backward pass, so they stay an independent check of it.

/// Central differences of `f` at `x` with the given step, one coordinate at a
/// time.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + step;
        let hi = f(&xs);
        xs[i] = orig - step;
        let lo = f(&xs);
        xs[i] = orig;
        out.push((hi - lo) / (2.0 * step));
    }
    out
}

/// Worst relative discrepancy between analytic and numeric gradients.
/// The denominator is floored so that near-zero pairs compare absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
