//! Shared helpers for numeric verification: relative error with a floor for
//! near-zero pairs, and central differences for gradient checks.

/// Symmetric relative error `|a - n| / max(|a| + |n|, 1e-6)`.
///
/// The floor makes a pair of near-zero values compare as equal instead of
/// amplifying rounding noise.
pub fn grad_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Relative error against a reference value, `|got - want| / max(|want|, floor)`.
pub fn relative_error(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / want.abs().max(floor)
}

/// Central difference `(f(x0 + h) - f(x0 - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}
