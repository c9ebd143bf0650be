//! Central finite differences and error measures.

/// `(f(x + h) - f(x - h)) / 2h` for a scalar function of one perturbed value.
pub fn central(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Fourth-order five-point stencil; truncation error O(h⁴) instead of O(h²).
pub fn five_point(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

/// Relative error of `analytic` against central differences, trying the
/// step sizes in order and stopping at the first within `tol`. Large steps
/// suffer truncation and kink crossings, small steps cancellation; a correct
/// gradient agrees at some step. Each step is tried with the second-order
/// stencil and then the fourth-order one. Returns the best `(error, numeric)` seen.
pub fn best_rel_err(
    mut f: impl FnMut(f64) -> f64,
    x: f64,
    analytic: f64,
    steps: &[f64],
    floor: f64,
    tol: f64,
) -> (f64, f64) {
    let mut best = (f64::INFINITY, f64::NAN);
    for &h in steps {
        for n in [central(&mut f, x, h), five_point(&mut f, x, h)] {
            let e = rel_err(analytic, n, floor);
            if e < best.0 {
                best = (e, n);
            }
            if e <= tol {
                return best;
            }
        }
    }
    best
}

/// Relative error with an absolute floor so exact zeros compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error over paired slices.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n, floor))
        .fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
