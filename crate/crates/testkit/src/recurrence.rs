//! Step-by-step RAdam recurrence for a single scalar parameter.

/// Trajectory of `steps` RAdam updates on one parameter with the gradient
/// supplied by `grad(step, param)`. Follows the rectified-Adam recurrence
/// with the variance-tractability threshold `rho_t > 5`.
pub fn radam_trajectory(
    mut param: f64,
    lr: f64,
    steps: usize,
    mut grad: impl FnMut(usize, f64) -> f64,
) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let (mut m, mut v) = (0.0, 0.0);
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = grad(t, param);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let tf = t as f64;
        let m_hat = m / (1.0 - b1.powf(tf));
        let b2t = b2.powf(tf);
        let rho_t = rho_inf - 2.0 * tf * b2t / (1.0 - b2t);
        if rho_t > 5.0 {
            let v_hat = (v / (1.0 - b2t)).sqrt();
            let r = (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
            param -= lr * r * m_hat / (v_hat + eps);
        } else {
            param -= lr * m_hat;
        }
        out.push(param);
    }
    out
}
