use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Moment decay rates and denominator guard shared by every group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RadamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Rectified Adam state for one parameter group.
///
/// While the variance estimate is not yet tractable (`ρ_t ≤ 5`) the update
/// is bias-corrected momentum; afterwards it is the Adam step scaled by the
/// rectification factor `r_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Radam {
    cfg: RadamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Radam {
    pub fn new(len: usize, cfg: RadamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Fails without touching `params` if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, group: &str) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::input(format!(
                "group `{group}`: {} params, {} grads, optimizer sized for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                group: group.to_string(),
                index,
                value,
            });
        }
        let RadamConfig { beta1: b1, beta2: b2, eps } = self.cfg;
        self.step += 1;
        let t = self.step as f64;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powf(t);
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let bias1 = 1.0 - b1.powf(t);
        let rect = (rho_t > 5.0)
            .then(|| (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt());
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bias1;
            match rect {
                Some(r) => {
                    let v_hat = (*v / (1.0 - b2t)).sqrt();
                    *p -= lr * r * m_hat / (v_hat + eps);
                }
                None => *p -= lr * m_hat,
            }
        }
        Ok(())
    }
}
