use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::metrics::{ssim_with_grad, SsimConfig};

/// Photometric objective `(1 − λ)·L1 + λ·(1 − SSIM)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_ssim: f64,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            ssim: SsimConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err(Error::param(format!("lambda_ssim {} outside [0, 1]", self.lambda_ssim)));
        }
        self.ssim.validate()
    }
}

/// Loss value and its gradient with respect to `image`.
pub fn loss(image: &ImageBuffer, reference: &ImageBuffer, cfg: &LossConfig) -> Result<(f64, ImageBuffer)> {
    cfg.validate()?;
    image.ensure_same_shape(reference, "loss reference")?;
    let n = image.data().len();
    if n == 0 {
        return Err(Error::input("loss of an empty image"));
    }
    let lam = cfg.lambda_ssim;
    let mut l1 = 0.0;
    let mut grad = ImageBuffer::zeros(image.height(), image.width(), image.channels());
    for ((g, a), b) in grad.data_mut().iter_mut().zip(image.data()).zip(reference.data()) {
        let d = a - b;
        l1 += d.abs();
        // sign(0) = 0 keeps the gradient zero at the optimum.
        *g = (1.0 - lam) * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / n as f64;
    }
    let mut value = (1.0 - lam) * l1 / n as f64;
    if lam > 0.0 {
        let (s, ds) = ssim_with_grad(image, reference, &cfg.ssim, true)?;
        value += lam * (1.0 - s);
        for (g, d) in grad.data_mut().iter_mut().zip(ds.expect("gradient requested").data()) {
            *g -= lam * d;
        }
    }
    Ok((value, grad))
}
