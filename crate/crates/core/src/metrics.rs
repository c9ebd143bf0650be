//! Image quality metrics and expert-specialization statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::router::GatingMap;
use crate::scene::Dataset;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// Gating weights at or below this count as zero in [`specialization`].
pub const POSITIVE_WEIGHT: f64 = 1e-8;

/// Windowed SSIM parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    /// Odd side length of the Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::param(format!("ssim window {} must be odd and at least 3", self.window)));
        }
        if !(self.sigma > 0.0) || !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::param("ssim sigma and constants must be positive"));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let mut k: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b, "psnr operand")?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::input("psnr of an empty image"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Separable 'same' filtering of one `H x W` plane with zero padding.
fn blur(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as isize + j as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel_plane(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(img.channels()).copied().collect()
}

/// Mean SSIM over all pixels and channels and, if requested, its gradient
/// with respect to `a`.
pub(crate) fn ssim_with_grad(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig, want_grad: bool) -> Result<(f64, Option<ImageBuffer>)> {
    cfg.validate()?;
    a.ensure_same_shape(b, "ssim operand")?;
    let (h, w, ch) = a.shape();
    let n = h * w * ch;
    if n == 0 {
        return Err(Error::input("ssim of an empty image"));
    }
    let k = cfg.kernel();
    let (c1, c2) = (cfg.c1, cfg.c2);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| ImageBuffer::zeros(h, w, ch));
    for c in 0..ch {
        let x = channel_plane(a, c);
        let y = channel_plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, h, w, &k), blur(&y, h, w, &k));
        let (exx, eyy, exy) = (blur(&xx, h, w, &k), blur(&yy, h, w, &k), blur(&xy, h, w, &k));
        let mut g_mu = vec![0.0; h * w];
        let mut g_xx = vec![0.0; h * w];
        let mut g_xy = vec![0.0; h * w];
        for p in 0..h * w {
            let (ux, uy) = (mx[p], my[p]);
            let vx = exx[p] - ux * ux;
            let vy = eyy[p] - uy * uy;
            let cxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + c1;
            let a2 = 2.0 * cxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = vx + vy + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                // Partials of S with (μx, E[x²], E[xy]) as the independent inputs.
                g_mu[p] = s * (2.0 * uy / a1 - 2.0 * ux / b1 - 2.0 * uy / a2 + 2.0 * ux / b2);
                g_xx[p] = -s / b2;
                g_xy[p] = 2.0 * s / a2;
            }
        }
        if let Some(g) = grad.as_mut() {
            // The window is symmetric, so the adjoint of the blur is the blur.
            let (bm, bxx, bxy) = (blur(&g_mu, h, w, &k), blur(&g_xx, h, w, &k), blur(&g_xy, h, w, &k));
            for p in 0..h * w {
                g.data_mut()[p * ch + c] = (bm[p] + 2.0 * x[p] * bxx[p] + y[p] * bxy[p]) / n as f64;
            }
        }
    }
    Ok((total / n as f64, grad))
}

/// Mean windowed SSIM over all pixels and channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_with_grad(a, b, cfg, false)?.0)
}

/// Per-pixel non-negative scalar map (motion or detail magnitude).
pub type MagnitudeMap = ImageBuffer;

/// Per-expert weighted means of a magnitude map under the gating weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecializationRecord {
    /// `Σ_u G_k(u)·m(u) / #{u : G_k(u) > 0}`.
    pub weighted_mean: Vec<f64>,
    /// `weighted_mean / max_k weighted_mean` (all zero if the max is zero).
    pub normalized: Vec<f64>,
}

/// Denominator of the per-expert weighted mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Number of pixels with positive weight.
    #[default]
    PositiveCount,
    /// Sum of the weights.
    WeightSum,
}

pub fn specialization(gating: &GatingMap, m: &MagnitudeMap, norm: Normalization) -> Result<SpecializationRecord> {
    let g = &gating.gates;
    if (g.height(), g.width()) != (m.height(), m.width()) || m.channels() != 1 {
        return Err(Error::input("magnitude map must be one channel at the gating resolution"));
    }
    let k_count = g.channels();
    let mut num = vec![0.0; k_count];
    let mut den = vec![0.0; k_count];
    for px in 0..g.pixel_count() {
        let mv = m.data()[px];
        for (k, &wk) in g.pixel(px).iter().enumerate() {
            num[k] += wk * mv;
            den[k] += match norm {
                Normalization::PositiveCount => f64::from(u8::from(wk > POSITIVE_WEIGHT)),
                Normalization::WeightSum => wk,
            };
        }
    }
    let weighted_mean: Vec<f64> = num.iter().zip(&den).map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 }).collect();
    let max = weighted_mean.iter().copied().fold(0.0, f64::max);
    let normalized = weighted_mean.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
    Ok(SpecializationRecord {
        weighted_mean,
        normalized,
    })
}

/// Per-pixel L2 norm over channels of the difference to the temporally
/// preceding view from the same camera; zero without a predecessor.
pub fn motion_magnitude(dataset: &Dataset, index: usize) -> Result<MagnitudeMap> {
    if index >= dataset.len() {
        return Err(Error::input(format!("view {index} out of range")));
    }
    let cur = dataset.view(index).gt()?;
    let (h, w, _) = cur.shape();
    let Some(prev) = dataset.temporal_predecessor(index) else {
        return Ok(ImageBuffer::zeros(h, w, 1));
    };
    let prev = dataset.view(prev).gt()?;
    Ok(ImageBuffer::from_fn(h, w, 1, |y, x, _| {
        let (p, q) = (cur.pixel(y * w + x), prev.pixel(y * w + x));
        p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }))
}

/// Sobel gradient magnitude of the channel-mean intensity, with replicated
/// borders.
pub fn detail_complexity(image: &ImageBuffer) -> MagnitudeMap {
    let (h, w, c) = image.shape();
    let lum: Vec<f64> = (0..h * w).map(|p| image.pixel(p).iter().sum::<f64>() / c.max(1) as f64).collect();
    let at = |y: isize, x: isize| lum[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    ImageBuffer::from_fn(h, w, 1, |y, x, _| {
        let (y, x) = (y as isize, x as isize);
        let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)) - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
        let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)) - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        (gx * gx + gy * gy).sqrt()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gating(h: usize, w: usize, gates: impl Fn(usize, usize, usize) -> f64, k: usize) -> GatingMap {
        GatingMap {
            gates: ImageBuffer::from_fn(h, w, k, gates),
            logits: ImageBuffer::zeros(h, w, k),
        }
    }

    #[test]
    fn psnr_examples() {
        let a = ImageBuffer::filled(4, 4, 3, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = ImageBuffer::filled(4, 4, 3, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &ImageBuffer::zeros(4, 5, 3)).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_one_and_inverse_is_negative() {
        let a = ImageBuffer::from_fn(12, 12, 1, |y, x, _| f64::from(u8::from((x / 3 + y / 3) % 2 == 0)));
        assert!((ssim(&a, &a, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv, &SsimConfig::default()).unwrap() < 0.0);
    }

    #[test]
    fn even_window_is_rejected() {
        let a = ImageBuffer::zeros(4, 4, 1);
        let cfg = SsimConfig { window: 4, ..Default::default() };
        assert!(matches!(ssim(&a, &a, &cfg), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn uniform_gating_gives_c_over_n() {
        let g = gating(5, 6, |_, _, _| 0.25, 4);
        let m = ImageBuffer::filled(5, 6, 1, 0.8);
        let rec = specialization(&g, &m, Normalization::PositiveCount).unwrap();
        for v in &rec.weighted_mean {
            assert!((v - 0.2).abs() < 1e-12);
        }
        assert!(rec.normalized.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn expert_with_no_weight_records_zero() {
        let g = gating(3, 3, |_, _, k| if k == 0 { 1.0 } else { 0.0 }, 2);
        let m = ImageBuffer::filled(3, 3, 1, 2.0);
        let rec = specialization(&g, &m, Normalization::PositiveCount).unwrap();
        assert_eq!(rec.weighted_mean, vec![2.0, 0.0]);
        assert_eq!(rec.normalized, vec![1.0, 0.0]);
    }

    #[test]
    fn specialization_scales_linearly_with_the_magnitude() {
        let g = gating(4, 4, |y, x, k| if k == 0 { 0.1 + 0.05 * (x + y) as f64 } else { 0.9 - 0.05 * (x + y) as f64 }, 2);
        let m = ImageBuffer::from_fn(4, 4, 1, |y, x, _| (x * y) as f64 * 0.1);
        for norm in [Normalization::PositiveCount, Normalization::WeightSum] {
            let a = specialization(&g, &m, norm).unwrap();
            let b = specialization(&g, &m.map(|v| 3.0 * v), norm).unwrap();
            for (x, y) in a.weighted_mean.iter().zip(&b.weighted_mean) {
                assert!((3.0 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_image_has_no_detail() {
        let img = ImageBuffer::filled(6, 7, 3, 0.4);
        assert!(detail_complexity(&img).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_responds_at_a_vertical_step() {
        let img = ImageBuffer::from_fn(5, 6, 1, |_, x, _| if x >= 3 { 1.0 } else { 0.0 });
        let d = detail_complexity(&img);
        // Columns 2 and 3 straddle the edge: |gx| = 1 + 2 + 1.
        for y in 0..5 {
            assert_eq!(d.get(y, 2, 0), 4.0);
            assert_eq!(d.get(y, 3, 0), 4.0);
            assert_eq!(d.get(y, 0, 0), 0.0);
            assert_eq!(d.get(y, 5, 0), 0.0);
        }
    }
}
