//! Direct per-pixel evaluation of front-to-back alpha compositing.

use moesplat_core::raster::ChannelSplat;
use nalgebra::Vector2;

const ALPHA_MAX: f64 = 0.999;
const T_MIN: f64 = 1e-4;
const SUPPORT_SQ: f64 = 9.0;

/// Alpha from an explicitly inverted covariance; `None` outside 3σ.
pub fn alpha_direct(s: &ChannelSplat, u: Vector2<f64>, check_support: bool) -> Option<f64> {
    let inv = s.splat.cov.try_inverse().expect("invertible covariance");
    let d = u - s.splat.mean;
    let q = (d.transpose() * inv * d)[(0, 0)];
    if check_support && q > SUPPORT_SQ {
        return None;
    }
    Some((s.opacity * (-0.5 * q).exp()).min(ALPHA_MAX))
}

fn sorted_indices(splats: &[ChannelSplat]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..splats.len()).collect();
    idx.sort_by(|&a, &b| {
        splats[a]
            .splat
            .depth
            .total_cmp(&splats[b].splat.depth)
            .then(splats[a].source.cmp(&splats[b].source))
    });
    idx
}

fn center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Naive compositing of every splat at every pixel, no tiling. Returns the
/// image as `H x W x C` row-major plus each pixel's contributor list.
pub fn naive_with_support(splats: &[ChannelSplat], height: usize, width: usize) -> (Vec<f64>, Vec<Vec<usize>>) {
    let c = splats.first().map_or(0, |s| s.channels.len());
    let order = sorted_indices(splats);
    let mut img = vec![0.0; height * width * c];
    let mut support = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut t = 1.0;
            let mut list = Vec::new();
            for &i in &order {
                let Some(a) = alpha_direct(&splats[i], center(x, y), true) else {
                    continue;
                };
                for k in 0..c {
                    img[(y * width + x) * c + k] += splats[i].channels[k] * a * t;
                }
                list.push(i);
                t *= 1.0 - a;
                if t < T_MIN {
                    break;
                }
            }
            support.push(list);
        }
    }
    (img, support)
}

pub fn naive(splats: &[ChannelSplat], height: usize, width: usize) -> Vec<f64> {
    naive_with_support(splats, height, width).0
}

/// Composites along fixed per-pixel contributor lists, recomputing alphas
/// without any support test. This is the smooth piece of the renderer that
/// contains the configuration the lists were recorded from, so its central
/// differences are valid gradient references.
pub fn frozen(splats: &[ChannelSplat], support: &[Vec<usize>], height: usize, width: usize) -> Vec<f64> {
    let c = splats.first().map_or(0, |s| s.channels.len());
    let mut img = vec![0.0; height * width * c];
    for y in 0..height {
        for x in 0..width {
            let mut t = 1.0;
            for &i in &support[y * width + x] {
                let a = alpha_direct(&splats[i], center(x, y), false).unwrap();
                for k in 0..c {
                    img[(y * width + x) * c + k] += splats[i].channels[k] * a * t;
                }
                t *= 1.0 - a;
            }
        }
    }
    img
}

/// Walks the merged, globally sorted list of all experts' splats.
///
/// With `shared` set, every splat attenuates every expert (one global
/// transmittance); otherwise each expert keeps its own transmittance and
/// early-termination state. Returns one `H x W x C` image per expert.
pub fn merged(splats: &[ChannelSplat], experts: usize, height: usize, width: usize, shared: bool) -> Vec<Vec<f64>> {
    let c = splats.first().map_or(0, |s| s.channels.len());
    let order = sorted_indices(splats);
    let mut out = vec![vec![0.0; height * width * c]; experts];
    for y in 0..height {
        for x in 0..width {
            let mut t_shared = 1.0;
            let mut t_own = vec![1.0; experts];
            let mut done = vec![false; experts];
            for &i in &order {
                let k = splats[i].source.expert as usize;
                if shared && t_shared < T_MIN {
                    break;
                }
                if !shared && done[k] {
                    continue;
                }
                let Some(a) = alpha_direct(&splats[i], center(x, y), true) else {
                    continue;
                };
                let t = if shared { t_shared } else { t_own[k] };
                for ch in 0..c {
                    out[k][(y * width + x) * c + ch] += splats[i].channels[ch] * a * t;
                }
                if shared {
                    t_shared *= 1.0 - a;
                } else {
                    t_own[k] *= 1.0 - a;
                    if t_own[k] < T_MIN {
                        done[k] = true;
                    }
                }
            }
        }
    }
    out
}
