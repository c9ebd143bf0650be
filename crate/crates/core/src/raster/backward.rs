use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use super::{pixel_center, RenderGraph};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Gradients of `Σ_u upstream(u)·out(u)` per input splat.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub channels: usize,
    /// `splat_count x channels`, row-major.
    pub d_channels: Vec<f64>,
    pub d_opacity: Vec<f64>,
    pub d_mean2d: Vec<Vector2<f64>>,
    /// Full-matrix (symmetric) gradient w.r.t. the 2D covariance.
    pub d_cov2d: Vec<Matrix2<f64>>,
}

impl SplatGrads {
    fn zeros(n: usize, channels: usize) -> Self {
        Self {
            channels,
            d_channels: vec![0.0; n * channels],
            d_opacity: vec![0.0; n],
            d_mean2d: vec![Vector2::zeros(); n],
            d_cov2d: vec![Matrix2::zeros(); n],
        }
    }

    pub fn channel(&self, splat: usize) -> &[f64] {
        &self.d_channels[splat * self.channels..(splat + 1) * self.channels]
    }
}

/// Per-tile accumulator; `d_conic` is converted to `d_cov2d` after merging.
struct Partial {
    grads: SplatGrads,
    d_conic: Vec<Matrix2<f64>>,
}

/// Analytic backward pass through the compositing of `graph`.
///
/// Tiles are processed in parallel into private buffers which are then
/// summed in tile order, so the result does not depend on thread count.
pub fn backward(graph: &RenderGraph, upstream: &ImageBuffer) -> Result<SplatGrads> {
    let res = graph.resolution();
    if upstream.height() != res.height || upstream.width() != res.width {
        return Err(Error::input(format!(
            "upstream gradient is {}x{}, graph is {}x{}",
            upstream.height(),
            upstream.width(),
            res.height,
            res.width
        )));
    }
    let channels = graph.channels();
    if upstream.channels() != channels {
        return Err(Error::input(format!(
            "upstream gradient has {} channels, graph has {}",
            upstream.channels(),
            channels
        )));
    }
    let n = graph.splat_count();
    let tiles = graph.tiles();

    let partials: Vec<Option<Partial>> = (0..tiles.tile_count())
        .into_par_iter()
        .map(|t| {
            if tiles.lists[t].is_empty() {
                return None;
            }
            let mut part = Partial {
                grads: SplatGrads::zeros(n, channels),
                d_conic: vec![Matrix2::zeros(); n],
            };
            let (x0, x1, y0, y1) = tiles.bounds(t, res);
            let mut suffix = vec![0.0; channels];
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = y * res.width + x;
                    let list = graph.contributors(px);
                    let up = upstream.pixel(px);
                    if list.is_empty() || up.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    suffix.iter_mut().for_each(|s| *s = 0.0);
                    let p = pixel_center(x, y);
                    for e in list.iter().rev() {
                        let s = e.splat as usize;
                        let ch = &graph.channel_values[s * channels..(s + 1) * channels];
                        let w = e.alpha * e.transmittance;
                        let mut d_alpha = 0.0;
                        {
                            let dch = &mut part.grads.d_channels[s * channels..(s + 1) * channels];
                            for c in 0..channels {
                                dch[c] += up[c] * w;
                                d_alpha += up[c] * (ch[c] * e.transmittance - suffix[c] / (1.0 - e.alpha));
                                suffix[c] += ch[c] * w;
                            }
                        }
                        let prep = &graph.prepared[s];
                        let sample = prep.sample_always(p);
                        if sample.clamped {
                            continue;
                        }
                        let g = sample.density;
                        part.grads.d_opacity[s] += d_alpha * g;
                        let d_density = d_alpha * prep.opacity;
                        let ad = prep.conic * sample.offset;
                        part.grads.d_mean2d[s] += d_density * g * ad;
                        part.d_conic[s] += (-0.5 * d_density * g) * (sample.offset * sample.offset.transpose());
                    }
                }
            }
            Some(part)
        })
        .collect();

    let mut grads = SplatGrads::zeros(n, channels);
    let mut d_conic = vec![Matrix2::zeros(); n];
    for part in partials.into_iter().flatten() {
        for (a, b) in grads.d_channels.iter_mut().zip(&part.grads.d_channels) {
            *a += b;
        }
        for i in 0..n {
            grads.d_opacity[i] += part.grads.d_opacity[i];
            grads.d_mean2d[i] += part.grads.d_mean2d[i];
            d_conic[i] += part.d_conic[i];
        }
    }
    for i in 0..n {
        let a = graph.prepared[i].conic;
        grads.d_cov2d[i] = -(a * d_conic[i] * a);
    }
    Ok(grads)
}
