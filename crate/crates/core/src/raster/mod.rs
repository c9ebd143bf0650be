//! Tile-based rasterization of channel-generic Gaussian splats.
//!
//! Splats are sorted once by `(depth, expert, gaussian)`, binned into 16x16
//! tiles by the bounding box of their 3σ ellipse, and composited front to
//! back per pixel. The forward pass records every contributor (alpha and
//! the transmittance in front of it) in a [`RenderGraph`], which the
//! backward pass and channel re-compositing reuse.

mod backward;
mod graph;

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

pub use backward::{backward, SplatGrads};
pub use graph::{Contributor, RenderGraph};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scene::{Resolution, Splat2D};

pub const TILE_SIZE: usize = 16;
/// Upper clamp applied to every alpha before compositing.
pub const ALPHA_MAX: f64 = 0.999;
/// Compositing stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;
/// Splat support radius in standard deviations.
pub const SUPPORT_SIGMA: f64 = 3.0;

/// Identifies the Gaussian a splat came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SourceId {
    pub expert: u32,
    pub gaussian: u32,
}

impl SourceId {
    pub fn new(expert: usize, gaussian: usize) -> Self {
        Self {
            expert: expert as u32,
            gaussian: gaussian as u32,
        }
    }
}

/// A projected splat carrying an arbitrary channel vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSplat {
    pub splat: Splat2D,
    pub channels: Vec<f64>,
    pub opacity: f64,
    pub source: SourceId,
}

/// Per-splat quantities derived once per rasterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Prepared {
    pub mean: Vector2<f64>,
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub depth: f64,
    pub source: SourceId,
    /// Half extents of the 3σ ellipse's bounding box.
    pub extent: Vector2<f64>,
}

/// Evaluated splat at one pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Sample {
    pub alpha: f64,
    pub density: f64,
    pub clamped: bool,
    pub offset: Vector2<f64>,
}

impl Prepared {
    pub fn new(s: &ChannelSplat) -> Result<Self> {
        let cov = s.splat.cov;
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        if !(det > 0.0 && cov[(0, 0)] > 0.0) || !cov.iter().all(|v| v.is_finite()) {
            return Err(Error::input(format!("splat {:?} covariance is not positive definite", s.source)));
        }
        if !s.splat.depth.is_finite() || !s.splat.mean.iter().all(|v| v.is_finite()) {
            return Err(Error::input(format!("splat {:?} has non-finite depth or mean", s.source)));
        }
        if !(0.0..=1.0).contains(&s.opacity) {
            return Err(Error::input(format!("splat {:?} opacity {} outside [0, 1]", s.source, s.opacity)));
        }
        let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        Ok(Self {
            mean: s.splat.mean,
            conic,
            opacity: s.opacity,
            depth: s.splat.depth,
            source: s.source,
            extent: Vector2::new(
                SUPPORT_SIGMA * cov[(0, 0)].sqrt(),
                SUPPORT_SIGMA * cov[(1, 1)].sqrt(),
            ),
        })
    }

    /// Density and alpha at a continuous image point; `None` outside the
    /// 3σ support.
    #[inline]
    pub fn sample_at(&self, p: Vector2<f64>) -> Option<Sample> {
        let d = p - self.mean;
        let a = &self.conic;
        let q = a[(0, 0)] * d.x * d.x + (a[(0, 1)] + a[(1, 0)]) * d.x * d.y + a[(1, 1)] * d.y * d.y;
        if q > SUPPORT_SIGMA * SUPPORT_SIGMA {
            return None;
        }
        Some(self.sample_unchecked(d, q))
    }

    /// Same as [`Self::sample_at`] but without the support test.
    #[inline]
    pub fn sample_always(&self, p: Vector2<f64>) -> Sample {
        let d = p - self.mean;
        let a = &self.conic;
        let q = a[(0, 0)] * d.x * d.x + (a[(0, 1)] + a[(1, 0)]) * d.x * d.y + a[(1, 1)] * d.y * d.y;
        self.sample_unchecked(d, q)
    }

    #[inline]
    fn sample_unchecked(&self, d: Vector2<f64>, q: f64) -> Sample {
        let density = (-0.5 * q).exp();
        let raw = self.opacity * density;
        Sample {
            alpha: raw.min(ALPHA_MAX),
            density,
            clamped: raw > ALPHA_MAX,
            offset: d,
        }
    }

    /// Inclusive pixel-index ranges whose centers fall inside the bounding box.
    fn pixel_range(&self, res: Resolution) -> Option<(usize, usize, usize, usize)> {
        let x0 = (self.mean.x - self.extent.x - 0.5).ceil().max(0.0);
        let x1 = (self.mean.x + self.extent.x - 0.5).floor().min(res.width as f64 - 1.0);
        let y0 = (self.mean.y - self.extent.y - 0.5).ceil().max(0.0);
        let y1 = (self.mean.y + self.extent.y - 0.5).floor().min(res.height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
    }
}

#[inline]
pub(crate) fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Alpha of a splat at image point `u` (pixel centers sit at `i + 0.5`).
pub fn alpha_of(splat: &ChannelSplat, u: &Vector2<f64>) -> f64 {
    match Prepared::new(splat) {
        Ok(p) => p.sample_at(*u).map_or(0.0, |s| s.alpha),
        Err(_) => 0.0,
    }
}

pub(crate) fn prepare_all(splats: &[ChannelSplat]) -> Result<(Vec<Prepared>, usize)> {
    let channels = splats.first().map_or(0, |s| s.channels.len());
    prepare_with(splats, channels).map(|p| (p, channels))
}

pub(crate) fn prepare_with(splats: &[ChannelSplat], channels: usize) -> Result<Vec<Prepared>> {
    if let Some(bad) = splats.iter().find(|s| s.channels.len() != channels) {
        return Err(Error::input(format!(
            "splat {:?} has {} channels, expected {}",
            bad.source,
            bad.channels.len(),
            channels
        )));
    }
    splats.iter().map(Prepared::new).collect()
}

#[inline]
pub(crate) fn depth_key_cmp(a: &Prepared, b: &Prepared) -> std::cmp::Ordering {
    a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source))
}

/// Indices of `prepared` sorted front to back with deterministic tie-breaking.
pub(crate) fn sort_order(prepared: &[Prepared]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..prepared.len() as u32).collect();
    order.sort_by(|&a, &b| depth_key_cmp(&prepared[a as usize], &prepared[b as usize]));
    order
}

/// Per-tile splat lists, each in global depth order.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel bounds `[x0, x1) x [y0, y1)` of tile `t`.
    pub fn bounds(&self, t: usize, res: Resolution) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, (x0 + TILE_SIZE).min(res.width), y0, (y0 + TILE_SIZE).min(res.height))
    }
}

pub(crate) fn bin_tiles(prepared: &[Prepared], order: &[u32], res: Resolution) -> TileGrid {
    let tiles_x = res.width.div_ceil(TILE_SIZE);
    let tiles_y = res.height.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &i in order {
        if let Some((x0, x1, y0, y1)) = prepared[i as usize].pixel_range(res) {
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    lists[ty * tiles_x + tx].push(i);
                }
            }
        }
    }
    TileGrid {
        tiles_x,
        tiles_y,
        lists,
    }
}

/// Forward compositing of one pixel. Appends contributors and returns the
/// final transmittance.
#[inline]
fn composite_pixel(
    prepared: &[Prepared],
    channel_values: &[f64],
    channels: usize,
    list: &[u32],
    p: Vector2<f64>,
    out: &mut [f64],
    contributors: &mut Vec<Contributor>,
) -> f64 {
    let mut t = 1.0;
    for &s in list {
        let Some(sample) = prepared[s as usize].sample_at(p) else {
            continue;
        };
        let w = sample.alpha * t;
        let ch = &channel_values[s as usize * channels..(s as usize + 1) * channels];
        for (o, c) in out.iter_mut().zip(ch) {
            *o += c * w;
        }
        contributors.push(Contributor {
            splat: s,
            alpha: sample.alpha,
            transmittance: t,
        });
        t *= 1.0 - sample.alpha;
        if t < T_MIN {
            break;
        }
    }
    t
}

struct TileOutput {
    pixels: Vec<usize>,
    values: Vec<f64>,
    lists: Vec<Vec<Contributor>>,
    final_t: Vec<f64>,
}

/// Renders `splats` into an `H x W x C` image and records the render graph.
/// The channel count is taken from the first splat (zero for an empty list).
pub fn rasterize(splats: &[ChannelSplat], res: Resolution) -> Result<(ImageBuffer, RenderGraph)> {
    let channels = splats.first().map_or(0, |s| s.channels.len());
    rasterize_channels(splats, channels, res)
}

/// Like [`rasterize`] but with an explicit channel count, so an empty splat
/// list still yields an `H x W x channels` image.
pub fn rasterize_channels(
    splats: &[ChannelSplat],
    channels: usize,
    res: Resolution,
) -> Result<(ImageBuffer, RenderGraph)> {
    if res.height == 0 || res.width == 0 {
        return Err(Error::input("resolution must be positive"));
    }
    let prepared = prepare_with(splats, channels)?;
    let channel_values: Vec<f64> = splats.iter().flat_map(|s| s.channels.iter().copied()).collect();
    let order = sort_order(&prepared);
    let tiles = bin_tiles(&prepared, &order, res);

    let outputs: Vec<TileOutput> = (0..tiles.tile_count())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = tiles.bounds(t, res);
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TileOutput {
                pixels: Vec::with_capacity(n),
                values: vec![0.0; n * channels],
                lists: Vec::with_capacity(n),
                final_t: Vec::with_capacity(n),
            };
            let list = &tiles.lists[t];
            let mut k = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut contributors = Vec::new();
                    let tf = composite_pixel(
                        &prepared,
                        &channel_values,
                        channels,
                        list,
                        pixel_center(x, y),
                        &mut out.values[k * channels..(k + 1) * channels],
                        &mut contributors,
                    );
                    out.pixels.push(y * res.width + x);
                    out.lists.push(contributors);
                    out.final_t.push(tf);
                    k += 1;
                }
            }
            out
        })
        .collect();

    let mut image = ImageBuffer::zeros(res.height, res.width, channels);
    let mut per_pixel: Vec<Vec<Contributor>> = vec![Vec::new(); res.pixels()];
    let mut final_t = vec![1.0; res.pixels()];
    for tile in outputs {
        for (k, px) in tile.pixels.iter().enumerate() {
            image
                .pixel_mut(*px)
                .copy_from_slice(&tile.values[k * channels..(k + 1) * channels]);
            final_t[*px] = tile.final_t[k];
        }
        for (px, list) in tile.pixels.into_iter().zip(tile.lists) {
            per_pixel[px] = list;
        }
    }
    let graph = RenderGraph::new(res, channels, prepared, channel_values, per_pixel, final_t, order, tiles);
    Ok((image, graph))
}
