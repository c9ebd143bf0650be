use super::{pixel_center, ChannelSplat, Prepared, SourceId, TileGrid};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scene::Resolution;

/// One splat's contribution at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contributor {
    /// Index into the input splat list.
    pub splat: u32,
    pub alpha: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
}

/// Intermediates of one rasterization, reused by backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGraph {
    resolution: Resolution,
    channels: usize,
    pub(crate) prepared: Vec<Prepared>,
    pub(crate) channel_values: Vec<f64>,
    offsets: Vec<usize>,
    entries: Vec<Contributor>,
    final_t: Vec<f64>,
    order: Vec<u32>,
    tiles: TileGrid,
}

impl RenderGraph {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        resolution: Resolution,
        channels: usize,
        prepared: Vec<Prepared>,
        channel_values: Vec<f64>,
        per_pixel: Vec<Vec<Contributor>>,
        final_t: Vec<f64>,
        order: Vec<u32>,
        tiles: TileGrid,
    ) -> Self {
        let mut offsets = Vec::with_capacity(per_pixel.len() + 1);
        offsets.push(0);
        let total: usize = per_pixel.iter().map(Vec::len).sum();
        let mut entries = Vec::with_capacity(total);
        for list in per_pixel {
            entries.extend(list);
            offsets.push(entries.len());
        }
        Self {
            resolution,
            channels,
            prepared,
            channel_values,
            offsets,
            entries,
            final_t,
            order,
            tiles,
        }
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn splat_count(&self) -> usize {
        self.prepared.len()
    }

    pub fn source(&self, splat: usize) -> SourceId {
        self.prepared[splat].source
    }

    pub fn sources(&self) -> impl Iterator<Item = SourceId> + '_ {
        self.prepared.iter().map(|p| p.source)
    }

    /// Input indices in front-to-back order.
    pub fn sorted_order(&self) -> &[u32] {
        &self.order
    }

    pub fn tiles(&self) -> &TileGrid {
        &self.tiles
    }

    /// Contributors at flat pixel index `px`, front to back.
    pub fn contributors(&self, px: usize) -> &[Contributor] {
        &self.entries[self.offsets[px]..self.offsets[px + 1]]
    }

    pub fn final_transmittance(&self, px: usize) -> f64 {
        self.final_t[px]
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// One-channel plane of `1 - T_final`.
    pub fn coverage(&self) -> ImageBuffer {
        let data = self.final_t.iter().map(|t| 1.0 - t).collect();
        ImageBuffer::from_vec(self.resolution.height, self.resolution.width, 1, data).expect("sized by resolution")
    }

    /// Per-splat accumulated blending weight `Σ_u α T` over the image.
    pub fn footprint_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.prepared.len()];
        for e in &self.entries {
            mass[e.splat as usize] += e.alpha * e.transmittance;
        }
        mass
    }

    /// Composites new per-splat channel values through the recorded alphas
    /// and transmittances. `values` is `splat_count x channels`, row-major.
    pub fn composite_channels(&self, values: &[f64], channels: usize) -> Result<ImageBuffer> {
        if values.len() != self.prepared.len() * channels {
            return Err(Error::input(format!(
                "expected {} channel values, got {}",
                self.prepared.len() * channels,
                values.len()
            )));
        }
        let res = self.resolution;
        let mut out = ImageBuffer::zeros(res.height, res.width, channels);
        for px in 0..res.pixels() {
            let o = out.pixel_mut(px);
            for e in self.contributors(px) {
                let w = e.alpha * e.transmittance;
                let ch = &values[e.splat as usize * channels..(e.splat as usize + 1) * channels];
                for (a, c) in o.iter_mut().zip(ch) {
                    *a += c * w;
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `Σ_u upstream(u)·composite(values)(u)` w.r.t. the channel
    /// values (geometry and opacity held fixed).
    pub fn channel_backward(&self, upstream: &ImageBuffer) -> Result<Vec<f64>> {
        let res = self.resolution;
        if upstream.height() != res.height || upstream.width() != res.width {
            return Err(Error::input("upstream gradient resolution mismatch"));
        }
        let channels = upstream.channels();
        let mut grads = vec![0.0; self.prepared.len() * channels];
        for px in 0..res.pixels() {
            let g = upstream.pixel(px);
            for e in self.contributors(px) {
                let w = e.alpha * e.transmittance;
                let d = &mut grads[e.splat as usize * channels..(e.splat as usize + 1) * channels];
                for (a, u) in d.iter_mut().zip(g) {
                    *a += u * w;
                }
            }
        }
        Ok(grads)
    }

    /// Re-renders `splats` (same count and order as the original input) using
    /// the recorded per-pixel contributor lists, recomputing alphas from the
    /// new splat parameters. With the original splats this reproduces the
    /// forward image exactly.
    pub fn replay(&self, splats: &[ChannelSplat]) -> Result<ImageBuffer> {
        if splats.len() != self.prepared.len() {
            return Err(Error::input(format!(
                "replay needs {} splats, got {}",
                self.prepared.len(),
                splats.len()
            )));
        }
        let (prepared, channels) = super::prepare_all(splats)?;
        let res = self.resolution;
        let mut out = ImageBuffer::zeros(res.height, res.width, channels);
        for y in 0..res.height {
            for x in 0..res.width {
                let px = y * res.width + x;
                let p = pixel_center(x, y);
                let mut t = 1.0;
                let o = out.pixel_mut(px);
                for e in self.contributors(px) {
                    let s = e.splat as usize;
                    let alpha = prepared[s].sample_always(p).alpha;
                    let w = alpha * t;
                    for (a, c) in o.iter_mut().zip(&splats[s].channels) {
                        *a += c * w;
                    }
                    t *= 1.0 - alpha;
                }
            }
        }
        Ok(out)
    }
}
