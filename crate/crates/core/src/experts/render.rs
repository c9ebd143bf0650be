use nalgebra::Vector3;

use super::{ExpertModel, ParamGroup};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::raster::{self, ChannelSplat, RenderGraph, SourceId};
use crate::scene::{Camera, Gaussian3D, Projection, View};

/// One expert rendered for one view, with everything its backward pass and
/// the router's weight splatting need.
#[derive(Debug, Clone)]
pub struct ExpertRender {
    pub image: ImageBuffer,
    pub graph: RenderGraph,
    pub gaussians_at_t: Vec<Gaussian3D>,
    /// Color splats in rasterizer input order.
    pub splats: Vec<ChannelSplat>,
    /// Gaussian index of each splat (culled Gaussians have no splat).
    pub splat_gaussian: Vec<u32>,
    pub projections: Vec<Projection>,
    pub camera: Camera,
    pub time: f64,
}

impl ExpertRender {
    /// The visible splats with their channels replaced by `channels_of(i)`
    /// for Gaussian `i`; geometry and opacity are kept.
    pub fn splats_with<F>(&self, mut channels_of: F) -> Vec<ChannelSplat>
    where
        F: FnMut(usize) -> Vec<f64>,
    {
        self.splats
            .iter()
            .zip(&self.splat_gaussian)
            .map(|(s, &g)| ChannelSplat {
                channels: channels_of(g as usize),
                ..s.clone()
            })
            .collect()
    }
}

/// Gradients per parameter group, laid out like [`ExpertModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrads {
    pub color: Vec<f64>,
    pub opacity: Vec<f64>,
    pub motion: Vec<f64>,
    pub network: Vec<f64>,
}

impl ExpertGrads {
    pub fn zeros_like(model: &ExpertModel) -> Self {
        Self {
            color: vec![0.0; model.params(ParamGroup::Color).len()],
            opacity: vec![0.0; model.params(ParamGroup::Opacity).len()],
            motion: vec![0.0; model.params(ParamGroup::Motion).len()],
            network: vec![0.0; model.params(ParamGroup::Network).len()],
        }
    }

    pub fn get(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::Color => &self.color,
            ParamGroup::Opacity => &self.opacity,
            ParamGroup::Motion => &self.motion,
            ParamGroup::Network => &self.network,
        }
    }

    pub fn get_mut(&mut self, group: ParamGroup) -> &mut Vec<f64> {
        match group {
            ParamGroup::Color => &mut self.color,
            ParamGroup::Opacity => &mut self.opacity,
            ParamGroup::Motion => &mut self.motion,
            ParamGroup::Network => &mut self.network,
        }
    }

    /// `self += other`.
    pub fn add(&mut self, other: &ExpertGrads) {
        for g in ParamGroup::ALL {
            for (a, b) in self.get_mut(g).iter_mut().zip(other.get(g)) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in ParamGroup::ALL {
            for a in self.get_mut(g).iter_mut() {
                *a *= s;
            }
        }
    }
}

impl ExpertModel {
    /// Projects the Gaussians at `time` and builds color splats tagged with
    /// expert index `expert`.
    pub fn splats_at(
        &self,
        camera: &Camera,
        time: f64,
        expert: usize,
    ) -> Result<(Vec<Gaussian3D>, Vec<ChannelSplat>, Vec<u32>, Vec<Projection>)> {
        let gaussians = self.gaussians_at(time)?;
        let mut splats = Vec::with_capacity(gaussians.len());
        let mut owner = Vec::with_capacity(gaussians.len());
        let mut projections = Vec::with_capacity(gaussians.len());
        for (i, g) in gaussians.iter().enumerate() {
            if let Some(p) = camera.project(g) {
                splats.push(ChannelSplat {
                    splat: p.splat,
                    channels: g.color().as_slice().to_vec(),
                    opacity: g.opacity(),
                    source: SourceId::new(expert, i),
                });
                owner.push(i as u32);
                projections.push(p);
            }
        }
        Ok((gaussians, splats, owner, projections))
    }

    pub fn render(&self, view: &View) -> Result<ExpertRender> {
        self.render_as(view, 0)
    }

    /// Renders with splat sources tagged as expert `expert`.
    pub fn render_as(&self, view: &View, expert: usize) -> Result<ExpertRender> {
        let (gaussians_at_t, splats, splat_gaussian, projections) = self.splats_at(&view.camera, view.time, expert)?;
        let (image, graph) = raster::rasterize_channels(&splats, 3, view.camera.resolution())?;
        Ok(ExpertRender {
            image,
            graph,
            gaussians_at_t,
            splats,
            splat_gaussian,
            projections,
            camera: view.camera.clone(),
            time: view.time,
        })
    }

    /// Gradients of `Σ_u d_image(u)·render(u)` w.r.t. every parameter group,
    /// using the graph cached in `render`.
    pub fn backward(&self, render: &ExpertRender, d_image: &ImageBuffer) -> Result<ExpertGrads> {
        if render.gaussians_at_t.len() != self.len() || render.graph.splat_count() != render.splats.len() {
            return Err(Error::state("render was not produced by this expert"));
        }
        let sg = raster::backward(&render.graph, d_image)?;
        let mut grads = ExpertGrads::zeros_like(self);
        for (s, &g) in render.splat_gaussian.iter().enumerate() {
            let g = g as usize;
            for c in 0..3 {
                grads.color[3 * g + c] += sg.d_channels[3 * s + c];
            }
            grads.opacity[g] += sg.d_opacity[s];
            let d_mean: Vector3<f64> = render.projections[s].mean_gradient(&render.camera, &sg.d_mean2d[s], &sg.d_cov2d[s]);
            self.accumulate_mean_grad(g, render.time, &d_mean, &mut grads);
        }
        Ok(grads)
    }
}
