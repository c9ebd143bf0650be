//! A router together with the experts it blends.

use crate::error::{Error, Result};
use crate::experts::{ExpertModel, ExpertRender};
use crate::fused::{self, RenderStats};
use crate::image::ImageBuffer;
use crate::router::{GatingMap, Router, RouterForward, RouterKind};
use crate::scene::View;

/// How expert images are produced for one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RenderMode {
    /// One projection and sort per expert.
    #[default]
    MultiPass,
    /// One merged projection and sort for all experts.
    SinglePass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub experts: Vec<ExpertModel>,
    pub router: Router,
}

/// Everything produced by rendering the mixture for one view.
#[derive(Debug, Clone)]
pub struct MoeRender {
    pub renders: Vec<ExpertRender>,
    pub forward: RouterForward,
    pub stats: RenderStats,
}

impl MoeRender {
    pub fn image(&self) -> &ImageBuffer {
        &self.forward.image
    }

    /// Per-pixel gates; `None` for the opacity-gating baseline.
    pub fn gating(&self) -> Option<&GatingMap> {
        self.forward.gating.as_ref()
    }
}

impl MoeModel {
    pub fn new(experts: Vec<ExpertModel>, router: Router) -> Result<Self> {
        let counts: Vec<usize> = experts.iter().map(ExpertModel::len).collect();
        if router.experts() != experts.len() {
            return Err(Error::input(format!(
                "router expects {} experts, got {}",
                router.experts(),
                experts.len()
            )));
        }
        let covered = match &router {
            Router::VolumeAware { weights, .. } => weights.counts() == counts,
            Router::Volume { logits } => logits.counts() == counts,
            Router::Pixel { .. } => true,
        };
        if !covered {
            return Err(Error::input("router per-gaussian parameters do not match expert sizes"));
        }
        Ok(Self { experts, router })
    }

    pub fn router_kind(&self) -> RouterKind {
        self.router.kind()
    }

    pub fn gaussian_counts(&self) -> Vec<usize> {
        self.experts.iter().map(ExpertModel::len).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.experts.iter().map(ExpertModel::parameter_count).sum::<usize>() + self.router.parameter_count()
    }

    pub fn render_experts(&self, view: &View, mode: RenderMode, stats: &mut RenderStats) -> Result<Vec<ExpertRender>> {
        match mode {
            RenderMode::MultiPass => fused::render_experts_separately(&self.experts, view, stats),
            RenderMode::SinglePass => fused::render_experts_fused(&self.experts, view, stats),
        }
    }

    pub fn render(&self, view: &View) -> Result<MoeRender> {
        self.render_with(view, RenderMode::MultiPass)
    }

    pub fn render_with(&self, view: &View, mode: RenderMode) -> Result<MoeRender> {
        let mut stats = RenderStats::default();
        let renders = self.render_experts(view, mode, &mut stats)?;
        let forward = self.router.forward(view, &renders)?;
        Ok(MoeRender { renders, forward, stats })
    }

    /// Keeps the Gaussians selected by `keep[k][i]` in experts and router.
    pub fn retain(&self, keep: &[Vec<bool>]) -> Result<Self> {
        if keep.len() != self.experts.len() {
            return Err(Error::input("one keep mask per expert required"));
        }
        let experts = self.experts.iter().zip(keep).map(|(e, m)| e.retain(m)).collect::<Result<_>>()?;
        Self::new(experts, self.router.retain(keep)?)
    }
}
