//! Per-pixel routing over expert renders.
//!
//! The volume-aware router splats learnable per-Gaussian weights into pixel
//! planes through each expert's own render graph, refines them with a small
//! shared conv net and takes a per-pixel softmax over experts. Two baselines
//! are provided for comparison: a pure image-space router and a router that
//! gates Gaussian opacities before rasterization.

mod conv;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertModel, ExpertRender};
use crate::image::ImageBuffer;
use crate::raster::{self, ChannelSplat, RenderGraph};
use crate::scene::{Camera, View};

pub use conv::{ConvNet, ConvTrace};

/// Hidden width of the refinement and pixel-baseline networks.
pub const NET_HIDDEN: usize = 8;
/// Refinement input planes: `w_dir`, `w_time` and the world ray.
pub const PHI_INPUTS: usize = 5;
/// Pixel-baseline input planes: normalized x, y, time and the world ray.
pub const PIXEL_INPUTS: usize = 6;
/// Gate logit treated as "fully open" by the volume baseline.
pub const GATE_SATURATION: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    VolumeAware,
    Pixel,
    Volume,
}

impl RouterKind {
    pub const ALL: [RouterKind; 3] = [RouterKind::VolumeAware, RouterKind::Pixel, RouterKind::Volume];

    pub fn as_str(self) -> &'static str {
        match self {
            RouterKind::VolumeAware => "volume_aware",
            RouterKind::Pixel => "pixel",
            RouterKind::Volume => "volume",
        }
    }
}

impl std::fmt::Display for RouterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RouterKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown router kind `{s}`")))
    }
}

/// Trainable router parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouterGroup {
    W,
    WDir,
    WTime,
    /// Refinement net (volume-aware) or logit net (pixel baseline).
    Net,
    /// Per-Gaussian gate logits of the volume baseline.
    Gate,
}

impl RouterGroup {
    pub const ALL: [RouterGroup; 5] = [
        RouterGroup::W,
        RouterGroup::WDir,
        RouterGroup::WTime,
        RouterGroup::Net,
        RouterGroup::Gate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RouterGroup::W => "w",
            RouterGroup::WDir => "w_dir",
            RouterGroup::WTime => "w_time",
            RouterGroup::Net => "net",
            RouterGroup::Gate => "gate",
        }
    }
}

/// Per-Gaussian scalars stored flat across experts; expert `k` owns
/// `offsets[k]..offsets[k + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExpert {
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl PerExpert {
    pub fn zeros(counts: &[usize]) -> Self {
        let mut offsets = vec![0];
        for c in counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        let n = *offsets.last().unwrap();
        Self {
            offsets,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(counts: &[usize], values: Vec<f64>) -> Result<Self> {
        let mut out = Self::zeros(counts);
        if values.len() != out.values.len() {
            return Err(Error::input(format!(
                "expected {} per-gaussian values, got {}",
                out.values.len(),
                values.len()
            )));
        }
        out.values = values;
        Ok(out)
    }

    pub fn experts(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Flat index of expert `k`'s first value.
    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn expert(&self, k: usize) -> &[f64] {
        &self.values[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn expert_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn retain(&self, keep: &[Vec<bool>]) -> Self {
        let counts: Vec<usize> = keep.iter().map(|k| k.iter().filter(|&&b| b).count()).collect();
        let values = (0..self.experts())
            .flat_map(|k| self.expert(k).iter().zip(&keep[k]).filter(|(_, &b)| b).map(|(v, _)| *v))
            .collect();
        Self::from_values(&counts, values).expect("sized from mask")
    }
}

/// The learnable per-Gaussian weight triplets `(w, w_dir, w_time)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerGaussianWeights {
    pub w: PerExpert,
    pub w_dir: PerExpert,
    pub w_time: PerExpert,
}

impl PerGaussianWeights {
    pub fn zeros(counts: &[usize]) -> Self {
        Self {
            w: PerExpert::zeros(counts),
            w_dir: PerExpert::zeros(counts),
            w_time: PerExpert::zeros(counts),
        }
    }

    /// `w = 0`, `w_dir, w_time ~ N(0, 0.01²)`.
    pub fn init(counts: &[usize], rng: &mut impl Rng) -> Self {
        let mut out = Self::zeros(counts);
        let normal = Normal::new(0.0, 0.01).expect("positive std");
        for v in out.w_dir.values_mut().iter_mut().chain(out.w_time.values_mut().iter_mut()) {
            *v = normal.sample(rng);
        }
        out
    }

    pub fn experts(&self) -> usize {
        self.w.experts()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.w.counts()
    }

    /// The splatted channel vector `[w, w_dir, t·w_time]` of Gaussian `i` of expert `k`.
    pub fn channels(&self, k: usize, i: usize, t: f64) -> [f64; 3] {
        [self.w.expert(k)[i], self.w_dir.expert(k)[i], t * self.w_time.expert(k)[i]]
    }

    pub fn retain(&self, keep: &[Vec<bool>]) -> Self {
        Self {
            w: self.w.retain(keep),
            w_dir: self.w_dir.retain(keep),
            w_time: self.w_time.retain(keep),
        }
    }

    fn check_counts(&self, counts: &[usize]) -> Result<()> {
        if self.counts() != counts {
            return Err(Error::input(format!(
                "router weights cover {:?} gaussians, experts have {:?}",
                self.counts(),
                counts
            )));
        }
        Ok(())
    }
}

/// Per-pixel gates `G'` (softmax of `logits` over experts), one channel per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingMap {
    pub gates: ImageBuffer,
    pub logits: ImageBuffer,
}

impl GatingMap {
    /// Per-pixel softmax with max subtraction.
    pub fn from_logits(logits: ImageBuffer) -> Result<Self> {
        if logits.channels() == 0 {
            return Err(Error::input("gating needs at least one expert"));
        }
        let mut gates = logits.clone();
        for px in 0..gates.pixel_count() {
            let g = gates.pixel_mut(px);
            let m = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in g.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in g.iter_mut() {
                *v /= s;
            }
        }
        Ok(Self { gates, logits })
    }

    pub fn experts(&self) -> usize {
        self.gates.channels()
    }

    pub fn gate(&self, k: usize) -> ImageBuffer {
        self.gates.plane(k)
    }

    /// `dR_k = G_k (dG_k − Σ_j G_j dG_j)` per pixel.
    pub fn softmax_backward(&self, d_gates: &ImageBuffer) -> ImageBuffer {
        let mut out = d_gates.clone();
        for px in 0..out.pixel_count() {
            let g = self.gates.pixel(px);
            let d = out.pixel_mut(px);
            let dot: f64 = g.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
            for (dv, gv) in d.iter_mut().zip(g) {
                *dv = gv * (*dv - dot);
            }
        }
        out
    }
}

/// Three-channel plane of world-frame pixel rays.
pub fn ray_planes(camera: &Camera) -> ImageBuffer {
    let res = camera.resolution();
    let mut out = ImageBuffer::zeros(res.height, res.width, 3);
    for y in 0..res.height {
        for x in 0..res.width {
            let r = camera.pixel_center_ray(x, y);
            out.pixel_mut(y * res.width + x).copy_from_slice(r.as_slice());
        }
    }
    out
}

fn weight_values(weights: &PerGaussianWeights, k: usize, render: &ExpertRender) -> Vec<f64> {
    render
        .splat_gaussian
        .iter()
        .flat_map(|&g| weights.channels(k, g as usize, render.time))
        .collect()
}

/// Rasterizes each expert's weight twins (geometry and opacity of the
/// expert's Gaussians at the view time, channels `[w, w_dir, t·w_time]`).
pub fn splat_weights(weights: &PerGaussianWeights, experts: &[ExpertModel], view: &View) -> Result<Vec<ImageBuffer>> {
    weights.check_counts(&experts.iter().map(|e| e.len()).collect::<Vec<_>>())?;
    experts
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let (_, splats, owner, _) = e.splats_at(&view.camera, view.time, k)?;
            let twins: Vec<ChannelSplat> = splats
                .into_iter()
                .zip(owner)
                .map(|(s, g)| ChannelSplat {
                    channels: weights.channels(k, g as usize, view.time).to_vec(),
                    ..s
                })
                .collect();
            Ok(raster::rasterize_channels(&twins, 3, view.resolution())?.0)
        })
        .collect()
}

/// Weight planes composited through the experts' cached color graphs; equal
/// to [`splat_weights`] because the twins share geometry and opacity.
pub fn splat_weights_cached(weights: &PerGaussianWeights, renders: &[ExpertRender]) -> Result<Vec<ImageBuffer>> {
    weights.check_counts(&renders.iter().map(|r| r.gaussians_at_t.len()).collect::<Vec<_>>())?;
    renders
        .iter()
        .enumerate()
        .map(|(k, r)| r.graph.composite_channels(&weight_values(weights, k, r), 3))
        .collect()
}

fn phi_input(planes: &ImageBuffer, rays: &ImageBuffer) -> ImageBuffer {
    let (h, w, _) = planes.shape();
    let mut x = ImageBuffer::zeros(h, w, PHI_INPUTS);
    for px in 0..planes.pixel_count() {
        let p = planes.pixel(px);
        let r = rays.pixel(px);
        x.pixel_mut(px).copy_from_slice(&[p[1], p[2], r[0], r[1], r[2]]);
    }
    x
}

fn check_same_resolution(images: &[&ImageBuffer]) -> Result<()> {
    let Some(first) = images.first() else {
        return Err(Error::input("need at least one expert"));
    };
    if images.iter().any(|i| (i.height(), i.width()) != (first.height(), first.width())) {
        return Err(Error::input("expert planes differ in resolution"));
    }
    Ok(())
}

struct VolumeAwarePass {
    gating: GatingMap,
    traces: Vec<ConvTrace>,
}

fn volume_aware_pass(planes: &[ImageBuffer], view: &View, phi: &ConvNet) -> Result<VolumeAwarePass> {
    check_same_resolution(&planes.iter().collect::<Vec<_>>())?;
    let rays = ray_planes(&view.camera);
    if rays.shape().0 != planes[0].height() || rays.shape().1 != planes[0].width() {
        return Err(Error::input("planes do not match the view resolution"));
    }
    let (h, w) = (rays.height(), rays.width());
    let mut logits = ImageBuffer::zeros(h, w, planes.len());
    let mut traces = Vec::with_capacity(planes.len());
    for (k, p) in planes.iter().enumerate() {
        let (refine, trace) = phi.forward(&phi_input(p, &rays))?;
        for px in 0..h * w {
            logits.pixel_mut(px)[k] = p.pixel(px)[0] + refine.data()[px];
        }
        traces.push(trace);
    }
    Ok(VolumeAwarePass {
        gating: GatingMap::from_logits(logits)?,
        traces,
    })
}

/// `R'_k = w_2D,k + Φ(w_2D^dir,k, w_2D^time,k, r)` followed by a per-pixel softmax.
pub fn route_volume_aware(planes: &[ImageBuffer], view: &View, phi: &ConvNet) -> Result<GatingMap> {
    Ok(volume_aware_pass(planes, view, phi)?.gating)
}

/// `I = Σ_k G'_k · I_k`.
pub fn blend(gating: &GatingMap, images: &[ImageBuffer]) -> Result<ImageBuffer> {
    if images.len() != gating.experts() {
        return Err(Error::input(format!(
            "{} gating planes for {} expert images",
            gating.experts(),
            images.len()
        )));
    }
    let (h, w, _) = gating.gates.shape();
    let c = images[0].channels();
    if images.iter().any(|i| i.shape() != (h, w, c)) {
        return Err(Error::input("expert images do not match the gating resolution"));
    }
    let mut out = ImageBuffer::zeros(h, w, c);
    for px in 0..h * w {
        let g = gating.gates.pixel(px);
        let o = out.pixel_mut(px);
        for (k, img) in images.iter().enumerate() {
            for (ov, iv) in o.iter_mut().zip(img.pixel(px)) {
                *ov += g[k] * iv;
            }
        }
    }
    Ok(out)
}

/// `dG_k(u) = Σ_c dI_c(u)·I_k,c(u)`.
fn blend_backward(d_image: &ImageBuffer, images: &[&ImageBuffer]) -> ImageBuffer {
    let (h, w, _) = d_image.shape();
    let mut d = ImageBuffer::zeros(h, w, images.len());
    for px in 0..h * w {
        let up = d_image.pixel(px);
        let o = d.pixel_mut(px);
        for (k, img) in images.iter().enumerate() {
            o[k] = up.iter().zip(img.pixel(px)).map(|(a, b)| a * b).sum();
        }
    }
    d
}

/// Input planes of the pixel baseline: normalized pixel coordinates, time,
/// and the world ray. Nothing Gaussian-derived.
pub fn pixel_inputs(view: &View) -> ImageBuffer {
    let rays = ray_planes(&view.camera);
    let (h, w) = (rays.height(), rays.width());
    ImageBuffer::from_fn(h, w, PIXEL_INPUTS, |y, x, c| match c {
        0 => (x as f64 + 0.5) / w as f64 * 2.0 - 1.0,
        1 => (y as f64 + 0.5) / h as f64 * 2.0 - 1.0,
        2 => view.time,
        _ => rays.get(y, x, c - 3),
    })
}

/// Image-space router: a conv net over pixel coordinates, time and rays.
pub fn route_pixel_baseline(view: &View, net: &ConvNet) -> Result<GatingMap> {
    let (logits, _) = net.forward(&pixel_inputs(view))?;
    GatingMap::from_logits(logits)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
struct VolumePass {
    image: ImageBuffer,
    /// Per expert: the `rgb + coverage` render and its graph.
    layers: Vec<(ImageBuffer, RenderGraph)>,
    /// `max(1, Σ_k coverage_k)` per pixel.
    norm: Vec<f64>,
}

fn volume_pass(renders: &[ExpertRender], logits: &PerExpert) -> Result<VolumePass> {
    let counts: Vec<usize> = renders.iter().map(|r| r.gaussians_at_t.len()).collect();
    if logits.counts() != counts {
        return Err(Error::input("one gate logit per gaussian required"));
    }
    let Some(first) = renders.first() else {
        return Err(Error::input("need at least one expert"));
    };
    let res = first.graph.resolution();
    let mut layers = Vec::with_capacity(renders.len());
    for (k, r) in renders.iter().enumerate() {
        let gated: Vec<ChannelSplat> = r
            .splats
            .iter()
            .zip(&r.splat_gaussian)
            .map(|(s, &g)| {
                let mut channels = s.channels.clone();
                channels.push(1.0);
                ChannelSplat {
                    channels,
                    opacity: s.opacity * sigmoid(logits.expert(k)[g as usize]),
                    ..s.clone()
                }
            })
            .collect();
        layers.push(raster::rasterize_channels(&gated, 4, res)?);
    }
    let mut image = ImageBuffer::zeros(res.height, res.width, 3);
    let mut norm = vec![1.0; res.pixels()];
    for px in 0..res.pixels() {
        let cov: f64 = layers.iter().map(|(img, _)| img.pixel(px)[3]).sum();
        norm[px] = cov.max(1.0);
        let o = image.pixel_mut(px);
        for (img, _) in &layers {
            for c in 0..3 {
                o[c] += img.pixel(px)[c];
            }
        }
        for v in o.iter_mut() {
            *v /= norm[px];
        }
    }
    Ok(VolumePass { image, layers, norm })
}

/// Opacity-gating baseline: each Gaussian's opacity is scaled by
/// `sigmoid(logit)` before rasterization, the K renders are summed and
/// normalized by their summed alpha coverage (clamped at 1).
pub fn route_volume_baseline(renders: &[ExpertRender], logits: &PerExpert) -> Result<ImageBuffer> {
    Ok(volume_pass(renders, logits)?.image)
}

/// Router parameters, one variant per router kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Router {
    VolumeAware { weights: PerGaussianWeights, phi: ConvNet },
    Pixel { net: ConvNet },
    Volume { logits: PerExpert },
}

/// Cached forward state for [`Router::backward`].
#[derive(Debug, Clone)]
pub struct RouterForward {
    pub image: ImageBuffer,
    /// `None` for the volume baseline, which has no per-pixel gates.
    pub gating: Option<GatingMap>,
    cache: Cache,
}

#[derive(Debug, Clone)]
enum Cache {
    VolumeAware { traces: Vec<ConvTrace> },
    Pixel { trace: ConvTrace },
    Volume { pass: VolumePass },
}

/// Gradients laid out like [`Router::params`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RouterGrads {
    pub w: Vec<f64>,
    pub w_dir: Vec<f64>,
    pub w_time: Vec<f64>,
    pub net: Vec<f64>,
    pub gate: Vec<f64>,
}

impl RouterGrads {
    pub fn zeros_like(router: &Router) -> Self {
        let len = |g| router.params(g).len();
        Self {
            w: vec![0.0; len(RouterGroup::W)],
            w_dir: vec![0.0; len(RouterGroup::WDir)],
            w_time: vec![0.0; len(RouterGroup::WTime)],
            net: vec![0.0; len(RouterGroup::Net)],
            gate: vec![0.0; len(RouterGroup::Gate)],
        }
    }

    pub fn get(&self, group: RouterGroup) -> &[f64] {
        match group {
            RouterGroup::W => &self.w,
            RouterGroup::WDir => &self.w_dir,
            RouterGroup::WTime => &self.w_time,
            RouterGroup::Net => &self.net,
            RouterGroup::Gate => &self.gate,
        }
    }

    pub fn get_mut(&mut self, group: RouterGroup) -> &mut Vec<f64> {
        match group {
            RouterGroup::W => &mut self.w,
            RouterGroup::WDir => &mut self.w_dir,
            RouterGroup::WTime => &mut self.w_time,
            RouterGroup::Net => &mut self.net,
            RouterGroup::Gate => &mut self.gate,
        }
    }

    pub fn add(&mut self, other: &RouterGrads) {
        for g in RouterGroup::ALL {
            for (a, b) in self.get_mut(g).iter_mut().zip(other.get(g)) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in RouterGroup::ALL {
            for a in self.get_mut(g).iter_mut() {
                *a *= s;
            }
        }
    }
}

impl Router {
    /// A freshly initialized router for experts with the given Gaussian counts.
    pub fn init(kind: RouterKind, counts: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::input("router needs at least one expert"));
        }
        Ok(match kind {
            RouterKind::VolumeAware => {
                let phi = ConvNet::new(PHI_INPUTS, NET_HIDDEN, 1, rng);
                Router::VolumeAware {
                    weights: PerGaussianWeights::init(counts, rng),
                    phi,
                }
            }
            RouterKind::Pixel => Router::Pixel {
                net: ConvNet::new(PIXEL_INPUTS, NET_HIDDEN, counts.len(), rng),
            },
            RouterKind::Volume => Router::Volume {
                logits: PerExpert::zeros(counts),
            },
        })
    }

    pub fn kind(&self) -> RouterKind {
        match self {
            Router::VolumeAware { .. } => RouterKind::VolumeAware,
            Router::Pixel { .. } => RouterKind::Pixel,
            Router::Volume { .. } => RouterKind::Volume,
        }
    }

    pub fn experts(&self) -> usize {
        match self {
            Router::VolumeAware { weights, .. } => weights.experts(),
            Router::Pixel { net } => net.outputs(),
            Router::Volume { logits } => logits.experts(),
        }
    }

    pub fn params(&self, group: RouterGroup) -> &[f64] {
        match (self, group) {
            (Router::VolumeAware { weights, .. }, RouterGroup::W) => weights.w.values(),
            (Router::VolumeAware { weights, .. }, RouterGroup::WDir) => weights.w_dir.values(),
            (Router::VolumeAware { weights, .. }, RouterGroup::WTime) => weights.w_time.values(),
            (Router::VolumeAware { phi, .. }, RouterGroup::Net) => phi.params(),
            (Router::Pixel { net }, RouterGroup::Net) => net.params(),
            (Router::Volume { logits }, RouterGroup::Gate) => logits.values(),
            _ => &[],
        }
    }

    pub fn params_mut(&mut self, group: RouterGroup) -> &mut [f64] {
        match (self, group) {
            (Router::VolumeAware { weights, .. }, RouterGroup::W) => weights.w.values_mut(),
            (Router::VolumeAware { weights, .. }, RouterGroup::WDir) => weights.w_dir.values_mut(),
            (Router::VolumeAware { weights, .. }, RouterGroup::WTime) => weights.w_time.values_mut(),
            (Router::VolumeAware { phi, .. }, RouterGroup::Net) => phi.params_mut(),
            (Router::Pixel { net }, RouterGroup::Net) => net.params_mut(),
            (Router::Volume { logits }, RouterGroup::Gate) => logits.values_mut(),
            _ => &mut [],
        }
    }

    pub fn parameter_count(&self) -> usize {
        RouterGroup::ALL.iter().map(|&g| self.params(g).len()).sum()
    }

    /// Drops the per-Gaussian state of pruned Gaussians; networks are kept.
    pub fn retain(&self, keep: &[Vec<bool>]) -> Result<Self> {
        let check = |counts: Vec<usize>| -> Result<()> {
            let mask: Vec<usize> = keep.iter().map(|k| k.len()).collect();
            if counts != mask {
                return Err(Error::input("retain mask does not match router weights"));
            }
            Ok(())
        };
        Ok(match self {
            Router::VolumeAware { weights, phi } => {
                check(weights.counts())?;
                Router::VolumeAware {
                    weights: weights.retain(keep),
                    phi: phi.clone(),
                }
            }
            Router::Pixel { net } => Router::Pixel { net: net.clone() },
            Router::Volume { logits } => {
                check(logits.counts())?;
                Router::Volume {
                    logits: logits.retain(keep),
                }
            }
        })
    }

    fn check_renders(&self, renders: &[ExpertRender]) -> Result<()> {
        if renders.len() != self.experts() {
            return Err(Error::input(format!(
                "router built for {} experts, got {} renders",
                self.experts(),
                renders.len()
            )));
        }
        Ok(())
    }

    /// Routes and blends the expert renders of one view.
    pub fn forward(&self, view: &View, renders: &[ExpertRender]) -> Result<RouterForward> {
        self.check_renders(renders)?;
        let images: Vec<ImageBuffer> = renders.iter().map(|r| r.image.clone()).collect();
        match self {
            Router::VolumeAware { weights, phi } => {
                let planes = splat_weights_cached(weights, renders)?;
                let pass = volume_aware_pass(&planes, view, phi)?;
                let image = blend(&pass.gating, &images)?;
                Ok(RouterForward {
                    image,
                    gating: Some(pass.gating),
                    cache: Cache::VolumeAware { traces: pass.traces },
                })
            }
            Router::Pixel { net } => {
                let (logits, trace) = net.forward(&pixel_inputs(view))?;
                let gating = GatingMap::from_logits(logits)?;
                let image = blend(&gating, &images)?;
                Ok(RouterForward {
                    image,
                    gating: Some(gating),
                    cache: Cache::Pixel { trace },
                })
            }
            Router::Volume { logits } => {
                let pass = volume_pass(renders, logits)?;
                Ok(RouterForward {
                    image: pass.image.clone(),
                    gating: None,
                    cache: Cache::Volume { pass },
                })
            }
        }
    }

    /// Gradients of `Σ_u d_image(u)·I_MoE(u)` w.r.t. the router parameters.
    /// Expert geometry, colors and opacities are treated as constants.
    pub fn backward(&self, fwd: &RouterForward, renders: &[ExpertRender], d_image: &ImageBuffer) -> Result<RouterGrads> {
        self.check_renders(renders)?;
        fwd.image.ensure_same_shape(d_image, "router upstream gradient")?;
        let mut grads = RouterGrads::zeros_like(self);
        match (self, &fwd.cache) {
            (Router::VolumeAware { .. }, Cache::VolumeAware { traces }) => {
                let gating = fwd.gating.as_ref().ok_or_else(|| Error::state("missing gating cache"))?;
                let images: Vec<&ImageBuffer> = renders.iter().map(|r| &r.image).collect();
                let d_logits = gating.softmax_backward(&blend_backward(d_image, &images));
                for k in 0..renders.len() {
                    self.logit_backward(k, &d_logits.plane(k), traces, renders, &mut grads)?;
                }
            }
            (Router::Pixel { net }, Cache::Pixel { trace }) => {
                let gating = fwd.gating.as_ref().ok_or_else(|| Error::state("missing gating cache"))?;
                let images: Vec<&ImageBuffer> = renders.iter().map(|r| &r.image).collect();
                let d_logits = gating.softmax_backward(&blend_backward(d_image, &images));
                net.backward(trace, &d_logits, &mut grads.net, false)?;
            }
            (Router::Volume { logits }, Cache::Volume { pass }) => {
                volume_backward(logits, pass, renders, d_image, &mut grads)?;
            }
            _ => return Err(Error::state("forward cache belongs to a different router kind")),
        }
        Ok(grads)
    }

    /// Back-propagates a gradient on expert `k`'s logit plane `R'_k` into the
    /// weights of that expert's Gaussians and the shared refinement net.
    pub(crate) fn logit_backward(
        &self,
        k: usize,
        d_logit: &ImageBuffer,
        traces: &[ConvTrace],
        renders: &[ExpertRender],
        grads: &mut RouterGrads,
    ) -> Result<()> {
        let Router::VolumeAware { weights, phi } = self else {
            return Err(Error::state("logit backward needs a volume-aware router"));
        };
        let d_in = phi
            .backward(&traces[k], d_logit, &mut grads.net, true)?
            .expect("input gradient requested");
        let (h, w) = (d_logit.height(), d_logit.width());
        let mut d_planes = ImageBuffer::zeros(h, w, 3);
        for px in 0..h * w {
            let di = d_in.pixel(px);
            d_planes.pixel_mut(px).copy_from_slice(&[d_logit.data()[px], di[0], di[1]]);
        }
        let r = &renders[k];
        let d_splat = r.graph.channel_backward(&d_planes)?;
        let off = weights.w.offsets[k];
        for (s, &g) in r.splat_gaussian.iter().enumerate() {
            let i = off + g as usize;
            grads.w[i] += d_splat[3 * s];
            grads.w_dir[i] += d_splat[3 * s + 1];
            grads.w_time[i] += r.time * d_splat[3 * s + 2];
        }
        Ok(())
    }

    pub(crate) fn traces(fwd: &RouterForward) -> Option<&[ConvTrace]> {
        match &fwd.cache {
            Cache::VolumeAware { traces } => Some(traces),
            _ => None,
        }
    }
}

fn volume_backward(
    logits: &PerExpert,
    pass: &VolumePass,
    renders: &[ExpertRender],
    d_image: &ImageBuffer,
    grads: &mut RouterGrads,
) -> Result<()> {
    let (h, w, _) = d_image.shape();
    // I = S / D with S = Σ_k rgb_k and D = max(1, Σ_k cov_k).
    let mut d_layer = ImageBuffer::zeros(h, w, 4);
    for px in 0..h * w {
        let up = d_image.pixel(px);
        let n = pass.norm[px];
        let o = d_layer.pixel_mut(px);
        for c in 0..3 {
            o[c] = up[c] / n;
        }
        let cov: f64 = pass.layers.iter().map(|(img, _)| img.pixel(px)[3]).sum();
        if cov > 1.0 {
            let out = pass.image.pixel(px);
            o[3] = -(0..3).map(|c| up[c] * out[c]).sum::<f64>() / n;
        }
    }
    for (k, ((_, graph), r)) in pass.layers.iter().zip(renders).enumerate() {
        let sg = raster::backward(graph, &d_layer)?;
        let off = logits.offsets[k];
        for (s, &g) in r.splat_gaussian.iter().enumerate() {
            let z = logits.expert(k)[g as usize];
            let sig = sigmoid(z);
            grads.gate[off + g as usize] += sg.d_opacity[s] * r.splats[s].opacity * sig * (1.0 - sig);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
