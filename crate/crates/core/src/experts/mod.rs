//! Toy dynamic-Gaussian experts.
//!
//! Every expert owns a fixed set of Gaussians whose rotation and scale never
//! change; only the mean moves over time. Trainable state is exposed as four
//! flat parameter groups so the optimizer can treat all kinds uniformly.

mod net;
mod render;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Gaussian3D;

pub use net::{DeformNet, DeformTrace};
pub use render::{ExpertGrads, ExpertRender};

/// Which motion model an expert uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Polynomial,
    Keyframe,
    Deform,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 3] = [ExpertKind::Polynomial, ExpertKind::Keyframe, ExpertKind::Deform];

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::Polynomial => "polynomial",
            ExpertKind::Keyframe => "keyframe",
            ExpertKind::Deform => "deform",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ExpertKind::Polynomial => 0,
            ExpertKind::Keyframe => 1,
            ExpertKind::Deform => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ExpertKind::Polynomial),
            1 => Ok(ExpertKind::Keyframe),
            2 => Ok(ExpertKind::Deform),
            other => Err(Error::Format(format!("unknown expert kind tag {other}"))),
        }
    }
}

impl std::fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExpertKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown expert kind `{s}`")))
    }
}

/// Trainable parameter groups of an expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Color,
    Opacity,
    Motion,
    Network,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Color, ParamGroup::Opacity, ParamGroup::Motion, ParamGroup::Network];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Color => "color",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Motion => "motion",
            ParamGroup::Network => "network",
        }
    }
}

/// Sizes of the motion models and the initialization noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub degree: usize,
    pub keyframes: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    /// Std-dev of the noise added to template means at initialization.
    pub init_noise: f64,
    /// Number of Gaussians created per template point.
    pub oversample: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            keyframes: 5,
            latent_dim: 8,
            hidden: 16,
            init_noise: 0.05,
            oversample: 1,
        }
    }
}

/// Kind-specific motion state. Per-Gaussian parameters live in one flat
/// vector (the `Motion` group) with a fixed stride.
#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    /// `μ(t) = Σ_j a_j P_j(2t − 1)` with Legendre polynomials `P_j`, an
    /// orthogonal basis on `[0, 1]`; per Gaussian `[a_0 xyz, a_1 xyz, ...]`.
    /// `a_0` is the time-averaged mean.
    Polynomial { degree: usize, coeffs: Vec<f64> },
    /// Piecewise-linear means; per Gaussian `[k_0 xyz, k_1 xyz, ...]`.
    Keyframe { times: Vec<f64>, means: Vec<f64> },
    /// `μ(t) = μ_base + net(e, t)`; per Gaussian `[μ_base xyz, e_0 .. e_L]`.
    Deform { params: Vec<f64>, net: DeformNet },
}

impl Motion {
    pub fn kind(&self) -> ExpertKind {
        match self {
            Motion::Polynomial { .. } => ExpertKind::Polynomial,
            Motion::Keyframe { .. } => ExpertKind::Keyframe,
            Motion::Deform { .. } => ExpertKind::Deform,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            Motion::Polynomial { degree, .. } => 3 * (degree + 1),
            Motion::Keyframe { times, .. } => 3 * times.len(),
            Motion::Deform { net, .. } => 3 + net.latent_dim(),
        }
    }

    fn flat(&self) -> &[f64] {
        match self {
            Motion::Polynomial { coeffs, .. } => coeffs,
            Motion::Keyframe { means, .. } => means,
            Motion::Deform { params, .. } => params,
        }
    }

    fn flat_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Motion::Polynomial { coeffs, .. } => coeffs,
            Motion::Keyframe { means, .. } => means,
            Motion::Deform { params, .. } => params,
        }
    }

    fn validate(&self, count: usize) -> Result<()> {
        match self {
            Motion::Polynomial { degree, .. } if *degree < 1 => {
                return Err(Error::param("polynomial degree must be at least 1"))
            }
            Motion::Keyframe { times, .. } => {
                let ok = times.len() >= 2
                    && times.windows(2).all(|w| w[0] < w[1])
                    && times[0] <= 0.0
                    && *times.last().unwrap() >= 1.0;
                if !ok {
                    return Err(Error::param(
                        "keyframe times must be strictly increasing and cover [0, 1]",
                    ));
                }
            }
            _ => {}
        }
        if self.flat().len() != count * self.stride() {
            return Err(Error::param(format!(
                "motion parameters have length {}, expected {}",
                self.flat().len(),
                count * self.stride()
            )));
        }
        Ok(())
    }

    /// Bracketing keyframe index and interpolation weight of the right one.
    fn segment(times: &[f64], t: f64) -> (usize, f64) {
        let k = times.partition_point(|&s| s <= t).clamp(1, times.len() - 1) - 1;
        let s = (t - times[k]) / (times[k + 1] - times[k]);
        (k, s)
    }

    /// Mean of Gaussian `i` at time `t`.
    pub fn mean_at(&self, i: usize, t: f64) -> Vector3<f64> {
        let p = &self.flat()[i * self.stride()..(i + 1) * self.stride()];
        match self {
            Motion::Polynomial { degree, .. } => legendre(*degree, t)
                .iter()
                .enumerate()
                .map(|(j, b)| Vector3::new(p[3 * j], p[3 * j + 1], p[3 * j + 2]) * *b)
                .sum(),
            Motion::Keyframe { times, .. } => {
                let (k, s) = Self::segment(times, t);
                let a = Vector3::new(p[3 * k], p[3 * k + 1], p[3 * k + 2]);
                let b = Vector3::new(p[3 * k + 3], p[3 * k + 4], p[3 * k + 5]);
                if s == 0.0 {
                    a
                } else if s == 1.0 {
                    b
                } else {
                    // `a + (b - a)s` keeps equal keyframes exactly constant.
                    a + (b - a) * s
                }
            }
            Motion::Deform { net, .. } => {
                let (d, _) = net.forward(&p[3..], t);
                Vector3::new(p[0] + d[0], p[1] + d[1], p[2] + d[2])
            }
        }
    }

    /// Adds `∂(d_mean · μ_i(t)) / ∂θ` into the motion and network gradients.
    fn accumulate(&self, i: usize, t: f64, d_mean: &Vector3<f64>, d_motion: &mut [f64], d_net: &mut [f64]) {
        let stride = self.stride();
        let g = &mut d_motion[i * stride..(i + 1) * stride];
        match self {
            Motion::Polynomial { degree, .. } => {
                for (j, b) in legendre(*degree, t).iter().enumerate() {
                    for c in 0..3 {
                        g[3 * j + c] += b * d_mean[c];
                    }
                }
            }
            Motion::Keyframe { times, .. } => {
                let (k, s) = Self::segment(times, t);
                for c in 0..3 {
                    g[3 * k + c] += (1.0 - s) * d_mean[c];
                    g[3 * k + 3 + c] += s * d_mean[c];
                }
            }
            Motion::Deform { params, net } => {
                for c in 0..3 {
                    g[c] += d_mean[c];
                }
                let latent = &params[i * stride + 3..(i + 1) * stride];
                let (_, trace) = net.forward(latent, t);
                let d_latent = net.backward(&trace, &[d_mean.x, d_mean.y, d_mean.z], d_net);
                for (a, b) in g[3..].iter_mut().zip(d_latent) {
                    *a += b;
                }
            }
        }
    }

    /// Upper bound on `‖dμ_i/dt‖` over `[0, 1]`.
    pub fn speed_bound(&self, i: usize) -> f64 {
        let p = &self.flat()[i * self.stride()..(i + 1) * self.stride()];
        match self {
            // max |d/dt P_j(2t − 1)| = j(j + 1) on [0, 1].
            Motion::Polynomial { degree, .. } => (1..=*degree)
                .map(|j| (j * (j + 1)) as f64 * Vector3::new(p[3 * j], p[3 * j + 1], p[3 * j + 2]).norm())
                .sum(),
            Motion::Keyframe { times, .. } => (0..times.len() - 1)
                .map(|k| {
                    let d = Vector3::new(p[3 * k + 3] - p[3 * k], p[3 * k + 4] - p[3 * k + 1], p[3 * k + 5] - p[3 * k + 2]);
                    d.norm() / (times[k + 1] - times[k])
                })
                .fold(0.0, f64::max),
            Motion::Deform { net, .. } => net.time_lipschitz() * 3f64.sqrt(),
        }
    }
}

/// Trainable flags per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub color: bool,
    pub opacity: bool,
    pub motion: bool,
    pub network: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        color: true,
        opacity: true,
        motion: true,
        network: true,
    };
    pub const NONE: Trainable = Trainable {
        color: false,
        opacity: false,
        motion: false,
        network: false,
    };

    pub fn get(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Color => self.color,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Motion => self.motion,
            ParamGroup::Network => self.network,
        }
    }
}

/// A dynamic Gaussian set: fixed geometry, RGB color, opacity and a motion
/// model for the means.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    rotations: Vec<UnitQuaternion<f64>>,
    scales: Vec<Vector3<f64>>,
    /// `N x 3`, row-major.
    colors: Vec<f64>,
    opacities: Vec<f64>,
    motion: Motion,
    trainable: Trainable,
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl ExpertModel {
    pub fn new(
        rotations: Vec<UnitQuaternion<f64>>,
        scales: Vec<Vector3<f64>>,
        colors: Vec<f64>,
        opacities: Vec<f64>,
        motion: Motion,
    ) -> Result<Self> {
        let n = rotations.len();
        if scales.len() != n || opacities.len() != n || colors.len() != 3 * n {
            return Err(Error::param("expert attribute arrays have inconsistent lengths"));
        }
        if !scales.iter().all(|s| s.iter().all(|&v| v > 0.0 && v.is_finite())) {
            return Err(Error::param("expert scales must be positive"));
        }
        if !colors.iter().chain(&opacities).all(|&v| in_unit(v)) {
            return Err(Error::param("expert colors and opacities must lie in [0, 1]"));
        }
        motion.validate(n)?;
        Ok(Self {
            rotations,
            scales,
            colors,
            opacities,
            motion,
            trainable: Trainable::ALL,
        })
    }

    /// A motionless expert whose means stay at the given Gaussians' means.
    pub fn from_static(kind: ExpertKind, gaussians: &[Gaussian3D], cfg: &ExpertConfig, rng: &mut impl Rng) -> Result<Self> {
        let means: Vec<Vector3<f64>> = gaussians.iter().map(|g| *g.mean()).collect();
        let motion = static_motion(kind, &means, cfg, rng)?;
        Self::new(
            gaussians.iter().map(|g| *g.rotation()).collect(),
            gaussians.iter().map(|g| *g.scale()).collect(),
            gaussians.iter().flat_map(|g| g.color().iter().copied()).collect(),
            gaussians.iter().map(|g| g.opacity()).collect(),
            motion,
        )
    }

    /// Initializes an untrained expert around a template point cloud: means
    /// are jittered with `N(0, init_noise²)`, colors and opacities are drawn
    /// uniformly, geometry is copied.
    pub fn init(kind: ExpertKind, template: &[Gaussian3D], cfg: &ExpertConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.oversample == 0 {
            return Err(Error::param("oversample must be at least 1"));
        }
        if !(cfg.init_noise >= 0.0) {
            return Err(Error::param("init noise must be non-negative"));
        }
        let noise = Normal::new(0.0, cfg.init_noise).map_err(|e| Error::param(e.to_string()))?;
        let mut gaussians = Vec::with_capacity(template.len() * cfg.oversample);
        for g in template {
            for _ in 0..cfg.oversample {
                let jitter = Vector3::from_fn(|_, _| noise.sample(rng));
                let color = Vector3::from_fn(|_, _| rng.random_range(0.0..1.0));
                let opacity = rng.random_range(0.1..0.9);
                gaussians.push(Gaussian3D::new(g.mean() + jitter, *g.rotation(), *g.scale(), opacity, color)?);
            }
        }
        Self::from_static(kind, &gaussians, cfg, rng)
    }

    pub fn kind(&self) -> ExpertKind {
        self.motion.kind()
    }

    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }

    pub fn motion(&self) -> &Motion {
        &self.motion
    }

    pub fn rotations(&self) -> &[UnitQuaternion<f64>] {
        &self.rotations
    }

    pub fn scales(&self) -> &[Vector3<f64>] {
        &self.scales
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: Trainable) {
        self.trainable = trainable;
    }

    /// Clears every trainable flag.
    pub fn freeze(&mut self) {
        self.trainable = Trainable::NONE;
    }

    pub fn is_frozen(&self) -> bool {
        self.trainable == Trainable::NONE
    }

    pub fn params(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::Color => &self.colors,
            ParamGroup::Opacity => &self.opacities,
            ParamGroup::Motion => self.motion.flat(),
            ParamGroup::Network => match &self.motion {
                Motion::Deform { net, .. } => net.params(),
                _ => &[],
            },
        }
    }

    /// Mutable access to a parameter group. Call [`ExpertModel::clamp`]
    /// after writing colors or opacities.
    pub fn params_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        match group {
            ParamGroup::Color => &mut self.colors,
            ParamGroup::Opacity => &mut self.opacities,
            ParamGroup::Motion => self.motion.flat_mut(),
            ParamGroup::Network => match &mut self.motion {
                Motion::Deform { net, .. } => net.params_mut(),
                _ => &mut [],
            },
        }
    }

    /// Projects colors and opacities back into `[0, 1]`.
    pub fn clamp(&mut self) {
        for v in self.colors.iter_mut().chain(self.opacities.iter_mut()) {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn parameter_count(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.params(g).len()).sum()
    }

    pub fn mean_at(&self, i: usize, t: f64) -> Vector3<f64> {
        self.motion.mean_at(i, t)
    }

    /// The Gaussian set at normalized time `t ∈ [0, 1]`.
    pub fn gaussians_at(&self, t: f64) -> Result<Vec<Gaussian3D>> {
        check_time(t)?;
        (0..self.len()).map(|i| self.gaussian_at(i, t)).collect()
    }

    fn gaussian_at(&self, i: usize, t: f64) -> Result<Gaussian3D> {
        Gaussian3D::new(
            self.motion.mean_at(i, t),
            self.rotations[i],
            self.scales[i],
            self.opacities[i],
            Vector3::new(self.colors[3 * i], self.colors[3 * i + 1], self.colors[3 * i + 2]),
        )
    }

    /// Upper bound on the speed of any mean over `[0, 1]`.
    pub fn speed_bound(&self) -> f64 {
        (0..self.len()).map(|i| self.motion.speed_bound(i)).fold(0.0, f64::max)
    }

    /// Keeps only the Gaussians whose flag is set.
    pub fn retain(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.len() {
            return Err(Error::input(format!("retain mask has {} entries for {} gaussians", keep.len(), self.len())));
        }
        let pick = |stride: usize, v: &[f64]| -> Vec<f64> {
            v.chunks(stride)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect()
        };
        let stride = self.motion.stride();
        let mut motion = self.motion.clone();
        *motion.flat_mut() = pick(stride, self.motion.flat());
        let mut out = Self::new(
            self.rotations.iter().zip(keep).filter(|(_, &k)| k).map(|(r, _)| *r).collect(),
            self.scales.iter().zip(keep).filter(|(_, &k)| k).map(|(s, _)| *s).collect(),
            pick(3, &self.colors),
            pick(1, &self.opacities),
            motion,
        )?;
        out.trainable = self.trainable;
        Ok(out)
    }

    /// Adds the motion and network gradients of `d_mean · μ_i(t)`.
    pub(crate) fn accumulate_mean_grad(&self, i: usize, t: f64, d_mean: &Vector3<f64>, grads: &mut ExpertGrads) {
        self.motion.accumulate(i, t, d_mean, &mut grads.motion, &mut grads.network);
    }
}

/// `P_0 .. P_degree` of the Legendre family evaluated at `2t − 1`.
pub fn legendre(degree: usize, t: f64) -> Vec<f64> {
    let x = 2.0 * t - 1.0;
    let mut out = Vec::with_capacity(degree + 1);
    out.push(1.0);
    if degree >= 1 {
        out.push(x);
    }
    for n in 1..degree {
        let nf = n as f64;
        out.push(((2.0 * nf + 1.0) * x * out[n] - nf * out[n - 1]) / (nf + 1.0));
    }
    out
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::param(format!("time {t} outside [0, 1]")))
    }
}

/// Motion parameters that keep every mean fixed at `means`.
fn static_motion(kind: ExpertKind, means: &[Vector3<f64>], cfg: &ExpertConfig, rng: &mut impl Rng) -> Result<Motion> {
    Ok(match kind {
        ExpertKind::Polynomial => {
            if cfg.degree < 1 {
                return Err(Error::param("polynomial degree must be at least 1"));
            }
            let stride = 3 * (cfg.degree + 1);
            let mut coeffs = vec![0.0; means.len() * stride];
            for (i, m) in means.iter().enumerate() {
                coeffs[i * stride..i * stride + 3].copy_from_slice(m.as_slice());
            }
            Motion::Polynomial {
                degree: cfg.degree,
                coeffs,
            }
        }
        ExpertKind::Keyframe => {
            if cfg.keyframes < 2 {
                return Err(Error::param("keyframe expert needs at least 2 keyframes"));
            }
            let m = cfg.keyframes;
            let times = (0..m).map(|k| k as f64 / (m - 1) as f64).collect();
            let means = means.iter().flat_map(|p| (0..m).flat_map(move |_| p.iter().copied())).collect();
            Motion::Keyframe { times, means }
        }
        ExpertKind::Deform => {
            let net = DeformNet::new(cfg.latent_dim, cfg.hidden, rng);
            let latent = Normal::new(0.0, 1.0).expect("unit normal");
            let mut params = Vec::with_capacity(means.len() * (3 + cfg.latent_dim));
            for m in means {
                params.extend(m.iter());
                params.extend((0..cfg.latent_dim).map(|_| latent.sample(rng)));
            }
            Motion::Deform { params, net }
        }
    })
}
