//! Procedural multi-regime dynamic scenes.
//!
//! Regions are laid out side by side along the world x axis. Each region
//! moves under one regime: a smooth quadratic drift, a zigzag through
//! keyframes, or nothing at all (but with high-frequency colors). Ground
//! truth is rendered from the generator's own Gaussians, so every regime is
//! exactly representable by the matching toy expert.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{Camera, Resolution};
use super::dataset::{Dataset, Split, View};
use super::gaussian::Gaussian3D;
use crate::error::{Error, Result};
use crate::experts::{ExpertKind, ExpertModel, Motion};
use crate::image::ImageBuffer;
use crate::raster::{self, ChannelSplat};

/// Motion regime of one region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `Δy = A·(8t² − 8t + 1)`: smooth, exactly quadratic.
    Polynomial,
    /// Piecewise-linear zigzag through `±A` at five uniform keyframes.
    Keyframe,
    /// No motion, textured colors.
    Static,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Polynomial => "polynomial",
            Regime::Keyframe => "keyframe",
            Regime::Static => "static",
        }
    }

    pub fn is_moving(self) -> bool {
        self != Regime::Static
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub regime: Regime,
    pub gaussians: usize,
    /// Motion amplitude in world units (ignored for static regions).
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_amplitude() -> f64 {
    0.12
}

impl RegionSpec {
    pub fn new(regime: Regime, gaussians: usize) -> Self {
        Self {
            regime,
            gaussians,
            amplitude: default_amplitude(),
        }
    }
}

/// Everything that defines a synthetic scene apart from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub regions: Vec<RegionSpec>,
    pub views: usize,
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    pub focal: f64,
    /// Camera distance from the scene center.
    pub distance: f64,
    /// Total angular spread of the camera arc, in degrees.
    pub arc_degrees: f64,
    /// Horizontal distance between region centers.
    pub region_spacing: f64,
    pub scale_range: (f64, f64),
    /// Every view with `index % test_every == test_every / 2` is held out.
    pub test_every: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            regions: vec![
                RegionSpec {
                    regime: Regime::Polynomial,
                    gaussians: 40,
                    amplitude: 0.15,
                },
                RegionSpec::new(Regime::Static, 40),
                RegionSpec::new(Regime::Keyframe, 40),
            ],
            views: 25,
            cameras: 4,
            height: 64,
            width: 64,
            focal: 100.0,
            distance: 4.0,
            arc_degrees: 30.0,
            region_spacing: 0.8,
            scale_range: (0.09, 0.14),
            test_every: 5,
        }
    }
}

impl SceneSpec {
    /// Small configuration for smoke runs.
    pub fn micro() -> Self {
        Self {
            regions: vec![
                RegionSpec {
                    regime: Regime::Polynomial,
                    gaussians: 25,
                    amplitude: 0.15,
                },
                RegionSpec::new(Regime::Keyframe, 25),
            ],
            height: 32,
            width: 32,
            focal: 50.0,
            ..Self::default()
        }
    }

    pub fn gaussian_count(&self) -> usize {
        self.regions.iter().map(|r| r.gaussians).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.gaussian_count() == 0 {
            return bad("scene needs at least one gaussian");
        }
        if self.views == 0 {
            return bad("scene needs at least one view");
        }
        if self.cameras == 0 || self.height == 0 || self.width == 0 {
            return bad("cameras and resolution must be positive");
        }
        if !(self.focal > 0.0 && self.distance > 0.0 && self.region_spacing >= 0.0) {
            return bad("focal, distance and spacing must be positive");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("scale range must be positive and ordered");
        }
        if self.regions.iter().any(|r| !(r.amplitude.is_finite() && r.amplitude >= 0.0)) {
            return bad("region amplitudes must be finite and non-negative");
        }
        if self.test_every == 1 {
            return bad("test_every = 1 would leave no train views");
        }
        Ok(())
    }

    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.height, self.width)
    }
}

/// The generator's Gaussians, one exactly-representing expert per region.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub regimes: Vec<Regime>,
    pub parts: Vec<ExpertModel>,
}

impl GroundTruth {
    /// All Gaussians of all regions at time `t`, region by region.
    pub fn gaussians_at(&self, t: f64) -> Result<Vec<Gaussian3D>> {
        let mut out = Vec::new();
        for p in &self.parts {
            out.extend(p.gaussians_at(t)?);
        }
        Ok(out)
    }

    fn splats(&self, view: &View, only: Option<usize>) -> Result<Vec<ChannelSplat>> {
        let mut splats = Vec::new();
        for (r, part) in self.parts.iter().enumerate() {
            if only.is_some_and(|o| o != r) {
                continue;
            }
            let (_, s, _, _) = part.splats_at(&view.camera, view.time, r)?;
            splats.extend(s);
        }
        Ok(splats)
    }

    pub fn render(&self, view: &View) -> Result<ImageBuffer> {
        let splats = self.splats(view, None)?;
        Ok(raster::rasterize_channels(&splats, 3, view.resolution())?.0)
    }

    /// One-channel alpha coverage of region `r` rendered alone.
    pub fn region_coverage(&self, view: &View, r: usize) -> Result<ImageBuffer> {
        if r >= self.parts.len() {
            return Err(Error::input(format!("region {r} out of range")));
        }
        let splats = self.splats(view, Some(r))?;
        Ok(raster::rasterize_channels(&splats, 3, view.resolution())?.1.coverage())
    }

    /// Index of the first region with the given regime.
    pub fn region_of(&self, regime: Regime) -> Option<usize> {
        self.regimes.iter().position(|&r| r == regime)
    }
}

/// Per-Gaussian trajectory centroids with ground-truth geometry: the point
/// cloud experts are initialized from.
pub type InitCloud = Vec<Gaussian3D>;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub ground_truth: GroundTruth,
    pub dataset: Dataset,
    pub init: InitCloud,
}

/// Rounds through `f32` so values survive the binary formats unchanged.
pub(crate) fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// A unit quaternion whose `f32` rounding re-normalizes back to itself, so
/// it survives the binary formats bit-exactly. Returns `None` when the
/// iteration does not settle.
pub(crate) fn quantize_rotation(q: &UnitQuaternion<f64>) -> Option<UnitQuaternion<f64>> {
    let mut cur = *q;
    for _ in 0..16 {
        let c = cur.into_inner().coords.map(f32_exact);
        let next = UnitQuaternion::new_normalize(Quaternion::from(c));
        if next == cur {
            return Some(cur);
        }
        cur = next;
    }
    None
}

fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    loop {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = q.norm();
        if !(0.1..=1.0).contains(&n) {
            continue;
        }
        if let Some(q) = quantize_rotation(&UnitQuaternion::new_normalize(q)) {
            return q;
        }
    }
}

/// Zigzag keyframe signs.
const ZIGZAG: [f64; 5] = [1.0, -1.0, 1.0, -1.0, 1.0];

fn region_part(spec: &SceneSpec, r: usize, rng: &mut ChaCha8Rng) -> Result<ExpertModel> {
    let region = &spec.regions[r];
    let n = region.gaussians;
    let center_x = (r as f64 - (spec.regions.len() as f64 - 1.0) / 2.0) * spec.region_spacing;
    let half = (0.35 * spec.region_spacing).max(0.1);
    let (lo, hi) = spec.scale_range;
    let mut rotations = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(3 * n);
    let mut opacities = Vec::with_capacity(n);
    let mut centers = Vec::with_capacity(n);
    let mut gains = Vec::with_capacity(n);
    for _ in 0..n {
        centers.push(Vector3::new(
            f32_exact(center_x + rng.random_range(-half..half)),
            f32_exact(rng.random_range(-0.55..0.55)),
            f32_exact(rng.random_range(-0.25..0.25)),
        ));
        rotations.push(random_rotation(rng));
        scales.push(Vector3::from_fn(|_, _| f32_exact(rng.random_range(lo..hi))));
        colors.extend((0..3).map(|_| f32_exact(rng.random_range(0.05..0.95))));
        opacities.push(f32_exact(rng.random_range(0.5..0.9)));
        gains.push(rng.random_range(0.8..1.2));
    }
    let a = region.amplitude;
    let motion = match region.regime {
        Regime::Static => Motion::Polynomial {
            degree: 1,
            coeffs: centers.iter().flat_map(|c| [c.x, c.y, c.z, 0.0, 0.0, 0.0]).collect(),
        },
        Regime::Polynomial => Motion::Polynomial {
            degree: 2,
            // μ(t) = c + g·A·(1 − 8t + 8t²)·ŷ = c + g·A·(4/3·P_2(2t − 1) − 1/3)·ŷ
            coeffs: centers
                .iter()
                .zip(&gains)
                .flat_map(|(c, g)| {
                    let amp = g * a;
                    [c.x, c.y - amp / 3.0, c.z, 0.0, 0.0, 0.0, 0.0, 4.0 * amp / 3.0, 0.0].map(f32_exact)
                })
                .collect(),
        },
        Regime::Keyframe => Motion::Keyframe {
            times: (0..5).map(|k| k as f64 / 4.0).collect(),
            means: centers
                .iter()
                .zip(&gains)
                .flat_map(|(c, g)| {
                    let amp = g * a;
                    ZIGZAG
                        .iter()
                        .flat_map(move |s| [c.x, c.y + s * amp, c.z].map(f32_exact))
                        .collect::<Vec<_>>()
                })
                .collect(),
        },
    };
    ExpertModel::new(rotations, scales, colors, opacities, motion)
}

fn cameras(spec: &SceneSpec) -> Result<Vec<Camera>> {
    let arc = spec.arc_degrees.to_radians();
    (0..spec.cameras)
        .map(|c| {
            let f = if spec.cameras == 1 {
                0.0
            } else {
                c as f64 / (spec.cameras - 1) as f64 - 0.5
            };
            let theta = f * arc;
            let elevation = 0.15 * spec.distance * if c % 2 == 0 { 1.0 } else { -1.0 } * (spec.cameras > 1) as u8 as f64;
            let pos = Vector3::new(spec.distance * theta.sin(), elevation, -spec.distance * theta.cos()).map(f32_exact);
            Camera::look_at(pos, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), spec.focal, spec.resolution())
        })
        .collect()
}

fn view_time(spec: &SceneSpec, v: usize) -> f64 {
    if spec.views == 1 {
        0.0
    } else {
        v as f64 / (spec.views - 1) as f64
    }
}

fn split_of(spec: &SceneSpec, v: usize) -> Split {
    if spec.test_every > 1 && v % spec.test_every == spec.test_every / 2 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Trajectory centroid of every ground-truth Gaussian, sampled at the view
/// times, carrying ground-truth rotation and scale.
fn init_cloud(gt: &GroundTruth, spec: &SceneSpec) -> Result<InitCloud> {
    let times: Vec<f64> = (0..spec.views.max(2)).map(|v| v as f64 / (spec.views.max(2) - 1) as f64).collect();
    let mut cloud = Vec::new();
    for part in &gt.parts {
        for i in 0..part.len() {
            let centroid = (times.iter().map(|&t| part.mean_at(i, t)).sum::<Vector3<f64>>() / times.len() as f64).map(f32_exact);
            cloud.push(Gaussian3D::new(
                centroid,
                part.rotations()[i],
                part.scales()[i],
                0.5,
                Vector3::repeat(0.5),
            )?);
        }
    }
    Ok(cloud)
}

/// Generates a scene and its dataset. A pure function of `(seed, spec)`.
pub fn synth_scene(seed: u64, spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = (0..spec.regions.len())
        .map(|r| region_part(spec, r, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = GroundTruth {
        regimes: spec.regions.iter().map(|r| r.regime).collect(),
        parts,
    };
    let cams = cameras(spec)?;
    let views = (0..spec.views)
        .map(|v| {
            let view = View::new(cams[v % spec.cameras].clone(), view_time(spec, v), split_of(spec, v))?;
            let image = ground_truth.render(&view)?.map(f32_exact);
            view.with_ground_truth(image)
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::new(views)?;
    let init = init_cloud(&ground_truth, spec)?;
    Ok(SynthScene {
        spec: spec.clone(),
        seed,
        ground_truth,
        dataset,
        init,
    })
}


/// The expert kind that can represent a regime exactly.
pub fn matching_kind(regime: Regime) -> ExpertKind {
    match regime {
        Regime::Polynomial | Regime::Static => ExpertKind::Polynomial,
        Regime::Keyframe => ExpertKind::Keyframe,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::SourceId;

    fn two_regimes() -> SceneSpec {
        SceneSpec {
            regions: vec![RegionSpec::new(Regime::Static, 20), RegionSpec::new(Regime::Keyframe, 20)],
            views: 10,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_scenes() {
        let a = synth_scene(7, &SceneSpec::default()).unwrap();
        let b = synth_scene(7, &SceneSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(8, &SceneSpec::default()).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn default_split_is_twenty_five() {
        let s = synth_scene(7, &SceneSpec::default()).unwrap();
        assert_eq!(s.dataset.indices(Split::Train).len(), 20);
        assert_eq!(s.dataset.indices(Split::Test).len(), 5);
        assert_eq!(s.init.len(), 120);
    }

    #[test]
    fn empty_specs_are_rejected() {
        let mut spec = SceneSpec::default();
        spec.views = 0;
        assert!(matches!(synth_scene(1, &spec), Err(Error::InvalidSpec(_))));
        let spec = SceneSpec {
            regions: vec![RegionSpec::new(Regime::Static, 0)],
            ..SceneSpec::default()
        };
        assert!(matches!(synth_scene(1, &spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn single_static_view_equals_direct_rasterization() {
        let spec = SceneSpec {
            regions: vec![RegionSpec::new(Regime::Static, 30)],
            views: 1,
            ..SceneSpec::default()
        };
        let s = synth_scene(3, &spec).unwrap();
        let view = s.dataset.view(0);
        let splats: Vec<ChannelSplat> = s
            .ground_truth
            .gaussians_at(view.time)
            .unwrap()
            .iter()
            .enumerate()
            .filter_map(|(i, g)| {
                view.camera.project(g).map(|p| ChannelSplat {
                    splat: p.splat,
                    channels: g.color().as_slice().to_vec(),
                    opacity: g.opacity(),
                    source: SourceId::new(0, i),
                })
            })
            .collect();
        let (direct, _) = raster::rasterize(&splats, view.resolution()).unwrap();
        assert_eq!(view.gt().unwrap(), &direct.map(f32_exact));
    }

    #[test]
    fn frame_difference_concentrates_in_moving_region() {
        let s = synth_scene(5, &two_regimes()).unwrap();
        let moving = s.ground_truth.region_of(Regime::Keyframe).unwrap();
        let (mut inside, mut total) = (0.0, 0.0);
        for v in 0..s.dataset.len() {
            let Some(p) = s.dataset.temporal_predecessor(v) else {
                continue;
            };
            let cur = s.dataset.view(v);
            let diff = cur.gt().unwrap().axpby(1.0, s.dataset.view(p).gt().unwrap(), -1.0);
            let cov_a = s.ground_truth.region_coverage(cur, moving).unwrap();
            let cov_b = s.ground_truth.region_coverage(s.dataset.view(p), moving).unwrap();
            for px in 0..diff.pixel_count() {
                let mass: f64 = diff.pixel(px).iter().map(|d| d.abs()).sum();
                total += mass;
                if cov_a.data()[px].max(cov_b.data()[px]) > 1e-3 {
                    inside += mass;
                }
            }
        }
        assert!(total > 0.0);
        assert!(inside / total >= 0.9, "share {}", inside / total);
    }

    #[test]
    fn stored_values_survive_f32() {
        let s = synth_scene(11, &SceneSpec::default()).unwrap();
        for part in &s.ground_truth.parts {
            for q in part.rotations() {
                assert_eq!(quantize_rotation(q), Some(*q));
            }
            assert!(part.params(crate::experts::ParamGroup::Motion).iter().all(|&v| f32_exact(v) == v));
        }
        for v in s.dataset.views() {
            assert!(v.gt().unwrap().data().iter().all(|&x| f32_exact(x) == x));
        }
    }

    #[test]
    fn regions_are_visible_and_disjoint_in_x() {
        let s = synth_scene(2, &SceneSpec::default()).unwrap();
        let view = s.dataset.view(0);
        let covs: Vec<ImageBuffer> = (0..3).map(|r| s.ground_truth.region_coverage(view, r).unwrap()).collect();
        for c in &covs {
            assert!(c.sum() > 50.0, "region barely visible");
        }
        let overlap: f64 = (0..covs[0].pixel_count())
            .map(|p| covs[0].data()[p].min(covs[2].data()[p]))
            .sum();
        assert!(overlap < 1e-6);
    }
}
