//! Randomized analytic-versus-finite-difference gradient checks. Each
//! function builds one random configuration from `seed` and returns the
//! worst relative error over every checked parameter.

use moesplat_core::experts::{ExpertConfig, ExpertKind, ExpertModel, ExpertRender, ParamGroup};
use moesplat_core::raster::{backward, rasterize, ChannelSplat};
use moesplat_core::router::{Router, RouterGroup, RouterKind};
use moesplat_core::scene::{Camera, Gaussian3D, Resolution, Split, View};
use moesplat_core::train::{loss as photometric, LossConfig};
use moesplat_core::ImageBuffer;
use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;

use crate::{composite, fd, random};

/// Relative error bound shared by every check.
pub const TOLERANCE: f64 = 1e-3;

fn upstream(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Loss `Σ upstream·image` evaluated by the frozen-support oracle.
fn frozen_loss(splats: &[ChannelSplat], support: &[Vec<usize>], up: &ImageBuffer) -> f64 {
    fd::dot(&composite::frozen(splats, support, up.height(), up.width()), up.data())
}

/// Rasterizer gradients for channels, opacity, 2D mean and 2D covariance of
/// `n` random splats, against the frozen-support compositing oracle.
pub fn raster(seed: u64, n: usize, h: usize, w: usize, channels: usize) -> f64 {
    let mut rng = random::rng(seed);
    let splats = random::splats(&mut rng, 1, n, channels, h, w);
    let (_, graph) = rasterize(&splats, Resolution::new(h, w)).unwrap();
    let up = upstream(&mut rng, h, w, channels);
    let grads = backward(&graph, &up).unwrap();
    let (_, support) = composite::naive_with_support(&splats, h, w);
    let step = 1e-4;
    let floor = 1e-7;
    let mut worst = 0.0f64;
    let mut probe = |edit: &dyn Fn(&mut ChannelSplat, f64), x: f64, i: usize, ana: f64| {
        let num = fd::central(
            |v| {
                let mut s = splats.clone();
                edit(&mut s[i], v);
                frozen_loss(&s, &support, &up)
            },
            x,
            step,
        );
        worst = worst.max(fd::rel_err(ana, num, floor));
    };
    for i in 0..n {
        for c in 0..channels {
            probe(&|s, v| s.channels[c] = v, splats[i].channels[c], i, grads.channel(i)[c]);
        }
        probe(&|s, v| s.opacity = v, splats[i].opacity, i, grads.d_opacity[i]);
        for axis in 0..2 {
            probe(&|s, v| s.splat.mean[axis] = v, splats[i].splat.mean[axis], i, grads.d_mean2d[i][axis]);
        }
        // xx, yy, and the symmetric off-diagonal pair
        for (r, c) in [(0, 0), (1, 1), (0, 1)] {
            let g = &grads.d_cov2d[i];
            let ana = if r == c { g[(r, c)] } else { g[(r, c)] + g[(c, r)] };
            probe(
                &|s, v| {
                    s.splat.cov[(r, c)] = v;
                    s.splat.cov[(c, r)] = v;
                },
                splats[i].splat.cov[(r, c)],
                i,
                ana,
            );
        }
    }
    worst
}

const EXPERT_SIZE: usize = 20;

fn random_expert(kind: ExpertKind, seed: u64) -> ExpertModel {
    let mut rng = random::rng(seed);
    let base: Vec<Gaussian3D> = (0..5)
        .map(|_| {
            let mean = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let rot = UnitQuaternion::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let scale = Vector3::from_fn(|_, _| rng.random_range(0.08..0.25));
            let color = Vector3::from_fn(|_, _| rng.random_range(0.1..0.9));
            Gaussian3D::new(mean, rot, scale, rng.random_range(0.2..0.85), color).unwrap()
        })
        .collect();
    let mut e = ExpertModel::from_static(kind, &base, &ExpertConfig::default(), &mut rng).unwrap();
    for g in [ParamGroup::Motion, ParamGroup::Network] {
        for v in e.params_mut(g) {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    e
}

fn random_expert_view(seed: u64) -> View {
    let mut rng = random::rng(seed ^ 0x5eed);
    let pos = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -4.0);
    let res = Resolution::new(EXPERT_SIZE, EXPERT_SIZE);
    let cam = Camera::look_at(pos, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 30.0, res).unwrap();
    View::new(cam, rng.random_range(0.0..1.0), Split::Train).unwrap()
}

/// Expert gradients (colors, opacities, motion and network parameters)
/// through projection and compositing, along the recorded contributor lists.
pub fn expert(kind: ExpertKind, seed: u64) -> f64 {
    let expert = random_expert(kind, seed);
    let view = random_expert_view(seed);
    let render = expert.render(&view).unwrap();
    assert_eq!(render.splats.len(), 5, "all gaussians should be visible");
    let mut rng = random::rng(seed + 1);
    let up = upstream(&mut rng, EXPERT_SIZE, EXPERT_SIZE, 3);
    let grads = expert.backward(&render, &up).unwrap();
    let loss = |e: &ExpertModel| -> f64 {
        let (_, splats, _, _) = e.splats_at(&view.camera, view.time, 0).unwrap();
        fd::dot(render.graph.replay(&splats).unwrap().data(), up.data())
    };
    let scale = ParamGroup::ALL
        .iter()
        .flat_map(|&g| grads.get(g).iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * scale.max(1e-3);
    let mut worst = 0.0f64;
    for group in ParamGroup::ALL {
        for k in 0..expert.params(group).len() {
            let num = fd::central(
                |v| {
                    let mut e = expert.clone();
                    e.params_mut(group)[k] = v;
                    loss(&e)
                },
                expert.params(group)[k],
                1e-6,
            );
            worst = worst.max(fd::rel_err(grads.get(group)[k], num, floor));
        }
    }
    worst
}

const ROUTER_SIZE: usize = 16;

fn router_setup(seed: u64) -> (View, Vec<ExpertRender>) {
    let mut rng = random::rng(seed);
    let cam = Camera::look_at(
        Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        24.0,
        Resolution::new(ROUTER_SIZE, ROUTER_SIZE),
    )
    .unwrap();
    let view = View::new(cam, rng.random_range(0.05..1.0), Split::Train).unwrap();
    let renders = (0..2)
        .map(|k| {
            let gs: Vec<Gaussian3D> = (0..10)
                .map(|_| {
                    let mean = Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.3..0.3));
                    let color = Vector3::from_fn(|_, _| rng.random_range(0.0..1.0));
                    Gaussian3D::isotropic(mean, rng.random_range(0.15..0.35), rng.random_range(0.2..0.9), color).unwrap()
                })
                .collect();
            let e = ExpertModel::from_static(ExpertKind::Polynomial, &gs, &ExpertConfig::default(), &mut rng).unwrap();
            e.render_as(&view, k).unwrap()
        })
        .collect();
    (view, renders)
}

/// Router gradients for every parameter group (per-Gaussian weights, gate
/// network Φ, pixel network, per-Gaussian logits) through the blended image.
pub fn router(kind: RouterKind, seed: u64) -> f64 {
    let (view, renders) = router_setup(seed);
    let mut router = Router::init(kind, &[10, 10], &mut random::rng(seed + 7)).unwrap();
    let mut rng = random::rng(seed + 8);
    for g in RouterGroup::ALL {
        for v in router.params_mut(g) {
            *v += rng.random_range(-1.0..1.0);
        }
    }
    let mut rng = random::rng(seed + 9);
    let up = upstream(&mut rng, ROUTER_SIZE, ROUTER_SIZE, 3);
    let fwd = router.forward(&view, &renders).unwrap();
    let grads = router.backward(&fwd, &renders, &up).unwrap();
    let loss = |r: &Router| fd::dot(r.forward(&view, &renders).unwrap().image.data(), up.data());
    let scale = RouterGroup::ALL
        .iter()
        .flat_map(|&g| grads.get(g).iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return f64::INFINITY;
    }
    let floor = 1e-6 * scale;
    let mut worst = 0.0f64;
    for group in RouterGroup::ALL {
        for k in 0..router.params(group).len() {
            let (err, _) = fd::best_rel_err(
                |v| {
                    let mut r = router.clone();
                    r.params_mut(group)[k] = v;
                    loss(&r)
                },
                router.params(group)[k],
                grads.get(group)[k],
                &[1e-5, 1e-4, 1e-6, 1e-3, 1e-2, 1e-7],
                floor,
                TOLERANCE,
            );
            worst = worst.max(err);
        }
    }
    worst
}

/// Gradient of the photometric loss with respect to every rendered pixel.
pub fn loss(cfg: &LossConfig, seed: u64) -> f64 {
    let mut rng = random::rng(seed);
    let a = ImageBuffer::from_fn(8, 8, 3, |_, _, _| rng.random_range(0.0..1.0));
    let b = ImageBuffer::from_fn(8, 8, 3, |_, _, _| rng.random_range(0.0..1.0));
    let (_, grad) = photometric(&a, &b, cfg).unwrap();
    let scale = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for i in 0..a.data().len() {
        let (err, _) = fd::best_rel_err(
            |v| {
                let mut p = a.clone();
                p.data_mut()[i] = v;
                photometric(&p, &b, cfg).unwrap().0
            },
            a.data()[i],
            grad.data()[i],
            &[1e-6, 1e-5, 1e-7],
            1e-6 * scale,
            TOLERANCE,
        );
        worst = worst.max(err);
    }
    worst
}
