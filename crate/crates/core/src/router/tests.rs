use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::experts::{ExpertConfig, ExpertKind};
use crate::scene::{Gaussian3D, Resolution, Split};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn view(t: f64) -> View {
    let cam = Camera::look_at(
        Vector3::new(0.3, -0.2, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        30.0,
        Resolution::new(16, 16),
    )
    .unwrap();
    View::new(cam, t, Split::Train).unwrap()
}

fn expert(seed: u64, n: usize) -> ExpertModel {
    let mut r = rng(seed);
    let gs: Vec<Gaussian3D> = (0..n)
        .map(|_| {
            let mean = Vector3::new(r.random_range(-0.6..0.6), r.random_range(-0.6..0.6), r.random_range(-0.3..0.3));
            let color = Vector3::from_fn(|_, _| r.random_range(0.0..1.0));
            Gaussian3D::isotropic(mean, r.random_range(0.1..0.25), r.random_range(0.3..0.9), color).unwrap()
        })
        .collect();
    ExpertModel::from_static(ExpertKind::Polynomial, &gs, &ExpertConfig::default(), &mut r).unwrap()
}

fn renders(experts: &[ExpertModel], v: &View) -> Vec<ExpertRender> {
    experts.iter().enumerate().map(|(k, e)| e.render_as(v, k).unwrap()).collect()
}

fn random_weights(counts: &[usize], seed: u64) -> PerGaussianWeights {
    let mut r = rng(seed);
    let mut w = PerGaussianWeights::zeros(counts);
    for p in [&mut w.w, &mut w.w_dir, &mut w.w_time] {
        for v in p.values_mut() {
            *v = r.random_range(-2.0..2.0);
        }
    }
    w
}

#[test]
fn zero_weights_give_zero_planes() {
    let es = [expert(1, 6), expert(2, 5)];
    let planes = splat_weights(&PerGaussianWeights::zeros(&[6, 5]), &es, &view(0.4)).unwrap();
    assert!(planes.iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn time_plane_vanishes_at_time_zero() {
    let es = [expert(1, 6)];
    let w = random_weights(&[6], 3);
    let planes = splat_weights(&w, &es, &view(0.0)).unwrap();
    assert!(planes[0].plane(2).data().iter().all(|&v| v == 0.0));
    assert!(planes[0].plane(1).data().iter().any(|&v| v != 0.0));
}

#[test]
fn single_unit_weight_splats_its_alpha_footprint() {
    let es = [expert(4, 1)];
    let v = view(0.5);
    let mut w = PerGaussianWeights::zeros(&[1]);
    w.w.values_mut()[0] = 1.0;
    let planes = splat_weights(&w, &es, &v).unwrap();
    let g = &es[0].gaussians_at(0.5).unwrap()[0];
    let s = v.camera.project(g).unwrap().splat;
    let inv = s.cov.try_inverse().unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let d = nalgebra::Vector2::new(x as f64 + 0.5, y as f64 + 0.5) - s.mean;
            let m = (d.transpose() * inv * d)[(0, 0)];
            let alpha = if m > 9.0 { 0.0 } else { (g.opacity() * (-0.5 * m).exp()).min(0.999) };
            assert!((planes[0].get(y, x, 0) - alpha).abs() <= 1e-12);
        }
    }
}

#[test]
fn cached_planes_equal_direct_splatting() {
    let es = [expert(1, 8), expert(2, 7)];
    let v = view(0.7);
    let w = random_weights(&[8, 7], 5);
    let direct = splat_weights(&w, &es, &v).unwrap();
    let cached = splat_weights_cached(&w, &renders(&es, &v)).unwrap();
    assert_eq!(direct, cached);
}

#[test]
fn weight_splatting_is_linear() {
    let es = [expert(1, 8), expert(2, 7)];
    let v = view(0.7);
    let (a, b) = (random_weights(&[8, 7], 5), random_weights(&[8, 7], 6));
    let mut mix = a.clone();
    for (dst, (x, y)) in [&mut mix.w, &mut mix.w_dir, &mut mix.w_time]
        .into_iter()
        .zip([(&a.w, &b.w), (&a.w_dir, &b.w_dir), (&a.w_time, &b.w_time)])
    {
        for (d, (p, q)) in dst.values_mut().iter_mut().zip(x.values().iter().zip(y.values())) {
            *d = 0.3 * p - 1.7 * q;
        }
    }
    let pa = splat_weights(&a, &es, &v).unwrap();
    let pb = splat_weights(&b, &es, &v).unwrap();
    let pm = splat_weights(&mix, &es, &v).unwrap();
    for k in 0..2 {
        assert!(pm[k].max_abs_diff(&pa[k].axpby(0.3, &pb[k], -1.7)) <= 1e-9);
    }
}

#[test]
fn count_mismatch_is_rejected() {
    let es = [expert(1, 3)];
    assert!(matches!(
        splat_weights(&PerGaussianWeights::zeros(&[4]), &es, &view(0.0)),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn single_expert_gates_everything_to_it() {
    let planes = vec![ImageBuffer::from_fn(16, 16, 3, |y, x, c| (y * 3 + x + c) as f64 * 0.1)];
    let phi = ConvNet::new(PHI_INPUTS, NET_HIDDEN, 1, &mut rng(1));
    let g = route_volume_aware(&planes, &view(0.2), &phi).unwrap();
    assert!(g.gates.data().iter().all(|&v| v == 1.0));
    assert!(route_volume_aware(&[], &view(0.2), &phi).is_err());
}

#[test]
fn dominant_splatted_weight_wins() {
    let mut a = ImageBuffer::zeros(16, 16, 3);
    a.set(4, 4, 0, 30.0);
    let b = ImageBuffer::zeros(16, 16, 3);
    let g = route_volume_aware(&[a, b], &view(0.2), &ConvNet::zeros(PHI_INPUTS, NET_HIDDEN, 1)).unwrap();
    assert!(g.gates.get(4, 4, 0) > 1.0 - 1e-9);
    assert_eq!(g.gates.get(0, 0, 0), 0.5);
}

#[test]
fn softmax_is_shift_invariant_and_normalized() {
    let mut r = rng(3);
    let logits = ImageBuffer::from_fn(8, 8, 3, |_, _, _| r.random_range(-50.0..50.0));
    let g = GatingMap::from_logits(logits.clone()).unwrap();
    let shifted = GatingMap::from_logits(logits.map(|v| v + 123.0)).unwrap();
    assert!(g.gates.max_abs_diff(&shifted.gates) <= 1e-9);
    for px in 0..64 {
        let s: f64 = g.gates.pixel(px).iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
        assert!(g.gates.pixel(px).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn blend_examples() {
    let mut r = rng(8);
    let img = ImageBuffer::from_fn(8, 8, 3, |_, _, _| r.random_range(0.0..1.0));
    let other = ImageBuffer::from_fn(8, 8, 3, |_, _, _| r.random_range(0.0..1.0));
    let logits = ImageBuffer::from_fn(8, 8, 2, |_, _, _| r.random_range(-3.0..3.0));
    let g = GatingMap::from_logits(logits).unwrap();
    // Identical images.
    assert!(blend(&g, &[img.clone(), img.clone()]).unwrap().max_abs_diff(&img) <= 1e-15);
    // One-hot gating.
    let onehot = GatingMap::from_logits(ImageBuffer::from_fn(8, 8, 2, |_, _, k| if k == 1 { 1e3 } else { 0.0 })).unwrap();
    assert_eq!(blend(&onehot, &[img.clone(), other.clone()]).unwrap(), other);
    // Direct per-pixel weighted sum and convexity.
    let out = blend(&g, &[img.clone(), other.clone()]).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            for c in 0..3 {
                let (a, b) = (img.get(y, x, c), other.get(y, x, c));
                let want = g.gates.get(y, x, 0) * a + g.gates.get(y, x, 1) * b;
                assert!((out.get(y, x, c) - want).abs() <= 1e-7);
                assert!(out.get(y, x, c) >= a.min(b) - 1e-7 && out.get(y, x, c) <= a.max(b) + 1e-7);
            }
        }
    }
    assert!(blend(&g, &[img.clone()]).is_err());
    assert!(blend(&g, &[img.clone(), ImageBuffer::zeros(4, 4, 3)]).is_err());
}

#[test]
fn pixel_baseline_starts_uniform_and_is_deterministic() {
    let net = ConvNet::new(PIXEL_INPUTS, NET_HIDDEN, 3, &mut rng(2));
    let g = route_pixel_baseline(&view(0.3), &net).unwrap();
    assert!(g.gates.data().iter().all(|&v| (v - 1.0 / 3.0).abs() <= 1e-15));
    let single = ConvNet::new(PIXEL_INPUTS, NET_HIDDEN, 1, &mut rng(2));
    assert!(route_pixel_baseline(&view(0.3), &single).unwrap().gates.data().iter().all(|&v| v == 1.0));
    let mut trained = net.clone();
    let mut r = rng(4);
    for v in trained.params_mut() {
        *v += r.random_range(-0.5..0.5);
    }
    assert_eq!(
        route_pixel_baseline(&view(0.3), &trained).unwrap(),
        route_pixel_baseline(&view(0.3), &trained).unwrap()
    );
}

#[test]
fn volume_baseline_saturation() {
    let es = [expert(1, 8), expert(2, 7)];
    let v = view(0.5);
    let rs = renders(&es, &v);
    let open = PerExpert::from_values(&[8, 7], vec![GATE_SATURATION; 15]).unwrap();
    let closed = PerExpert::from_values(&[8, 7], vec![-GATE_SATURATION; 15]).unwrap();
    let out = route_volume_baseline(&rs, &open).unwrap();
    // Ungated reference: plain renders summed, normalized by summed coverage.
    let mut want = ImageBuffer::zeros(16, 16, 3);
    for px in 0..256 {
        let cov: f64 = rs.iter().map(|r| 1.0 - r.graph.final_transmittance(px)).sum();
        for c in 0..3 {
            let s: f64 = rs.iter().map(|r| r.image.pixel(px)[c]).sum();
            want.pixel_mut(px)[c] = s / cov.max(1.0);
        }
    }
    assert!(out.max_abs_diff(&want) <= 1e-4);
    assert!(route_volume_baseline(&rs, &closed).unwrap().data().iter().all(|&x| x.abs() <= 1e-6));
    assert!(route_volume_baseline(&rs, &PerExpert::zeros(&[8, 6])).is_err());
}

#[test]
fn zero_upstream_and_single_expert_give_zero_gradients() {
    let es = [expert(1, 8), expert(2, 7)];
    let v = view(0.5);
    let rs = renders(&es, &v);
    for kind in RouterKind::ALL {
        let router = Router::init(kind, &[8, 7], &mut rng(1)).unwrap();
        let fwd = router.forward(&v, &rs).unwrap();
        let g = router.backward(&fwd, &rs, &ImageBuffer::zeros(16, 16, 3)).unwrap();
        assert!(RouterGroup::ALL.iter().all(|&grp| g.get(grp).iter().all(|&x| x == 0.0)), "{kind}");
    }
    let single = &rs[..1];
    for kind in [RouterKind::VolumeAware, RouterKind::Pixel] {
        let mut router = Router::init(kind, &[8], &mut rng(1)).unwrap();
        let mut r = rng(9);
        for grp in RouterGroup::ALL {
            for x in router.params_mut(grp) {
                *x += r.random_range(-1.0..1.0);
            }
        }
        let fwd = router.forward(&v, single).unwrap();
        assert_eq!(fwd.image, single[0].image);
        let g = router.backward(&fwd, single, &ImageBuffer::filled(16, 16, 3, 1.0)).unwrap();
        assert!(RouterGroup::ALL.iter().all(|&grp| g.get(grp).iter().all(|&x| x == 0.0)), "{kind}");
    }
}

#[test]
fn retain_drops_weight_triplets() {
    let router = Router::init(RouterKind::VolumeAware, &[3, 2], &mut rng(1)).unwrap();
    let kept = router.retain(&[vec![true, false, true], vec![false, true]]).unwrap();
    assert_eq!(kept.params(RouterGroup::WDir).len(), 3);
    let wd = router.params(RouterGroup::WDir);
    assert_eq!(kept.params(RouterGroup::WDir), &[wd[0], wd[2], wd[4]]);
    assert_eq!(kept.params(RouterGroup::Net), router.params(RouterGroup::Net));
    assert!(router.retain(&[vec![true]]).is_err());
}

#[test]
fn router_init_is_uniform() {
    let es = [expert(1, 8), expert(2, 7)];
    let v = view(0.5);
    let rs = renders(&es, &v);
    let router = Router::init(RouterKind::VolumeAware, &[8, 7], &mut rng(1)).unwrap();
    let g = router.forward(&v, &rs).unwrap().gating.unwrap();
    assert!(g.gates.data().iter().all(|&x| (x - 0.5).abs() < 1e-12));
}
