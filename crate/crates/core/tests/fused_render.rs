use moesplat_core::experts::{ExpertConfig, ExpertKind, ExpertModel, ExpertRender};
use moesplat_core::fused::{importance_scores, render_single_pass, MergedBatch, RenderStats, Scalarization, Transmittance};
use moesplat_core::raster::ChannelSplat;
use moesplat_core::router::{Router, RouterGroup, RouterKind};
use moesplat_core::scene::{Camera, Dataset, Gaussian3D, Resolution, Split, View};
use moesplat_testkit::{composite, fd, random};
use nalgebra::Vector3;
use rand::Rng;

fn merged_batch(splats: &[ChannelSplat], experts: usize) -> MergedBatch {
    let mut per: Vec<Vec<ChannelSplat>> = vec![Vec::new(); experts];
    for s in splats {
        per[s.source.expert as usize].push(s.clone());
    }
    let mut b = MergedBatch::new(per, splats[0].channels.len()).unwrap();
    b.sort(&mut RenderStats::default()).unwrap();
    b
}

#[test]
fn single_pass_matches_merged_list_oracle_in_both_modes() {
    let (h, w) = (20, 24);
    for seed in 0..50 {
        let mut rng = random::rng(seed);
        let experts = 1 + (seed as usize % 3);
        let splats = random::splats(&mut rng, experts, 12, 3, h, w);
        let batch = merged_batch(&splats, experts);
        for (mode, shared) in [(Transmittance::Independent, false), (Transmittance::Shared, true)] {
            let out = render_single_pass(&batch, Resolution::new(h, w), mode, &mut RenderStats::default()).unwrap();
            let oracle = composite::merged(&splats, experts, h, w, shared);
            for (img, want) in out.images.iter().zip(&oracle) {
                let err = img.data().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err <= 1e-9, "seed {seed} {mode:?}: {err}");
            }
        }
    }
}

#[test]
fn independent_single_pass_matches_separate_renders() {
    let (h, w) = (24, 24);
    for seed in 100..150 {
        let mut rng = random::rng(seed);
        let splats = random::splats(&mut rng, 3, 15, 3, h, w);
        let batch = merged_batch(&splats, 3);
        let out = render_single_pass(&batch, Resolution::new(h, w), Transmittance::Independent, &mut RenderStats::default()).unwrap();
        for k in 0..3 {
            let own: Vec<ChannelSplat> = splats.iter().filter(|s| s.source.expert as usize == k).cloned().collect();
            let (img, graph) = moesplat_core::raster::rasterize(&own, Resolution::new(h, w)).unwrap();
            assert_eq!(out.images[k], img, "seed {seed} expert {k}");
            assert_eq!(out.graphs.as_ref().unwrap()[k], graph);
        }
    }
}

fn fixture(seed: u64) -> (Vec<ExpertModel>, Router, View) {
    let mut rng = random::rng(seed);
    let cam = Camera::look_at(
        Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        24.0,
        Resolution::new(14, 14),
    )
    .unwrap();
    let view = View::new(cam, rng.random_range(0.1..1.0), Split::Train).unwrap();
    let experts: Vec<ExpertModel> = (0..2)
        .map(|_| {
            let gs: Vec<Gaussian3D> = (0..5)
                .map(|_| {
                    let mean = Vector3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), rng.random_range(-0.3..0.3));
                    let color = Vector3::from_fn(|_, _| rng.random_range(0.0..1.0));
                    Gaussian3D::isotropic(mean, rng.random_range(0.15..0.35), rng.random_range(0.2..0.9), color).unwrap()
                })
                .collect();
            ExpertModel::from_static(ExpertKind::Polynomial, &gs, &ExpertConfig::default(), &mut rng).unwrap()
        })
        .collect();
    let mut router = Router::init(RouterKind::VolumeAware, &[5, 5], &mut rng).unwrap();
    for g in RouterGroup::ALL {
        for v in router.params_mut(g) {
            *v += rng.random_range(-1.0..1.0);
        }
    }
    (experts, router, view)
}

fn gate_plane(router: &Router, renders: &[ExpertRender], view: &View, k: usize) -> Vec<f64> {
    router.forward(view, renders).unwrap().gating.unwrap().gate(k).into_vec()
}

/// Finite-difference score of Gaussian `i` of expert `k` at one step size.
fn numeric_score(router: &Router, renders: &[ExpertRender], view: &View, k: usize, i: usize, s: Scalarization, h: f64) -> f64 {
    let groups = [RouterGroup::W, RouterGroup::WDir, RouterGroup::WTime];
    let idx = if k == 0 { i } else { 5 + i };
    let mut total = 0.0;
    for g in groups {
        let mut plus = router.clone();
        plus.params_mut(g)[idx] += h;
        let mut minus = router.clone();
        minus.params_mut(g)[idx] -= h;
        let a = gate_plane(&plus, renders, view, k);
        let b = gate_plane(&minus, renders, view, k);
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect();
        total += match s {
            Scalarization::Sum => d.iter().sum::<f64>().powi(2),
            Scalarization::Mean => (d.iter().sum::<f64>() / d.len() as f64).powi(2),
            Scalarization::PixelFrobenius => d.iter().map(|v| v * v).sum::<f64>(),
        };
    }
    total.sqrt()
}

#[test]
fn importance_scores_match_finite_differences() {
    for seed in 0..20 {
        let (experts, router, view) = fixture(seed);
        let renders: Vec<ExpertRender> = experts.iter().enumerate().map(|(k, e)| e.render_as(&view, k).unwrap()).collect();
        let ds = Dataset::new(vec![view.clone()]).unwrap();
        for s in [Scalarization::Sum, Scalarization::Mean, Scalarization::PixelFrobenius] {
            let table = importance_scores(&router, &experts, &ds, s).unwrap();
            let scale = table.scores.values().iter().fold(0.0f64, |m, v| m.max(*v));
            for k in 0..2 {
                for i in 0..5 {
                    let analytic = table.scores.expert(k)[i];
                    let mut best = (f64::INFINITY, f64::NAN);
                    for h in [1e-5, 1e-4, 1e-6, 1e-7] {
                        let num = numeric_score(&router, &renders, &view, k, i, s, h);
                        let e = fd::rel_err(analytic, num, 1e-6 * scale);
                        if e < best.0 {
                            best = (e, num);
                        }
                        if e <= 1e-3 {
                            break;
                        }
                    }
                    let (err, num) = best;
                    assert!(err <= 1e-3, "seed {seed} {s:?} expert {k} gaussian {i}: {analytic} vs {num}");
                }
            }
        }
    }
}
