use moesplat_core::raster::{backward, rasterize};
use moesplat_core::scene::Resolution;
use moesplat_core::ImageBuffer;
use moesplat_testkit::{composite, gradcheck, random};
use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::Rng;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn tiled_matches_naive_on_random_scenes() {
    for trial in 0..200 {
        let mut rng = random::rng(1000 + trial);
        let (h, w) = (rng.random_range(8..40), rng.random_range(8..40));
        let splats = random::splats(&mut rng, 1, 30, 3, h, w);
        let (img, graph) = rasterize(&splats, Resolution::new(h, w)).unwrap();
        let reference = composite::naive(&splats, h, w);
        assert!(max_abs(img.data(), &reference) <= 1e-6, "trial {trial}");
        assert_eq!(graph.replay(&splats).unwrap(), img, "replay trial {trial}");
    }
}

#[test]
fn input_order_does_not_matter() {
    let mut rng = random::rng(7);
    let mut splats = random::splats(&mut rng, 2, 20, 2, 24, 24);
    let (a, _) = rasterize(&splats, Resolution::new(24, 24)).unwrap();
    for _ in 0..10 {
        splats.shuffle(&mut rng);
        let (b, _) = rasterize(&splats, Resolution::new(24, 24)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn backward_matches_finite_differences() {
    for trial in 0..50 {
        let worst = gradcheck::raster(500 + trial, 20, 16, 16, 3);
        assert!(worst <= 1e-3, "trial {trial}: rel err {worst}");
    }
}

#[test]
fn backward_is_linear_in_upstream() {
    let mut rng = random::rng(99);
    let splats = random::splats(&mut rng, 1, 25, 2, 20, 20);
    let (_, graph) = rasterize(&splats, Resolution::new(20, 20)).unwrap();
    let u = ImageBuffer::from_fn(20, 20, 2, |_, _, _| rng.random_range(-1.0..1.0));
    let v = ImageBuffer::from_fn(20, 20, 2, |_, _, _| rng.random_range(-1.0..1.0));
    let (a, b) = (0.7, -1.3);
    let gu = backward(&graph, &u).unwrap();
    let gv = backward(&graph, &v).unwrap();
    let gc = backward(&graph, &u.axpby(a, &v, b)).unwrap();
    for i in 0..gc.d_channels.len() {
        assert!((gc.d_channels[i] - (a * gu.d_channels[i] + b * gv.d_channels[i])).abs() <= 1e-9);
    }
    for i in 0..splats.len() {
        assert!((gc.d_opacity[i] - (a * gu.d_opacity[i] + b * gv.d_opacity[i])).abs() <= 1e-9);
        let m: Vector2<f64> = a * gu.d_mean2d[i] + b * gv.d_mean2d[i];
        assert!((gc.d_mean2d[i] - m).norm() <= 1e-9);
    }
}

#[test]
fn channel_backward_agrees_with_full_backward() {
    let mut rng = random::rng(5);
    let splats = random::splats(&mut rng, 1, 15, 3, 18, 18);
    let (_, graph) = rasterize(&splats, Resolution::new(18, 18)).unwrap();
    let up = ImageBuffer::from_fn(18, 18, 3, |_, _, _| rng.random_range(-1.0..1.0));
    let full = backward(&graph, &up).unwrap();
    let fast = graph.channel_backward(&up).unwrap();
    assert!(max_abs(&full.d_channels, &fast) <= 1e-12);
}
