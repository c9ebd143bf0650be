use moesplat_core::metrics::{psnr, ssim, SsimConfig};
use moesplat_core::train::{LossConfig, Radam, RadamConfig};
use moesplat_core::ImageBuffer;
use moesplat_testkit::{gradcheck, metrics as oracle, random, recurrence};
use proptest::prelude::*;
use rand::Rng;

fn image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
}

fn check_loss_gradient(cfg: &LossConfig, seed: u64) {
    let worst = gradcheck::loss(cfg, seed);
    assert!(worst <= gradcheck::TOLERANCE, "seed {seed} λ={}: rel err {worst}", cfg.lambda_ssim);
}

#[test]
fn l1_gradient_matches_finite_differences() {
    let cfg = LossConfig { lambda_ssim: 0.0, ..Default::default() };
    for seed in 0..50 {
        check_loss_gradient(&cfg, seed);
    }
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let cfg = LossConfig { lambda_ssim: 1.0, ..Default::default() };
    for seed in 100..150 {
        check_loss_gradient(&cfg, seed);
    }
}

#[test]
fn combined_loss_gradient_matches_finite_differences() {
    for seed in 200..250 {
        check_loss_gradient(&LossConfig::default(), seed);
    }
}

#[test]
fn ssim_matches_sliding_window_reference() {
    for seed in 0..20 {
        let mut rng = random::rng(seed);
        let (h, w, c) = (rng.random_range(5..20), rng.random_range(5..20), rng.random_range(1..4));
        let a = image(&mut rng, h, w, c);
        let b = image(&mut rng, h, w, c);
        let cfg = SsimConfig::default();
        let want = oracle::ssim(a.data(), b.data(), h, w, c, cfg.window, cfg.sigma, cfg.c1, cfg.c2);
        assert!((ssim(&a, &b, &cfg).unwrap() - want).abs() <= 1e-8, "seed {seed}");
        let cfg = SsimConfig { window: 5, sigma: 0.8, ..Default::default() };
        let want = oracle::ssim(a.data(), b.data(), h, w, c, cfg.window, cfg.sigma, cfg.c1, cfg.c2);
        assert!((ssim(&a, &b, &cfg).unwrap() - want).abs() <= 1e-8, "seed {seed}");
    }
}

#[test]
fn psnr_matches_direct_mse() {
    for seed in 0..20 {
        let mut rng = random::rng(seed);
        let a = image(&mut rng, 9, 7, 3);
        let b = image(&mut rng, 9, 7, 3);
        assert!((psnr(&a, &b).unwrap() - oracle::psnr(a.data(), b.data())).abs() <= 1e-9);
    }
}

proptest! {
    #[test]
    fn metrics_are_symmetric(seed in 0u64..1000) {
        let mut rng = random::rng(seed);
        let a = image(&mut rng, 12, 10, 3);
        let b = image(&mut rng, 12, 10, 3);
        let cfg = SsimConfig::default();
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((ssim(&a, &b, &cfg).unwrap() - ssim(&b, &a, &cfg).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn radam_matches_reference_recurrence() {
    for seed in 0..10 {
        let mut rng = random::rng(seed);
        let start: f64 = rng.random_range(-2.0..2.0);
        let lr: f64 = rng.random_range(0.001..0.5);
        let phase: f64 = rng.random_range(0.0..6.0);
        let grad = |t: usize, p: f64| 2.0 * (p - 0.3) + 0.5 * (t as f64 * 0.37 + phase).sin();
        let want = recurrence::radam_trajectory(start, lr, 100, grad);
        let mut opt = Radam::new(1, RadamConfig::default());
        let mut p = [start];
        for (t, w) in want.iter().enumerate() {
            let g = grad(t + 1, p[0]);
            opt.step(&mut p, &[g], lr, "p").unwrap();
            assert!((p[0] - w).abs() <= 1e-10, "seed {seed} step {t}: {} vs {w}", p[0]);
        }
    }
}
