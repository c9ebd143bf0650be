//! Random scene fixtures.

use moesplat_core::raster::{ChannelSplat, SourceId};
use moesplat_core::scene::Splat2D;
use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random anisotropic splat inside (and slightly beyond) a `height x width` image.
pub fn splat(rng: &mut impl Rng, source: SourceId, channels: usize, height: usize, width: usize) -> ChannelSplat {
    let mean = Vector2::new(
        rng.random_range(-2.0..width as f64 + 2.0),
        rng.random_range(-2.0..height as f64 + 2.0),
    );
    let sx: f64 = rng.random_range(0.8..4.0);
    let sy: f64 = rng.random_range(0.8..4.0);
    let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = th.sin_cos();
    let r = Matrix2::new(c, -s, s, c);
    let cov = r * Matrix2::new(sx * sx, 0.0, 0.0, sy * sy) * r.transpose() + Matrix2::identity() * 0.3;
    ChannelSplat {
        splat: Splat2D {
            mean,
            cov: (cov + cov.transpose()) * 0.5,
            depth: rng.random_range(1.0..10.0),
        },
        channels: (0..channels).map(|_| rng.random_range(-0.5..1.0)).collect(),
        opacity: rng.random_range(0.05..0.9),
        source,
    }
}

pub fn splats(rng: &mut impl Rng, experts: usize, per_expert: usize, channels: usize, height: usize, width: usize) -> Vec<ChannelSplat> {
    let mut out = Vec::with_capacity(experts * per_expert);
    for k in 0..experts {
        for i in 0..per_expert {
            out.push(splat(rng, SourceId::new(k, i), channels, height, width));
        }
    }
    out
}
