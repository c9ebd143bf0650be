use moesplat::artifacts::sha256_hex;
use moesplat::{Overrides, RunConfig};
use moesplat_core::experts::ExpertKind;
use moesplat_core::fused::PrunePolicy;
use moesplat_core::router::RouterKind;
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = ExpertKind> {
    prop::sample::select(ExpertKind::ALL.to_vec())
}

fn config() -> impl Strategy<Value = RunConfig> {
    (
        any::<u64>(),
        prop::collection::vec(kind(), 1..4),
        prop::sample::select(RouterKind::ALL.to_vec()),
        0usize..5000,
        1usize..8,
        0.0f64..0.99,
        0.0f64..=1.0,
    )
        .prop_map(|(seed, kinds, router, steps, batch, ratio, lambda)| {
            let mut cfg = RunConfig::default();
            cfg.seed = seed;
            cfg.experts.kinds = kinds;
            cfg.router = router;
            cfg.optim.stage1_steps = steps;
            cfg.optim.batch = batch;
            cfg.prune.policy = PrunePolicy::Ratio(ratio);
            cfg.distill.lambda = lambda;
            cfg
        })
}

proptest! {
    #[test]
    fn valid_configs_round_trip_through_toml(cfg in config()) {
        cfg.validate().unwrap();
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn flags_win_and_optimizer_follows_run_seed(cfg in config(), seed in proptest::option::of(any::<u64>()), single in any::<bool>()) {
        let flags = Overrides { seed, single_pass: single, ..Overrides::default() };
        let eff = flags.apply(cfg.clone());
        prop_assert_eq!(eff.seed, seed.unwrap_or(cfg.seed));
        prop_assert_eq!(eff.optim.seed, eff.seed);
        prop_assert_eq!(eff.render.single_pass, single || cfg.render.single_pass);
        prop_assert_eq!(eff.experts, cfg.experts);
    }

    #[test]
    fn content_hash_is_hex_sha256(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let h = sha256_hex(&bytes);
        prop_assert_eq!(h.len(), 64);
        prop_assert!(h.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        let mut other = bytes.clone();
        other.push(0);
        prop_assert_ne!(sha256_hex(&other), h);
    }
}

#[test]
fn empty_digest_matches_known_value() {
    assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}
