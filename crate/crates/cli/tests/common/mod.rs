#![allow(dead_code)]

use std::path::Path;

use moesplat::RunConfig;
use moesplat_core::scene::SceneSpec;

/// The 32×32, 50-Gaussian micro configuration with short stage budgets.
pub fn micro_config(out: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.optim.seed = seed;
    cfg.out = out.to_path_buf();
    cfg.scene.spec = SceneSpec::micro();
    cfg.optim.stage1_steps = 300;
    cfg.optim.stage2_steps = 200;
    cfg.optim.distill_steps = 300;
    cfg.prune.schedule.finetune_steps = 50;
    cfg
}
