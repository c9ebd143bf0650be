//! Command-line driver: configuration, output directories and the
//! `synth`/`train`/`render`/`prune`/`distill`/`eval`/`ablate` commands.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod model;

use std::path::PathBuf;

use moesplat_core::experts::ExpertKind;

pub use artifacts::Manifest;
pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Render,
    Prune,
    Distill,
    Eval,
    Ablate,
}

/// Command-line values that override the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub views: Option<Vec<usize>>,
    pub single_pass: bool,
    pub stats: bool,
    pub student: Option<ExpertKind>,
}

impl Overrides {
    /// The effective configuration: file values, then flags. The optimizer
    /// seed always follows the run seed.
    pub fn apply(&self, mut cfg: RunConfig) -> RunConfig {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.optim.seed = cfg.seed;
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if let Some(s) = &self.scene {
            cfg.scene.path = Some(s.clone());
        }
        if let Some(v) = &self.views {
            cfg.render.views = v.clone();
        }
        cfg.render.single_pass |= self.single_pass;
        cfg.render.stats |= self.stats;
        if let Some(k) = self.student {
            cfg.distill.student = k;
        }
        cfg
    }
}

/// Validates `cfg` and runs `command`.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    match command {
        Command::Synth => commands::synth(cfg),
        Command::Train => commands::train(cfg),
        Command::Render => commands::render(cfg),
        Command::Prune => commands::prune(cfg),
        Command::Distill => commands::distill(cfg),
        Command::Eval => commands::eval(cfg),
        Command::Ablate => commands::ablate(cfg),
    }
}
