//! Run configuration: one TOML file, validated before any computation.

use std::path::{Path, PathBuf};

use moesplat_core::experts::{ExpertConfig, ExpertKind};
use moesplat_core::fused::{PrunePolicy, Scalarization};
use moesplat_core::metrics::Normalization;
use moesplat_core::router::RouterKind;
use moesplat_core::scene::SceneSpec;
use moesplat_core::train::{DistillConfig, LossConfig, OptimConfig, PruneSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Where the dataset comes from: a directory written by `synth`, or a
/// procedural spec generated in memory from the run seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSource {
    pub path: Option<PathBuf>,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RosterConfig {
    pub kinds: Vec<ExpertKind>,
    pub model: ExpertConfig,
}

impl Default for RosterConfig {
    fn default() -> Self {
        Self {
            kinds: vec![ExpertKind::Polynomial, ExpertKind::Keyframe],
            model: ExpertConfig::default(),
        }
    }
}

/// Pruning scores: gate-aware importance or a uniform random baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    Importance,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub policy: PrunePolicy,
    pub scores: ScoreKind,
    pub scalarization: Scalarization,
    pub schedule: PruneSchedule,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            policy: PrunePolicy::Ratio(0.4),
            scores: ScoreKind::Importance,
            scalarization: Scalarization::default(),
            schedule: PruneSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    /// Kind of the student expert; must exist among the teacher's experts.
    pub student: ExpertKind,
    pub lambda: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            student: ExpertKind::Polynomial,
            lambda: DistillConfig::default().lambda,
        }
    }
}

impl DistillSection {
    pub fn config(&self) -> DistillConfig {
        DistillConfig { lambda: self.lambda }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Dataset view indices; empty means every test view.
    pub views: Vec<usize>,
    pub single_pass: bool,
    pub stats: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out: PathBuf,
    /// Model directory read by render, prune, distill and eval.
    pub checkpoint: Option<PathBuf>,
    pub router: RouterKind,
    pub scene: SceneSource,
    pub experts: RosterConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub distill: DistillSection,
    pub prune: PruneConfig,
    pub render: RenderConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: PathBuf::from("out"),
            checkpoint: None,
            router: RouterKind::VolumeAware,
            scene: SceneSource::default(),
            experts: RosterConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            distill: DistillSection::default(),
            prune: PruneConfig::default(),
            render: RenderConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks every section; called after flag overrides and before any
    /// computation.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.experts.kinds.is_empty() {
            return Err(CliError::Config("expert roster is empty".into()));
        }
        if self.scene.path.is_none() {
            self.scene.spec.validate()?;
        }
        self.optim.validate()?;
        self.loss.validate()?;
        self.distill.config().validate()?;
        match self.prune.policy {
            PrunePolicy::Ratio(r) if !(0.0..1.0).contains(&r) => {
                return Err(CliError::Config(format!("prune ratio {r} outside [0, 1)")))
            }
            PrunePolicy::Threshold(t) if !t.is_finite() => {
                return Err(CliError::Config("prune threshold must be finite".into()))
            }
            _ => {}
        }
        if self.prune.schedule.rounds == 0 {
            return Err(CliError::Config("prune rounds must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("sed = 3"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("[optim]\nbatchsize = 3"), Err(CliError::Config(_))));
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.prune.policy = PrunePolicy::Threshold(0.25);
        cfg.experts.kinds = vec![ExpertKind::Deform];
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn wrong_schema_version_is_a_config_error() {
        let cfg = RunConfig::parse("schema_version = 2").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
