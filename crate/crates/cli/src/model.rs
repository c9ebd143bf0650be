//! Model directories and scene inputs.

use std::path::Path;

use moesplat_core::experts::{ExpertKind, ExpertModel};
use moesplat_core::moe::MoeModel;
use moesplat_core::router::{Router, RouterKind};
use moesplat_core::scene::{io, synth_scene, Dataset, Gaussian3D, GroundTruth};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{read, require, OutputDir};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MODEL_FILE: &str = "model.json";
pub const ROUTER_FILE: &str = "router.bin";
pub const DATASET_FILE: &str = "dataset.bin";
pub const INIT_FILE: &str = "init.bin";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.bin";

pub fn expert_file(k: usize) -> String {
    format!("expert_{k}.bin")
}

/// Index of a model directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelIndex {
    pub experts: Vec<ExpertKind>,
    /// Absent for expert-only models (e.g. a distilled student).
    pub router: Option<RouterKind>,
}

/// Experts with an optional router.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub experts: Vec<ExpertModel>,
    pub router: Option<Router>,
}

impl Checkpoint {
    pub fn moe(&self) -> Result<Option<MoeModel>> {
        match &self.router {
            Some(r) => Ok(Some(MoeModel::new(self.experts.clone(), r.clone())?)),
            None => Ok(None),
        }
    }

    pub fn save(&self, out: &mut OutputDir) -> Result<()> {
        for (k, e) in self.experts.iter().enumerate() {
            out.write(&expert_file(k), &io::encode_expert(e)?)?;
        }
        if let Some(r) = &self.router {
            out.write(ROUTER_FILE, &io::encode_router(r)?)?;
        }
        let index = ModelIndex {
            experts: self.experts.iter().map(ExpertModel::kind).collect(),
            router: self.router.as_ref().map(Router::kind),
        };
        let text = serde_json::to_string_pretty(&index).map_err(|e| CliError::Data(e.to_string()))?;
        out.write_str(MODEL_FILE, &text)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(MODEL_FILE);
        require(&index_path, "model index")?;
        let index: ModelIndex = serde_json::from_slice(&read(&index_path)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", index_path.display())))?;
        let experts = (0..index.experts.len())
            .map(|k| {
                let e = io::decode_expert(&read(&dir.join(expert_file(k)))?)?;
                if e.kind() != index.experts[k] {
                    return Err(CliError::Data(format!("expert {k} is {}, index says {}", e.kind(), index.experts[k])));
                }
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        let router = match index.router {
            Some(kind) => {
                let r = io::decode_router(&read(&dir.join(ROUTER_FILE))?)?;
                if r.kind() != kind {
                    return Err(CliError::Data(format!("router is {}, index says {kind}", r.kind())));
                }
                Some(r)
            }
            None => None,
        };
        let ckpt = Self { experts, router };
        ckpt.moe()?;
        Ok(ckpt)
    }
}

/// A dataset with the point cloud experts start from.
pub struct SceneData {
    pub dataset: Dataset,
    pub init: Vec<Gaussian3D>,
    pub ground_truth: Option<GroundTruth>,
}

/// Reads a `synth` output directory, or generates the configured spec.
pub fn load_scene(cfg: &RunConfig) -> Result<SceneData> {
    match &cfg.scene.path {
        Some(dir) => {
            let data = |name: &str| -> Result<Vec<u8>> {
                let p = dir.join(name);
                require(&p, "scene file")?;
                read(&p)
            };
            let dataset = io::decode_dataset(&data(DATASET_FILE)?)?;
            let (init, _) = io::decode_scene(&data(INIT_FILE)?)?;
            let gt_path = dir.join(GROUND_TRUTH_FILE);
            let ground_truth = if gt_path.exists() {
                Some(io::decode_ground_truth(&read(&gt_path)?)?)
            } else {
                None
            };
            Ok(SceneData {
                dataset,
                init,
                ground_truth,
            })
        }
        None => {
            let s = synth_scene(cfg.seed, &cfg.scene.spec)?;
            Ok(SceneData {
                dataset: s.dataset,
                init: s.init,
                ground_truth: Some(s.ground_truth),
            })
        }
    }
}

/// Deterministic RNG for component `index` of a run.
pub fn component_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(index))
}

/// Fresh experts of the configured kinds around the init cloud.
pub fn init_experts(cfg: &RunConfig, init: &[Gaussian3D]) -> Result<Vec<ExpertModel>> {
    cfg.experts
        .kinds
        .iter()
        .enumerate()
        .map(|(k, &kind)| Ok(ExpertModel::init(kind, init, &cfg.experts.model, &mut component_rng(cfg.seed, k as u64))?))
        .collect()
}

pub fn init_router(kind: RouterKind, experts: &[ExpertModel], seed: u64) -> Result<Router> {
    let counts: Vec<usize> = experts.iter().map(ExpertModel::len).collect();
    Ok(Router::init(kind, &counts, &mut component_rng(seed, 1000))?)
}
