//! Two-stage training, distillation and progressive pruning.
//!
//! Stage 1 fits every expert independently to the ground truth and then
//! freezes it. Stage 2 fits only the router against the blended image, with
//! expert renders cached per view. Distillation retrains one expert kind
//! from scratch against the ground truth where its gate is high and against
//! the mixture's render elsewhere.

mod loss;
mod optim;

pub use loss::{loss, LossConfig};
pub use optim::{Radam, RadamConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertGrads, ExpertKind, ExpertModel, ExpertRender, ParamGroup};
use crate::fused::{self, ImportanceTable, PrunePolicy, PruneReport, Scalarization};
use crate::image::ImageBuffer;
use crate::metrics::psnr;
use crate::moe::MoeModel;
use crate::router::{Router, RouterGrads, RouterGroup};
use crate::scene::{Dataset, Split};

/// Learning rates of the expert parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertRates {
    pub color: f64,
    pub opacity: f64,
    pub motion: f64,
    pub network: f64,
}

impl Default for ExpertRates {
    fn default() -> Self {
        Self {
            color: 0.02,
            opacity: 0.02,
            motion: 0.004,
            network: 0.002,
        }
    }
}

impl ExpertRates {
    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Color => self.color,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Motion => self.motion,
            ParamGroup::Network => self.network,
        }
    }
}

/// Learning rates of the router parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterRates {
    pub w: f64,
    pub w_dir: f64,
    pub w_time: f64,
    pub net: f64,
    pub gate: f64,
}

impl Default for RouterRates {
    fn default() -> Self {
        Self {
            w: 0.5,
            w_dir: 0.5,
            w_time: 0.05,
            net: 0.05,
            gate: 0.5,
        }
    }
}

impl RouterRates {
    pub fn get(&self, g: RouterGroup) -> f64 {
        match g {
            RouterGroup::W => self.w,
            RouterGroup::WDir => self.w_dir,
            RouterGroup::WTime => self.w_time,
            RouterGroup::Net => self.net,
            RouterGroup::Gate => self.gate,
        }
    }
}

/// Optimizer settings and step budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub expert_lr: ExpertRates,
    pub router_lr: RouterRates,
    pub radam: RadamConfig,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub distill_steps: usize,
    /// Training views per step.
    pub batch: usize,
    pub seed: u64,
    /// Log every this many steps (the last step is always logged).
    pub log_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            expert_lr: ExpertRates::default(),
            router_lr: RouterRates::default(),
            radam: RadamConfig::default(),
            stage1_steps: 2000,
            stage2_steps: 1500,
            distill_steps: 2000,
            batch: 2,
            seed: 0,
            log_every: 50,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let e = self.expert_lr;
        let r = self.router_lr;
        let rates = [e.color, e.opacity, e.motion, e.network, r.w, r.w_dir, r.w_time, r.net, r.gate];
        if rates.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::param("learning rates must be positive and finite"));
        }
        let RadamConfig { beta1, beta2, eps } = self.radam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(Error::param("radam betas must lie in [0, 1) and eps must be positive"));
        }
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::param("batch and log interval must be positive"));
        }
        Ok(())
    }
}

/// Mixing weight between ground-truth and teacher supervision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::param(format!("distillation lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Experts,
    Router,
    Distill,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Experts => "experts",
            Stage::Router => "router",
            Stage::Distill => "distill",
            Stage::Finetune => "finetune",
        }
    }
}

/// One logged optimization step; `loss` and `psnr` are batch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub stage: Stage,
    pub expert: Option<usize>,
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
}

pub const LOG_HEADER: &str = "stage,expert,step,loss,psnr";

/// Renders log rows as CSV with [`LOG_HEADER`].
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let expert = r.expert.map_or(String::new(), |k| k.to_string());
        out.push_str(&format!("{},{},{},{:.9},{:.6}\n", r.stage.as_str(), expert, r.step, r.loss, r.psnr));
    }
    out
}

/// Deterministic epoch-shuffled batches of training view indices.
struct ViewSampler {
    views: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl ViewSampler {
    fn new(dataset: &Dataset, seed: u64) -> Result<Self> {
        let views = dataset.indices(Split::Train);
        if views.is_empty() {
            return Err(Error::input("dataset has no training views"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut views = views;
        views.shuffle(&mut rng);
        Ok(Self { views, pos: 0, rng })
    }

    fn batch(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.views.len() {
                    self.views.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.views[self.pos - 1]
            })
            .collect()
    }
}

fn stream_seed(seed: u64, stage: Stage, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((stage as u64) << 48) ^ index as u64
}

fn should_log(step: usize, steps: usize, every: usize) -> bool {
    step % every == 0 || step + 1 == steps
}

/// Per-expert optimizer state, one RAdam per parameter group.
struct ExpertOptimizer {
    groups: Vec<(ParamGroup, Radam)>,
}

impl ExpertOptimizer {
    fn new(model: &ExpertModel, cfg: RadamConfig) -> Self {
        Self {
            groups: ParamGroup::ALL.iter().map(|&g| (g, Radam::new(model.params(g).len(), cfg))).collect(),
        }
    }

    fn step(&mut self, model: &mut ExpertModel, grads: &ExpertGrads, rates: &ExpertRates) -> Result<()> {
        let trainable = model.trainable();
        for (g, opt) in &mut self.groups {
            if trainable.get(*g) && !model.params(*g).is_empty() {
                opt.step(model.params_mut(*g), grads.get(*g), rates.get(*g), g.as_str())?;
            }
        }
        model.clamp();
        Ok(())
    }
}

/// Fits one expert by minimizing `objective(view index, render)` over the
/// training views.
fn fit_expert<F>(
    model: &mut ExpertModel,
    dataset: &Dataset,
    steps: usize,
    optim: &OptimConfig,
    stage: Stage,
    index: usize,
    objective: F,
) -> Result<Vec<LogRow>>
where
    F: Fn(usize, &ImageBuffer) -> Result<(f64, ImageBuffer)> + Sync,
{
    let mut sampler = ViewSampler::new(dataset, stream_seed(optim.seed, stage, index))?;
    let mut opt = ExpertOptimizer::new(model, optim.radam);
    let mut rows = Vec::new();
    for step in 0..steps {
        let batch = sampler.batch(optim.batch);
        let current = &*model;
        let results: Vec<(f64, f64, ExpertGrads)> = batch
            .par_iter()
            .map(|&vi| {
                let view = dataset.view(vi);
                let render = current.render(view)?;
                let (l, d) = objective(vi, &render.image)?;
                let p = psnr(&render.image, view.gt()?)?;
                Ok((l, p, current.backward(&render, &d)?))
            })
            .collect::<Result<_>>()?;
        let mut grads = ExpertGrads::zeros_like(model);
        let (mut l_sum, mut p_sum) = (0.0, 0.0);
        for (l, p, g) in &results {
            grads.add(g);
            l_sum += l;
            p_sum += p;
        }
        let n = results.len() as f64;
        grads.scale(1.0 / n);
        opt.step(model, &grads, &optim.expert_lr)?;
        if should_log(step, steps, optim.log_every) {
            rows.push(LogRow {
                stage,
                expert: Some(index),
                step,
                loss: l_sum / n,
                psnr: p_sum / n,
            });
        }
    }
    Ok(rows)
}

/// Per-expert outcome of stage 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertReport {
    pub expert: usize,
    pub kind: ExpertKind,
    /// Mean loss over all training views after the last step.
    pub final_train_loss: f64,
}

/// Mean loss of `model` over the training views.
pub fn train_loss(model: &ExpertModel, dataset: &Dataset, loss_cfg: &LossConfig) -> Result<f64> {
    let idx = dataset.indices(Split::Train);
    let losses: Vec<f64> = idx
        .par_iter()
        .map(|&vi| {
            let view = dataset.view(vi);
            Ok(loss(&model.render(view)?.image, view.gt()?, loss_cfg)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Stage 1: trains every expert independently against the ground truth,
/// then freezes all of them.
pub fn train_stage1(
    experts: &mut [ExpertModel],
    dataset: &Dataset,
    optim: &OptimConfig,
    loss_cfg: &LossConfig,
) -> Result<(Vec<ExpertReport>, Vec<LogRow>)> {
    optim.validate()?;
    loss_cfg.validate()?;
    let results: Vec<(ExpertReport, Vec<LogRow>)> = experts
        .par_iter_mut()
        .enumerate()
        .map(|(k, model)| {
            let rows = fit_expert(model, dataset, optim.stage1_steps, optim, Stage::Experts, k, |vi, img| {
                loss(img, dataset.view(vi).gt()?, loss_cfg)
            })?;
            let report = ExpertReport {
                expert: k,
                kind: model.kind(),
                final_train_loss: train_loss(model, dataset, loss_cfg)?,
            };
            model.freeze();
            Ok((report, rows))
        })
        .collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(results.len());
    let mut rows = Vec::new();
    for (r, l) in results {
        reports.push(r);
        rows.extend(l);
    }
    Ok((reports, rows))
}

/// Retrains a fresh expert against the ground truth only, with the
/// distillation step budget; the baseline distillation is compared with.
pub fn train_gt_only(
    student: &mut ExpertModel,
    dataset: &Dataset,
    optim: &OptimConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<LogRow>> {
    optim.validate()?;
    loss_cfg.validate()?;
    fit_expert(student, dataset, optim.distill_steps, optim, Stage::Distill, 0, |vi, img| {
        loss(img, dataset.view(vi).gt()?, loss_cfg)
    })
}

fn expert_renders(experts: &[ExpertModel], dataset: &Dataset, views: &[usize]) -> Result<Vec<Vec<ExpertRender>>> {
    views
        .par_iter()
        .map(|&vi| {
            let view = dataset.view(vi);
            experts.iter().enumerate().map(|(k, e)| e.render_as(view, k)).collect()
        })
        .collect()
}

/// Stage 2: trains only the router on the blended image. Every expert must
/// be frozen; their renders are computed once per training view.
pub fn train_stage2(
    router: &mut Router,
    experts: &[ExpertModel],
    dataset: &Dataset,
    steps: usize,
    optim: &OptimConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<LogRow>> {
    optim.validate()?;
    loss_cfg.validate()?;
    if let Some(k) = experts.iter().position(|e| !e.is_frozen()) {
        return Err(Error::state(format!("expert {k} must be frozen before router training")));
    }
    let train = dataset.indices(Split::Train);
    let cache = expert_renders(experts, dataset, &train)?;
    let slot: std::collections::HashMap<usize, usize> = train.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut sampler = ViewSampler::new(dataset, stream_seed(optim.seed, Stage::Router, 0))?;
    let mut opts: Vec<(RouterGroup, Radam)> = RouterGroup::ALL
        .iter()
        .map(|&g| (g, Radam::new(router.params(g).len(), optim.radam)))
        .collect();
    let mut rows = Vec::new();
    for step in 0..steps {
        let batch = sampler.batch(optim.batch);
        let current = &*router;
        let results: Vec<(f64, f64, RouterGrads)> = batch
            .par_iter()
            .map(|&vi| {
                let view = dataset.view(vi);
                let renders = &cache[slot[&vi]];
                let fwd = current.forward(view, renders)?;
                let gt = view.gt()?;
                let (l, d) = loss(&fwd.image, gt, loss_cfg)?;
                let p = psnr(&fwd.image, gt)?;
                Ok((l, p, current.backward(&fwd, renders, &d)?))
            })
            .collect::<Result<_>>()?;
        let mut grads = RouterGrads::zeros_like(router);
        let (mut l_sum, mut p_sum) = (0.0, 0.0);
        for (l, p, g) in &results {
            grads.add(g);
            l_sum += l;
            p_sum += p;
        }
        let n = results.len() as f64;
        grads.scale(1.0 / n);
        for (g, opt) in &mut opts {
            if !router.params(*g).is_empty() {
                opt.step(router.params_mut(*g), grads.get(*g), optim.router_lr.get(*g), g.as_str())?;
            }
        }
        if should_log(step, steps, optim.log_every) {
            rows.push(LogRow {
                stage: Stage::Router,
                expert: None,
                step,
                loss: l_sum / n,
                psnr: p_sum / n,
            });
        }
    }
    Ok(rows)
}

/// `λ·L(G·I_E, G·I_GT) + (1 − λ)·L((1 − G)·I_E, (1 − G)·I_MoE)` and its
/// gradient with respect to the student image `I_E`. `gate` is one channel.
pub fn distill_loss(
    student: &ImageBuffer,
    gate: &ImageBuffer,
    gt: &ImageBuffer,
    teacher: &ImageBuffer,
    lambda: f64,
    loss_cfg: &LossConfig,
) -> Result<(f64, ImageBuffer)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("distillation lambda {lambda} outside [0, 1]")));
    }
    student.ensure_same_shape(gt, "distillation ground truth")?;
    student.ensure_same_shape(teacher, "distillation teacher")?;
    let inv = gate.map(|g| 1.0 - g);
    let (l_gt, d_gt) = loss(&student.mul_plane(gate)?, &gt.mul_plane(gate)?, loss_cfg)?;
    let (l_t, d_t) = loss(&student.mul_plane(&inv)?, &teacher.mul_plane(&inv)?, loss_cfg)?;
    let grad = d_gt.mul_plane(gate)?.axpby(lambda, &d_t.mul_plane(&inv)?, 1.0 - lambda);
    Ok((lambda * l_gt + (1.0 - lambda) * l_t, grad))
}

/// Per training view: the teacher's gate for expert `k` and its blended render.
pub fn teacher_targets(teacher: &MoeModel, k: usize, dataset: &Dataset) -> Result<Vec<(usize, ImageBuffer, ImageBuffer)>> {
    if k >= teacher.experts.len() {
        return Err(Error::input(format!("teacher has no expert {k}")));
    }
    dataset
        .indices(Split::Train)
        .par_iter()
        .map(|&vi| {
            let r = teacher.render(dataset.view(vi))?;
            let gating = r.gating().ok_or_else(|| Error::state("distillation needs a teacher with per-pixel gates"))?;
            Ok((vi, gating.gate(k), r.forward.image))
        })
        .collect()
}

/// Distills `student` (freshly initialized) from the teacher expert of the
/// same kind.
pub fn distill(
    student: &mut ExpertModel,
    teacher: &MoeModel,
    dataset: &Dataset,
    cfg: &DistillConfig,
    optim: &OptimConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    optim.validate()?;
    loss_cfg.validate()?;
    let k = teacher
        .experts
        .iter()
        .position(|e| e.kind() == student.kind())
        .ok_or_else(|| Error::input(format!("teacher has no {} expert", student.kind())))?;
    let targets = teacher_targets(teacher, k, dataset)?;
    let slot: std::collections::HashMap<usize, usize> = targets.iter().enumerate().map(|(i, t)| (t.0, i)).collect();
    fit_expert(student, dataset, optim.distill_steps, optim, Stage::Distill, k, |vi, img| {
        let (_, gate, moe) = &targets[slot[&vi]];
        distill_loss(img, gate, dataset.view(vi).gt()?, moe, cfg.lambda, loss_cfg)
    })
}

/// Where pruning scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Importance(Scalarization),
    /// Uniform random scores from the given seed (a baseline).
    Random(u64),
}

/// Pruning in rounds with router fine-tuning in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSchedule {
    pub rounds: usize,
    pub finetune_steps: usize,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            rounds: 2,
            finetune_steps: 200,
        }
    }
}

/// Prunes in `schedule.rounds` rounds, rescoring and fine-tuning the router
/// after each. A ratio policy removes `⌊ρ·N⌋` of the original Gaussians in
/// total, spread evenly over the rounds.
pub fn prune_progressive(
    model: &MoeModel,
    dataset: &Dataset,
    policy: PrunePolicy,
    schedule: &PruneSchedule,
    source: ScoreSource,
    optim: &OptimConfig,
    loss_cfg: &LossConfig,
) -> Result<(MoeModel, Vec<PruneReport>, Vec<LogRow>)> {
    if schedule.rounds == 0 {
        return Err(Error::param("pruning needs at least one round"));
    }
    let total: usize = model.gaussian_counts().iter().sum();
    let target = match policy {
        PrunePolicy::Ratio(rho) => {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::param(format!("prune ratio {rho} outside [0, 1)")));
            }
            Some((rho * total as f64).floor() as usize)
        }
        PrunePolicy::Threshold(_) => None,
    };
    let mut current = model.clone();
    let mut removed = 0;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for round in 0..schedule.rounds {
        let table = match source {
            ScoreSource::Importance(s) => fused::importance_scores(&current.router, &current.experts, dataset, s)?,
            ScoreSource::Random(seed) => ImportanceTable::random(
                &current.gaussian_counts(),
                &mut ChaCha8Rng::seed_from_u64(stream_seed(seed, Stage::Finetune, round)),
            ),
        };
        let keep = match target {
            Some(n) => {
                let goal = n * (round + 1) / schedule.rounds;
                let mut keep: Vec<Vec<bool>> = current.gaussian_counts().iter().map(|&c| vec![true; c]).collect();
                for (k, i) in fused::lowest(&table, goal - removed) {
                    keep[k][i] = false;
                }
                keep
            }
            None => fused::select(&table, policy)?,
        };
        let (experts, mut router, report) = fused::apply_keep(&current.experts, &current.router, &table, &keep)?;
        removed += report.removed();
        if schedule.finetune_steps > 0 {
            let mut r = train_stage2(&mut router, &experts, dataset, schedule.finetune_steps, optim, loss_cfg)?;
            r.iter_mut().for_each(|row| row.stage = Stage::Finetune);
            rows.extend(r);
        }
        current = MoeModel::new(experts, router)?;
        reports.push(report);
    }
    Ok((current, reports, rows))
}
