//! The seven commands. Each reads a validated [`RunConfig`], writes into
//! `cfg.out` and returns the manifest of what it wrote.

use moesplat_core::experts::{ExpertModel, ExpertRender};
use moesplat_core::fused::{self, RenderStats};
use moesplat_core::metrics::{self, psnr, ssim, SpecializationRecord};
use moesplat_core::moe::MoeModel;
use moesplat_core::router::{GatingMap, RouterKind};
use moesplat_core::scene::{io, Dataset, GroundTruth, Split, View};
use moesplat_core::train::{self, log_csv, ScoreSource};
use moesplat_core::ImageBuffer;

use crate::artifacts::{Manifest, OutputDir, CONFIG_ECHO};
use crate::config::{RunConfig, ScoreKind};
use crate::error::{CliError, Result};
use crate::model::{
    component_rng, init_experts, init_router, load_scene, Checkpoint, SceneData, DATASET_FILE, GROUND_TRUTH_FILE, INIT_FILE,
};

pub const METRICS_HEADER: &str = "model,view,split,time,psnr,ssim";
pub const SUMMARY_HEADER: &str = "model,split,psnr,ssim";
pub const REGION_HEADER: &str = "model,region,regime,psnr";
pub const SPECIALIZATION_HEADER: &str = "expert,kind,motion_mean,motion_normalized,detail_mean,detail_normalized";
pub const REPORT_HEADER: &str = "expert,kind,final_train_loss";
pub const PRUNE_HEADER: &str = "round,expert,kept,removed,removed_max,kept_min";
pub const PRUNE_SUMMARY_HEADER: &str = "round,params_before,params_after,bytes_freed";
pub const ABLATION_HEADER: &str = "variant,psnr,ssim,parameters";
pub const STATS_HEADER: &str = "view,projection_passes,gaussians_projected,sort_passes,splats_sorted,contributions";

/// Opens the output directory and echoes the effective configuration.
fn begin(cfg: &RunConfig, command: &str) -> Result<OutputDir> {
    let mut out = OutputDir::create(&cfg.out, command, cfg.seed)?;
    out.write_str(CONFIG_ECHO, &cfg.to_toml()?)?;
    Ok(out)
}

fn checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let dir = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("this command needs a checkpoint directory".into()))?;
    Checkpoint::load(dir)
}

fn ensure_finite(image: &ImageBuffer, what: &str) -> Result<()> {
    if image.is_finite() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{what} contains non-finite values")))
    }
}

/// Generates the synthetic dataset, its init cloud and ground truth.
pub fn synth(cfg: &RunConfig) -> Result<Manifest> {
    if cfg.scene.path.is_some() {
        return Err(CliError::Config("synth generates a scene; scene.path must be unset".into()));
    }
    let SceneData {
        dataset,
        init,
        ground_truth,
    } = load_scene(cfg)?;
    let ground_truth = ground_truth.ok_or_else(|| CliError::Data("generated scene has no ground truth".into()))?;
    let mut out = begin(cfg, "synth")?;
    out.write(DATASET_FILE, &io::encode_dataset(&dataset)?)?;
    out.write(INIT_FILE, &io::encode_scene(&init, &[])?)?;
    out.write(GROUND_TRUTH_FILE, &io::encode_ground_truth(&ground_truth)?)?;
    for (i, view) in dataset.views().iter().enumerate() {
        out.write_image(&format!("gt/view_{i:03}"), view.gt()?)?;
    }
    out.finish()
}

/// Stage 1 (experts) then Stage 2 (router); writes a model directory.
pub fn train(cfg: &RunConfig) -> Result<Manifest> {
    let scene = load_scene(cfg)?;
    let mut experts = init_experts(cfg, &scene.init)?;
    let (reports, mut log) = train::train_stage1(&mut experts, &scene.dataset, &cfg.optim, &cfg.loss)?;
    let mut router = init_router(cfg.router, &experts, cfg.seed)?;
    log.extend(train::train_stage2(
        &mut router,
        &experts,
        &scene.dataset,
        cfg.optim.stage2_steps,
        &cfg.optim,
        &cfg.loss,
    )?);
    let ckpt = Checkpoint {
        experts,
        router: Some(router),
    };
    let mut out = begin(cfg, "train")?;
    ckpt.save(&mut out)?;
    out.write_str("train_log.csv", &log_csv(&log))?;
    let mut report = format!("{REPORT_HEADER}\n");
    for r in &reports {
        report.push_str(&format!("{},{},{:.9}\n", r.expert, r.kind.as_str(), r.final_train_loss));
    }
    out.write_str("report.csv", &report)?;
    out.finish()
}

/// Per-expert renders of one view, in one merged pass or one pass each.
fn expert_renders(experts: &[ExpertModel], view: &View, single_pass: bool, stats: &mut RenderStats) -> Result<Vec<ExpertRender>> {
    Ok(if single_pass {
        fused::render_experts_fused(experts, view, stats)?
    } else {
        fused::render_experts_separately(experts, view, stats)?
    })
}

fn selected_views(cfg: &RunConfig, dataset: &Dataset) -> Result<Vec<usize>> {
    if cfg.render.views.is_empty() {
        return Ok(dataset.indices(Split::Test));
    }
    if let Some(&v) = cfg.render.views.iter().find(|&&v| v >= dataset.len()) {
        return Err(CliError::Config(format!("view {v} out of range (dataset has {})", dataset.len())));
    }
    Ok(cfg.render.views.clone())
}

/// Renders the selected views: mixture image, per-expert images and gates.
pub fn render(cfg: &RunConfig) -> Result<Manifest> {
    let ckpt = checkpoint(cfg)?;
    let scene = load_scene(cfg)?;
    let views = selected_views(cfg, &scene.dataset)?;
    let mut out = begin(cfg, "render")?;
    let mut stats_csv = format!("{STATS_HEADER}\n");
    for &v in &views {
        let view = scene.dataset.view(v);
        let mut stats = RenderStats::default();
        let renders = expert_renders(&ckpt.experts, view, cfg.render.single_pass, &mut stats)?;
        for (k, r) in renders.iter().enumerate() {
            ensure_finite(&r.image, "expert render")?;
            out.write_image(&format!("view_{v:03}_expert_{k}"), &r.image)?;
        }
        if let Some(router) = &ckpt.router {
            let fwd = router.forward(view, &renders)?;
            ensure_finite(&fwd.image, "mixture render")?;
            out.write_image(&format!("view_{v:03}"), &fwd.image)?;
            if let Some(g) = &fwd.gating {
                for k in 0..g.experts() {
                    out.write_image(&format!("view_{v:03}_gate_{k}"), &g.gate(k))?;
                }
            }
        }
        stats_csv.push_str(&format!(
            "{v},{},{},{},{},{}\n",
            stats.projection_passes, stats.gaussians_projected, stats.sort_passes, stats.splats_sorted, stats.contributions
        ));
    }
    if cfg.render.stats {
        out.write_str("stats.csv", &stats_csv)?;
    }
    out.finish()
}

/// Progressive pruning with fine-tuning; writes the pruned model directory.
pub fn prune(cfg: &RunConfig) -> Result<Manifest> {
    let ckpt = checkpoint(cfg)?;
    let model = ckpt
        .moe()?
        .ok_or_else(|| CliError::Data("pruning needs a checkpoint with a router".into()))?;
    let scene = load_scene(cfg)?;
    let source = match cfg.prune.scores {
        ScoreKind::Importance => ScoreSource::Importance(cfg.prune.scalarization),
        ScoreKind::Random => ScoreSource::Random(cfg.seed),
    };
    let (pruned, reports, log) = train::prune_progressive(
        &model,
        &scene.dataset,
        cfg.prune.policy,
        &cfg.prune.schedule,
        source,
        &cfg.optim,
        &cfg.loss,
    )?;
    let mut out = begin(cfg, "prune")?;
    Checkpoint {
        experts: pruned.experts,
        router: Some(pruned.router),
    }
    .save(&mut out)?;
    let mut rows = format!("{PRUNE_HEADER}\n");
    let mut summary = format!("{PRUNE_SUMMARY_HEADER}\n");
    for (round, rep) in reports.iter().enumerate() {
        for r in &rep.rows {
            rows.push_str(&format!(
                "{round},{},{},{},{:.9e},{:.9e}\n",
                r.expert, r.kept, r.removed, r.removed_max, r.kept_min
            ));
        }
        summary.push_str(&format!("{round},{},{},{}\n", rep.params_before, rep.params_after, rep.bytes_freed()));
    }
    out.write_str("prune_report.csv", &rows)?;
    out.write_str("prune_summary.csv", &summary)?;
    out.write_str("finetune_log.csv", &log_csv(&log))?;
    out.finish()
}

/// Distills the teacher mixture into a single fresh expert of the student kind.
pub fn distill(cfg: &RunConfig) -> Result<Manifest> {
    let ckpt = checkpoint(cfg)?;
    let teacher = ckpt
        .moe()?
        .ok_or_else(|| CliError::Data("distillation needs a teacher with a router".into()))?;
    let scene = load_scene(cfg)?;
    let mut student = ExpertModel::init(
        cfg.distill.student,
        &scene.init,
        &cfg.experts.model,
        &mut component_rng(cfg.seed, 2000),
    )?;
    let log = train::distill(&mut student, &teacher, &scene.dataset, &cfg.distill.config(), &cfg.optim, &cfg.loss)?;
    student.freeze();
    let mut out = begin(cfg, "distill")?;
    Checkpoint {
        experts: vec![student],
        router: None,
    }
    .save(&mut out)?;
    out.write_str("distill_log.csv", &log_csv(&log))?;
    out.finish()
}

/// Image quality of one rendered model over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Quality {
    /// `(view, psnr, ssim)` for every view.
    pub per_view: Vec<(usize, f64, f64)>,
}

impl Quality {
    pub fn mean(&self, dataset: &Dataset, split: Split) -> (f64, f64) {
        let rows: Vec<_> = self.per_view.iter().filter(|r| dataset.view(r.0).split == split).collect();
        let n = rows.len().max(1) as f64;
        (rows.iter().map(|r| r.1).sum::<f64>() / n, rows.iter().map(|r| r.2).sum::<f64>() / n)
    }
}

/// Mixture and per-expert renders of every view.
pub struct Evaluation {
    /// Model names: `moe` (if routed) then `expert_{k}`.
    pub names: Vec<String>,
    /// `images[m][v]` for model `m` and view `v`.
    pub images: Vec<Vec<ImageBuffer>>,
    pub gating: Vec<Option<GatingMap>>,
}

pub fn evaluate(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Evaluation> {
    let moe = ckpt.moe()?;
    let mut names: Vec<String> = Vec::new();
    if moe.is_some() {
        names.push("moe".into());
    }
    names.extend((0..ckpt.experts.len()).map(|k| format!("expert_{k}")));
    let mut images = vec![Vec::with_capacity(dataset.len()); names.len()];
    let mut gating = Vec::with_capacity(dataset.len());
    for view in dataset.views() {
        let renders = match &moe {
            Some(m) => {
                let r = m.render(view)?;
                ensure_finite(r.image(), "mixture render")?;
                images[0].push(r.forward.image.clone());
                gating.push(r.forward.gating.clone());
                r.renders
            }
            None => {
                gating.push(None);
                let mut stats = RenderStats::default();
                expert_renders(&ckpt.experts, view, false, &mut stats)?
            }
        };
        let offset = usize::from(moe.is_some());
        for (k, r) in renders.into_iter().enumerate() {
            ensure_finite(&r.image, "expert render")?;
            images[offset + k].push(r.image);
        }
    }
    Ok(Evaluation { names, images, gating })
}

pub fn quality(images: &[ImageBuffer], dataset: &Dataset, cfg: &RunConfig) -> Result<Quality> {
    let per_view = images
        .iter()
        .enumerate()
        .map(|(v, img)| {
            let gt = dataset.view(v).gt()?;
            Ok((v, psnr(img, gt)?, ssim(img, gt, &cfg.loss.ssim)?))
        })
        .collect::<Result<_>>()?;
    Ok(Quality { per_view })
}

/// Coverage-weighted PSNR of one ground-truth region over the test views.
pub fn region_psnr(images: &[ImageBuffer], dataset: &Dataset, gt: &GroundTruth, region: usize) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for v in dataset.indices(Split::Test) {
        let view = dataset.view(v);
        let cover = gt.region_coverage(view, region)?;
        let reference = view.gt()?;
        let img = &images[v];
        let c = img.channels() as f64;
        for px in 0..cover.pixel_count() {
            let w = cover.data()[px];
            let e: f64 = img.pixel(px).iter().zip(reference.pixel(px)).map(|(a, b)| (a - b) * (a - b)).sum();
            num += w * e;
            den += w * c;
        }
    }
    if den <= 0.0 {
        return Err(CliError::Data(format!("region {region} is not visible in any test view")));
    }
    Ok(if num <= 0.0 {
        metrics::PSNR_CAP
    } else {
        (-10.0 * (num / den).log10()).min(metrics::PSNR_CAP)
    })
}

fn stack_rows(parts: &[ImageBuffer]) -> Result<ImageBuffer> {
    let (_, w, c) = parts[0].shape();
    let h: usize = parts.iter().map(ImageBuffer::height).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(ImageBuffer::from_vec(h, w, c, data)?)
}

/// Motion and detail specialization pooled over the test views: every
/// pixel of every view counts once in the per-expert weighted means.
pub fn pooled_specialization(
    gating: &[Option<GatingMap>],
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<Option<(SpecializationRecord, SpecializationRecord)>> {
    let test = dataset.indices(Split::Test);
    let mut gates = Vec::new();
    let mut logits = Vec::new();
    let mut motion = Vec::new();
    let mut detail = Vec::new();
    for &v in &test {
        let Some(g) = &gating[v] else { return Ok(None) };
        gates.push(g.gates.clone());
        logits.push(g.logits.clone());
        motion.push(metrics::motion_magnitude(dataset, v)?);
        detail.push(metrics::detail_complexity(dataset.view(v).gt()?));
    }
    if test.is_empty() {
        return Ok(None);
    }
    let pooled = GatingMap {
        gates: stack_rows(&gates)?,
        logits: stack_rows(&logits)?,
    };
    let norm = cfg.eval.normalization;
    Ok(Some((
        metrics::specialization(&pooled, &stack_rows(&motion)?, norm)?,
        metrics::specialization(&pooled, &stack_rows(&detail)?, norm)?,
    )))
}

/// Quality metrics per view, split means, per-region PSNR and expert
/// specialization.
pub fn eval(cfg: &RunConfig) -> Result<Manifest> {
    let ckpt = checkpoint(cfg)?;
    let scene = load_scene(cfg)?;
    let ds = &scene.dataset;
    let ev = evaluate(&ckpt, ds)?;
    let mut metrics_csv = format!("{METRICS_HEADER}\n");
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut regions = format!("{REGION_HEADER}\n");
    for (name, images) in ev.names.iter().zip(&ev.images) {
        let q = quality(images, ds, cfg)?;
        for &(v, p, s) in &q.per_view {
            let view = ds.view(v);
            metrics_csv.push_str(&format!("{name},{v},{},{},{p:.6},{s:.6}\n", view.split.as_str(), view.time));
        }
        for split in [Split::Train, Split::Test] {
            let (p, s) = q.mean(ds, split);
            summary.push_str(&format!("{name},{},{p:.6},{s:.6}\n", split.as_str()));
        }
        if let Some(gt) = &scene.ground_truth {
            for (r, regime) in gt.regimes.iter().enumerate() {
                let p = region_psnr(images, ds, gt, r)?;
                regions.push_str(&format!("{name},{r},{},{p:.6}\n", regime.as_str()));
            }
        }
    }
    let mut out = begin(cfg, "eval")?;
    out.write_str("metrics.csv", &metrics_csv)?;
    out.write_str("summary.csv", &summary)?;
    if scene.ground_truth.is_some() {
        out.write_str("regions.csv", &regions)?;
    }
    if let Some((motion, detail)) = pooled_specialization(&ev.gating, ds, cfg)? {
        let mut spec = format!("{SPECIALIZATION_HEADER}\n");
        for (k, e) in ckpt.experts.iter().enumerate() {
            spec.push_str(&format!(
                "{k},{},{:.9},{:.6},{:.9},{:.6}\n",
                e.kind().as_str(),
                motion.weighted_mean[k],
                motion.normalized[k],
                detail.weighted_mean[k],
                detail.normalized[k]
            ));
        }
        out.write_str("specialization.csv", &spec)?;
    }
    out.finish()
}

/// Trains the experts once, then every router kind on top of them, and
/// reports test quality of each expert alone and of each mixture.
pub fn ablate(cfg: &RunConfig) -> Result<Manifest> {
    let scene = load_scene(cfg)?;
    let ds = &scene.dataset;
    let mut experts = init_experts(cfg, &scene.init)?;
    let (_, stage1_log) = train::train_stage1(&mut experts, ds, &cfg.optim, &cfg.loss)?;
    let mut logs = vec![("train_log_experts.csv".to_string(), log_csv(&stage1_log))];
    let mut table = format!("{ABLATION_HEADER}\n");
    let only = Checkpoint {
        experts: experts.clone(),
        router: None,
    };
    let ev = evaluate(&only, ds)?;
    for (k, images) in ev.images.iter().enumerate() {
        let (p, s) = quality(images, ds, cfg)?.mean(ds, Split::Test);
        let kind = experts[k].kind().as_str();
        table.push_str(&format!("expert_{kind},{p:.6},{s:.6},{}\n", experts[k].parameter_count()));
    }
    for kind in RouterKind::ALL {
        let mut router = init_router(kind, &experts, cfg.seed)?;
        let log = train::train_stage2(&mut router, &experts, ds, cfg.optim.stage2_steps, &cfg.optim, &cfg.loss)?;
        logs.push((format!("train_log_router_{}.csv", kind.as_str()), log_csv(&log)));
        let model = MoeModel::new(experts.clone(), router)?;
        let images = ds
            .views()
            .iter()
            .map(|v| Ok(model.render(v)?.forward.image))
            .collect::<Result<Vec<_>>>()?;
        let (p, s) = quality(&images, ds, cfg)?.mean(ds, Split::Test);
        table.push_str(&format!("router_{},{p:.6},{s:.6},{}\n", kind.as_str(), model.parameter_count()));
    }
    let mut out = begin(cfg, "ablate")?;
    out.write_str("ablation.csv", &table)?;
    for (name, text) in &logs {
        out.write_str(name, text)?;
    }
    out.finish()
}
