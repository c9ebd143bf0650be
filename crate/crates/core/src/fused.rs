//! Single-pass multi-expert rendering and gate-aware pruning.
//!
//! All experts' splats are concatenated into one [`MergedBatch`], sorted
//! once, binned once and composited in one walk per pixel; each splat's
//! expert identity routes its contribution to that expert's output image.
//! With independent transmittance every expert keeps its own `T` and the
//! outputs equal K separate renders exactly; with shared transmittance one
//! `T` runs over the merged order, so experts occlude each other.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertModel, ExpertRender};
use crate::image::ImageBuffer;
use crate::raster::{self, bin_tiles, pixel_center, sort_order, ChannelSplat, Contributor, Prepared, RenderGraph, TileGrid, T_MIN};
use crate::router::{PerExpert, Router};
use crate::scene::{Dataset, Resolution, View};

/// Work counters for one or more renders.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderStats {
    /// Passes over a Gaussian set that project it to splats.
    pub projection_passes: usize,
    pub gaussians_projected: usize,
    /// Depth sorts executed.
    pub sort_passes: usize,
    pub splats_sorted: usize,
    /// Recorded (splat, pixel) contributions.
    pub contributions: usize,
}

impl RenderStats {
    pub fn add(&mut self, other: &RenderStats) {
        self.projection_passes += other.projection_passes;
        self.gaussians_projected += other.gaussians_projected;
        self.sort_passes += other.sort_passes;
        self.splats_sorted += other.splats_sorted;
        self.contributions += other.contributions;
    }
}

/// How transmittance is accumulated across experts in a merged pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transmittance {
    /// One `T` per expert; identical to rendering each expert separately.
    #[default]
    Independent,
    /// One `T` over the merged front-to-back order of all experts.
    Shared,
}

/// All experts' splats in one list, each tagged with its expert index.
#[derive(Debug, Clone)]
pub struct MergedBatch {
    splats: Vec<ChannelSplat>,
    experts: usize,
    channels: usize,
    /// Start of each expert's block in `splats`, plus the total.
    offsets: Vec<usize>,
    sorted: Option<Sorted>,
}

#[derive(Debug, Clone)]
struct Sorted {
    prepared: Vec<Prepared>,
    order: Vec<u32>,
}

impl MergedBatch {
    /// Concatenates per-expert splat lists. Splat sources must name the
    /// expert block they are in.
    pub fn new(per_expert: Vec<Vec<ChannelSplat>>, channels: usize) -> Result<Self> {
        if per_expert.is_empty() {
            return Err(Error::input("merged batch needs at least one expert"));
        }
        let experts = per_expert.len();
        let mut offsets = Vec::with_capacity(experts + 1);
        let mut splats = Vec::new();
        for (k, list) in per_expert.into_iter().enumerate() {
            offsets.push(splats.len());
            if let Some(bad) = list.iter().find(|s| s.source.expert as usize != k) {
                return Err(Error::input(format!("splat {:?} placed in expert block {k}", bad.source)));
            }
            splats.extend(list);
        }
        offsets.push(splats.len());
        Ok(Self {
            splats,
            experts,
            channels,
            offsets,
            sorted: None,
        })
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn splats(&self) -> &[ChannelSplat] {
        &self.splats
    }

    /// Expert identity of splat `j`.
    pub fn expert_of(&self, j: usize) -> usize {
        self.splats[j].source.expert as usize
    }

    pub fn is_sorted(&self) -> bool {
        self.sorted.is_some()
    }

    /// Global front-to-back order, once sorted.
    pub fn order(&self) -> Option<&[u32]> {
        self.sorted.as_ref().map(|s| s.order.as_slice())
    }

    /// Validates every splat and sorts the whole batch by
    /// `(depth, expert, gaussian)`.
    pub fn sort(&mut self, stats: &mut RenderStats) -> Result<()> {
        let prepared = raster::prepare_with(&self.splats, self.channels)?;
        let order = sort_order(&prepared);
        stats.sort_passes += 1;
        stats.splats_sorted += order.len();
        self.sorted = Some(Sorted { prepared, order });
        Ok(())
    }
}

/// Per-expert outputs of a merged pass.
#[derive(Debug, Clone)]
pub struct FusedOutput {
    pub images: Vec<ImageBuffer>,
    /// Per-expert render graphs, equal to the graphs of separate renders.
    /// Only recorded with independent transmittance.
    pub graphs: Option<Vec<RenderGraph>>,
}

struct FusedTile {
    pixels: Vec<usize>,
    /// Per pixel, per expert: channel values.
    values: Vec<f64>,
    /// Per pixel, per expert: contributors with merged splat indices.
    lists: Vec<Vec<Vec<Contributor>>>,
    /// Per pixel, per expert.
    final_t: Vec<f64>,
}

/// Composites every expert from the sorted merged batch in one walk of each
/// pixel's list: `C_k(u) = Σ_j T_j(u)·α_j(u)·c_j·[e_j = k]`.
pub fn render_single_pass(
    batch: &MergedBatch,
    res: Resolution,
    mode: Transmittance,
    stats: &mut RenderStats,
) -> Result<FusedOutput> {
    let sorted = batch
        .sorted
        .as_ref()
        .ok_or_else(|| Error::state("merged batch must be sorted before rendering"))?;
    if res.height == 0 || res.width == 0 {
        return Err(Error::input("resolution must be positive"));
    }
    let (k_count, channels) = (batch.experts, batch.channels);
    let prepared = &sorted.prepared;
    let values: Vec<f64> = batch.splats.iter().flat_map(|s| s.channels.iter().copied()).collect();
    let expert_of: Vec<usize> = batch.splats.iter().map(|s| s.source.expert as usize).collect();
    let tiles = bin_tiles(prepared, &sorted.order, res);
    let record = mode == Transmittance::Independent;

    let outputs: Vec<FusedTile> = (0..tiles.tile_count())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = tiles.bounds(t, res);
            let n = (x1 - x0) * (y1 - y0);
            let mut out = FusedTile {
                pixels: Vec::with_capacity(n),
                values: vec![0.0; n * k_count * channels],
                lists: Vec::with_capacity(n),
                final_t: vec![1.0; n * k_count],
            };
            let list = &tiles.lists[t];
            let mut i = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut lists = vec![Vec::new(); if record { k_count } else { 0 }];
                    let px_values = &mut out.values[i * k_count * channels..(i + 1) * k_count * channels];
                    let px_t = &mut out.final_t[i * k_count..(i + 1) * k_count];
                    composite_merged(
                        prepared,
                        &values,
                        &expert_of,
                        channels,
                        list,
                        pixel_center(x, y),
                        mode,
                        px_values,
                        px_t,
                        record.then_some(&mut lists),
                    );
                    out.pixels.push(y * res.width + x);
                    out.lists.push(lists);
                    i += 1;
                }
            }
            out
        })
        .collect();

    let mut images = vec![ImageBuffer::zeros(res.height, res.width, channels); k_count];
    let mut per_pixel: Vec<Vec<Vec<Contributor>>> = if record { vec![vec![Vec::new(); res.pixels()]; k_count] } else { Vec::new() };
    let mut final_t = vec![vec![1.0; res.pixels()]; k_count];
    for tile in outputs {
        for (i, (&px, lists)) in tile.pixels.iter().zip(tile.lists).enumerate() {
            for k in 0..k_count {
                let base = (i * k_count + k) * channels;
                images[k].pixel_mut(px).copy_from_slice(&tile.values[base..base + channels]);
                final_t[k][px] = tile.final_t[i * k_count + k];
            }
            for (k, list) in lists.into_iter().enumerate() {
                stats.contributions += list.len();
                per_pixel[k][px] = list;
            }
        }
    }
    let graphs = record.then(|| split_graphs(batch, sorted, &values, &tiles, per_pixel, final_t, res));
    Ok(FusedOutput { images, graphs })
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn composite_merged(
    prepared: &[Prepared],
    values: &[f64],
    expert_of: &[usize],
    channels: usize,
    list: &[u32],
    p: nalgebra::Vector2<f64>,
    mode: Transmittance,
    out: &mut [f64],
    final_t: &mut [f64],
    mut lists: Option<&mut Vec<Vec<Contributor>>>,
) {
    let experts = final_t.len();
    let mut shared_t = 1.0;
    let mut alive = experts;
    for &s in list {
        let k = expert_of[s as usize];
        if mode == Transmittance::Independent && final_t[k] < T_MIN {
            continue;
        }
        let Some(sample) = prepared[s as usize].sample_at(p) else {
            continue;
        };
        let t = match mode {
            Transmittance::Independent => final_t[k],
            Transmittance::Shared => shared_t,
        };
        let w = sample.alpha * t;
        let ch = &values[s as usize * channels..(s as usize + 1) * channels];
        for (o, c) in out[k * channels..(k + 1) * channels].iter_mut().zip(ch) {
            *o += c * w;
        }
        if let Some(lists) = lists.as_deref_mut() {
            lists[k].push(Contributor {
                splat: s,
                alpha: sample.alpha,
                transmittance: t,
            });
        }
        match mode {
            Transmittance::Independent => {
                final_t[k] *= 1.0 - sample.alpha;
                if final_t[k] < T_MIN {
                    alive -= 1;
                    if alive == 0 {
                        break;
                    }
                }
            }
            Transmittance::Shared => {
                shared_t *= 1.0 - sample.alpha;
                if shared_t < T_MIN {
                    break;
                }
            }
        }
    }
    if mode == Transmittance::Shared {
        final_t.fill(shared_t);
    }
}

/// Splits merged-pass records into one graph per expert, re-indexing splats
/// to the expert's own list. Filtering the global order and tile lists by
/// expert reproduces exactly what a separate render would have built.
fn split_graphs(
    batch: &MergedBatch,
    sorted: &Sorted,
    values: &[f64],
    tiles: &TileGrid,
    per_pixel: Vec<Vec<Vec<Contributor>>>,
    final_t: Vec<Vec<f64>>,
    res: Resolution,
) -> Vec<RenderGraph> {
    let c = batch.channels;
    per_pixel
        .into_iter()
        .zip(final_t)
        .enumerate()
        .map(|(k, (mut lists, final_t))| {
            let (lo, hi) = (batch.offsets[k], batch.offsets[k + 1]);
            let local = |j: u32| j - lo as u32;
            let mine = |j: &&u32| (lo..hi).contains(&(**j as usize));
            for e in lists.iter_mut().flatten() {
                e.splat = local(e.splat);
            }
            let order: Vec<u32> = sorted.order.iter().filter(mine).map(|&j| local(j)).collect();
            let grid = TileGrid {
                tiles_x: tiles.tiles_x,
                tiles_y: tiles.tiles_y,
                lists: tiles.lists.iter().map(|l| l.iter().filter(mine).map(|&j| local(j)).collect()).collect(),
            };
            RenderGraph::new(
                res,
                c,
                sorted.prepared[lo..hi].to_vec(),
                values[lo * c..hi * c].to_vec(),
                lists,
                final_t,
                order,
                grid,
            )
        })
        .collect()
}

/// Renders every expert for one view through a single merged pass with
/// independent transmittance. The returned renders are interchangeable with
/// `experts[k].render_as(view, k)`.
pub fn render_experts_fused(experts: &[ExpertModel], view: &View, stats: &mut RenderStats) -> Result<Vec<ExpertRender>> {
    let mut parts = Vec::with_capacity(experts.len());
    let mut lists = Vec::with_capacity(experts.len());
    for (k, e) in experts.iter().enumerate() {
        let (gaussians, splats, owner, projections) = e.splats_at(&view.camera, view.time, k)?;
        stats.gaussians_projected += gaussians.len();
        lists.push(splats.clone());
        parts.push((gaussians, splats, owner, projections));
    }
    stats.projection_passes += 1;
    let mut batch = MergedBatch::new(lists, 3)?;
    batch.sort(stats)?;
    let out = render_single_pass(&batch, view.camera.resolution(), Transmittance::Independent, stats)?;
    let graphs = out.graphs.expect("independent mode records graphs");
    Ok(parts
        .into_iter()
        .zip(out.images)
        .zip(graphs)
        .map(|(((gaussians_at_t, splats, splat_gaussian, projections), image), graph)| ExpertRender {
            image,
            graph,
            gaussians_at_t,
            splats,
            splat_gaussian,
            projections,
            camera: view.camera.clone(),
            time: view.time,
        })
        .collect())
}

/// Renders every expert separately (one projection and sort per expert).
pub fn render_experts_separately(experts: &[ExpertModel], view: &View, stats: &mut RenderStats) -> Result<Vec<ExpertRender>> {
    experts
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let r = e.render_as(view, k)?;
            stats.projection_passes += 1;
            stats.gaussians_projected += e.len();
            stats.sort_passes += 1;
            stats.splats_sorted += r.splats.len();
            stats.contributions += r.graph.entry_count();
            Ok(r)
        })
        .collect()
}

/// Reduction of the per-pixel gate Jacobian `∂G'_k / ∂w_i` to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scalarization {
    /// L2 norm of `∂(Σ_u G'_k(u)) / ∂w_i`.
    #[default]
    Sum,
    /// L2 norm of `∂(mean_u G'_k(u)) / ∂w_i`.
    Mean,
    /// Frobenius norm of the full `pixels x 3` Jacobian.
    PixelFrobenius,
}

/// Importance score per (expert, Gaussian), averaged over views.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub scores: PerExpert,
    pub views: usize,
}

impl ImportanceTable {
    /// Uniform random scores, for pruning baselines.
    pub fn random(counts: &[usize], rng: &mut impl Rng) -> Self {
        let mut scores = PerExpert::zeros(counts);
        for v in scores.values_mut() {
            *v = rng.random::<f64>();
        }
        Self { scores, views: 0 }
    }
}

/// Gate-aware importance of every router-weighted Gaussian: how strongly its
/// weight triplet moves its own expert's gating map, averaged over the
/// training views. Requires a volume-aware router.
pub fn importance_scores(
    router: &Router,
    experts: &[ExpertModel],
    dataset: &Dataset,
    scalarization: Scalarization,
) -> Result<ImportanceTable> {
    let Router::VolumeAware { weights, phi } = router else {
        return Err(Error::state("importance scores need a volume-aware router"));
    };
    let counts: Vec<usize> = experts.iter().map(ExpertModel::len).collect();
    if weights.counts() != counts {
        return Err(Error::input("router weights do not match the experts"));
    }
    let views: Vec<&View> = dataset.train().collect();
    if views.is_empty() {
        return Err(Error::input("importance scores need at least one training view"));
    }
    let per_view: Vec<Vec<f64>> = views
        .par_iter()
        .map(|view| {
            let renders: Vec<ExpertRender> = experts
                .iter()
                .enumerate()
                .map(|(k, e)| e.render_as(view, k))
                .collect::<Result<_>>()?;
            let fwd = router.forward(view, &renders)?;
            let gating = fwd.gating.as_ref().ok_or_else(|| Error::state("missing gating"))?;
            let traces = Router::traces(&fwd).ok_or_else(|| Error::state("missing router traces"))?;
            let mut scores = vec![0.0; counts.iter().sum()];
            let pixels = gating.gates.pixel_count() as f64;
            for k in 0..experts.len() {
                let gate = gating.gate(k);
                // dG_k / dR'_k; the weights of expert k's Gaussians enter no other logit.
                let slope = gate.map(|g| g * (1.0 - g));
                let off = weights.w.offset(k);
                match scalarization {
                    Scalarization::Sum | Scalarization::Mean => {
                        let mut grads = crate::router::RouterGrads::zeros_like(router);
                        router.logit_backward(k, &slope, traces, &renders, &mut grads)?;
                        let s = if scalarization == Scalarization::Mean { 1.0 / pixels } else { 1.0 };
                        for i in 0..counts[k] {
                            let j = off + i;
                            scores[j] = s * (grads.w[j].powi(2) + grads.w_dir[j].powi(2) + grads.w_time[j].powi(2)).sqrt();
                        }
                    }
                    Scalarization::PixelFrobenius => {
                        frobenius_scores(phi, &traces[k], &renders[k], &slope, &mut scores[off..off + counts[k]])?;
                    }
                }
            }
            Ok(scores)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; counts.iter().sum()];
    for s in &per_view {
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
    }
    let n = views.len() as f64;
    total.iter_mut().for_each(|v| *v /= n);
    Ok(ImportanceTable {
        scores: PerExpert::from_values(&counts, total)?,
        views: views.len(),
    })
}

/// `sqrt(Σ_u Σ_c (∂G_k(u)/∂w_i,c)²)` for every Gaussian of one expert.
fn frobenius_scores(
    phi: &crate::router::ConvNet,
    trace: &crate::router::ConvTrace,
    render: &ExpertRender,
    slope: &ImageBuffer,
    out: &mut [f64],
) -> Result<()> {
    let res = render.graph.resolution();
    // Per splat, its blending-weight footprint `α T` over the image.
    let mut footprints = vec![Vec::new(); render.graph.splat_count()];
    for px in 0..res.pixels() {
        for e in render.graph.contributors(px) {
            footprints[e.splat as usize].push((px, e.alpha * e.transmittance));
        }
    }
    for (s, fp) in footprints.iter().enumerate() {
        if fp.is_empty() {
            continue;
        }
        let i = render.splat_gaussian[s] as usize;
        let mut total = 0.0;
        // w enters the logit directly.
        for &(px, a) in fp {
            total += (slope.data()[px] * a).powi(2);
        }
        // w_dir and w_time enter through the refinement net.
        for (ch, scale) in [(0usize, 1.0), (1usize, render.time)] {
            let mut d_in = ImageBuffer::zeros(res.height, res.width, crate::router::PHI_INPUTS);
            for &(px, a) in fp {
                d_in.pixel_mut(px)[ch] = a * scale;
            }
            let d_r = phi.jvp(trace, &d_in)?;
            total += d_r.data().iter().zip(slope.data()).map(|(d, g)| (d * g).powi(2)).sum::<f64>();
        }
        out[i] = total.sqrt();
    }
    Ok(())
}

/// Which Gaussians to remove.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrunePolicy {
    /// Remove every Gaussian with score strictly below `τ`.
    Threshold(f64),
    /// Remove the lowest `⌊ρ·N⌋` scores, ties broken by (expert, gaussian).
    Ratio(f64),
}

/// Per-expert pruning outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneRow {
    pub expert: usize,
    pub kept: usize,
    pub removed: usize,
    /// Largest removed score (0 if nothing was removed).
    pub removed_max: f64,
    /// Smallest kept score (0 if nothing was kept).
    pub kept_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub rows: Vec<PruneRow>,
    pub params_before: usize,
    pub params_after: usize,
}

impl PruneReport {
    pub fn removed(&self) -> usize {
        self.rows.iter().map(|r| r.removed).sum()
    }

    /// Parameter memory released, in bytes of `f64`.
    pub fn bytes_freed(&self) -> usize {
        (self.params_before - self.params_after) * std::mem::size_of::<f64>()
    }
}

/// Keep-masks per expert selected by `policy`.
pub fn select(table: &ImportanceTable, policy: PrunePolicy) -> Result<Vec<Vec<bool>>> {
    let counts = table.scores.counts();
    let mut keep: Vec<Vec<bool>> = counts.iter().map(|&n| vec![true; n]).collect();
    match policy {
        PrunePolicy::Threshold(tau) => {
            if !tau.is_finite() {
                return Err(Error::param(format!("prune threshold {tau} is not finite")));
            }
            for (k, mask) in keep.iter_mut().enumerate() {
                for (m, &s) in mask.iter_mut().zip(table.scores.expert(k)) {
                    *m = !(s < tau);
                }
            }
        }
        PrunePolicy::Ratio(rho) => {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::param(format!("prune ratio {rho} outside [0, 1)")));
            }
            let n: usize = counts.iter().sum();
            let remove = (rho * n as f64).floor() as usize;
            for (k, i) in lowest(table, remove) {
                keep[k][i] = false;
            }
        }
    }
    Ok(keep)
}

/// The `n` lowest-scoring (expert, gaussian) pairs, ties broken by index.
pub fn lowest(table: &ImportanceTable, n: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, usize, usize)> = (0..table.scores.experts())
        .flat_map(|k| table.scores.expert(k).iter().enumerate().map(move |(i, &s)| (s, k, i)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().take(n).map(|(_, k, i)| (k, i)).collect()
}

/// Removes the masked-out Gaussians from the experts and the router.
pub fn apply_keep(
    experts: &[ExpertModel],
    router: &Router,
    table: &ImportanceTable,
    keep: &[Vec<bool>],
) -> Result<(Vec<ExpertModel>, Router, PruneReport)> {
    let counts: Vec<usize> = experts.iter().map(ExpertModel::len).collect();
    if table.scores.counts() != counts || keep.iter().map(Vec::len).collect::<Vec<_>>() != counts {
        return Err(Error::input("importance table does not cover the model's gaussians"));
    }
    let params_before = experts.iter().map(ExpertModel::parameter_count).sum::<usize>() + router.parameter_count();
    let pruned: Vec<ExpertModel> = experts.iter().zip(keep).map(|(e, m)| e.retain(m)).collect::<Result<_>>()?;
    let router = router.retain(keep)?;
    let rows = keep
        .iter()
        .enumerate()
        .map(|(k, mask)| {
            let scores = table.scores.expert(k);
            let removed: Vec<f64> = scores.iter().zip(mask).filter(|(_, &m)| !m).map(|(s, _)| *s).collect();
            let kept: Vec<f64> = scores.iter().zip(mask).filter(|(_, &m)| m).map(|(s, _)| *s).collect();
            PruneRow {
                expert: k,
                kept: kept.len(),
                removed: removed.len(),
                removed_max: removed.iter().copied().fold(0.0, f64::max),
                kept_min: if kept.is_empty() { 0.0 } else { kept.iter().copied().fold(f64::INFINITY, f64::min) },
            }
        })
        .collect();
    let params_after = pruned.iter().map(ExpertModel::parameter_count).sum::<usize>() + router.parameter_count();
    Ok((
        pruned,
        router,
        PruneReport {
            rows,
            params_before,
            params_after,
        },
    ))
}

/// Prunes Gaussians (and their router weights) according to `policy`.
pub fn prune(
    experts: &[ExpertModel],
    router: &Router,
    table: &ImportanceTable,
    policy: PrunePolicy,
) -> Result<(Vec<ExpertModel>, Router, PruneReport)> {
    let keep = select(table, policy)?;
    apply_keep(experts, router, table, &keep)
}
