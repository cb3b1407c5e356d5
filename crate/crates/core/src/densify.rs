//! Growth statistics, growth criteria and the clone/split/prune mechanics.
//!
//! Over each growth interval every visible Gaussian accumulates the norm of
//! its screen-space positional gradient, a descending buffer of its `k`
//! largest norms, and the set of distinct training views in which it was
//! both over-large (wins more than `tau_large` of the image's pixels) and
//! sits on a pixel whose SSIM is below `tau_ssim`.
//!
//! Criteria:
//! * `og`: mean gradient norm `≥ tau_grad`.
//! * `pghgs`: `k`-th largest gradient norm `≥ lambda · tau_grad`.
//! * `rehgs`: over-large with low SSIM in at least two distinct views.
//! * `effi`: the top `|og|` Gaussians ranked by `k`-th largest norm.
//!
//! A policy grows the union of its criteria; each Gaussian grows once.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backward::ParamGrads;
use crate::error::{Error, Result};
use crate::gaussian::{normalize_quat, quat_to_matrix, GaussianCloud};
use crate::loss::SsimMap;
use crate::render::RenderOutput;

/// Log-space scale reduction applied to both children of a split.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
/// Clone offset along the descent direction, as a fraction of the extent.
pub const CLONE_OFFSET: f64 = 0.01;
/// Gaussians larger than this fraction of the extent are pruned.
pub const PRUNE_MAX_SCALE: f64 = 0.5;
/// Distinct views a Gaussian must be flagged hard in before it grows.
pub const REHGS_MIN_VIEWS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Og,
    Pghgs,
    Rehgs,
    Hgs,
    EffiHgs,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::Og,
        Policy::Pghgs,
        Policy::Rehgs,
        Policy::Hgs,
        Policy::EffiHgs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Og => "og",
            Policy::Pghgs => "pghgs",
            Policy::Rehgs => "rehgs",
            Policy::Hgs => "hgs",
            Policy::EffiHgs => "effi-hgs",
        }
    }

    fn uses_pghgs(self) -> bool {
        matches!(self, Policy::Pghgs | Policy::Hgs)
    }

    fn uses_rehgs(self) -> bool {
        matches!(self, Policy::Rehgs | Policy::Hgs | Policy::EffiHgs)
    }

    fn uses_effi(self) -> bool {
        matches!(self, Policy::EffiHgs)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            Error::InvalidInput(format!(
                "unknown policy {s:?} (expected one of og, pghgs, rehgs, hgs, effi-hgs)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub policy: Policy,
    /// Gradient threshold, before the unit scale below.
    pub tau_grad: f64,
    /// Converts `tau_grad` to the pixel units of the accumulated gradient
    /// norms. Resolved from the image size by [`PolicyConfig::resolve_units`].
    pub tau_grad_px_scale: f64,
    /// Growth interval `M`, in iterations.
    pub interval: usize,
    pub k: usize,
    pub lambda: f64,
    pub tau_large: f64,
    pub tau_ssim: f64,
    pub densify_start: usize,
    pub densify_end: usize,
    pub percent_dense: f64,
    pub prune_opacity: f64,
    /// Periodic opacity reset, off when `None`.
    pub opacity_reset_every: Option<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policy: Policy::Og,
            tau_grad: 2.0e-4,
            tau_grad_px_scale: 1.0,
            interval: 100,
            k: 3,
            lambda: 1.0,
            tau_large: 2e-4,
            tau_ssim: 0.7,
            densify_start: 500,
            densify_end: 15_000,
            percent_dense: 0.01,
            prune_opacity: 0.005,
            opacity_reset_every: None,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.tau_large > 0.0 && self.tau_large < 1.0) {
            return bad("tau_large must lie in (0, 1)");
        }
        if !(self.tau_ssim > 0.0 && self.tau_ssim <= 1.0) {
            return bad("tau_ssim must lie in (0, 1]");
        }
        if self.interval < 1 {
            return bad("growth interval must be at least 1");
        }
        if !(self.tau_grad > 0.0 && self.tau_grad_px_scale > 0.0) {
            return bad("tau_grad and its unit scale must be positive");
        }
        Ok(())
    }

    /// Gradient threshold in pixel-gradient units.
    pub fn tau_grad_px(&self) -> f64 {
        self.tau_grad * self.tau_grad_px_scale
    }

    /// Sets the unit conversion for `width × height` training images.
    ///
    /// Accumulated norms are gradients of the pixel-averaged loss w.r.t.
    /// splat centres in pixels. At desk resolutions these already land in
    /// the range the usual thresholds were tuned for, so the scale is 1 at
    /// every size; see [`tau_grad_px_scale`].
    pub fn resolve_units(&mut self, width: usize, height: usize) {
        self.tau_grad_px_scale = tau_grad_px_scale(width, height);
    }

    /// Whether a growth step runs after finishing iteration `iter` (1-based).
    pub fn is_growth_step(&self, iter: usize) -> bool {
        iter >= self.densify_start && iter <= self.densify_end && iter.is_multiple_of(self.interval)
    }
}

/// Default pixel-unit scale of `tau_grad` for a given training resolution.
///
/// Measured on the 64×64 default scene, mean norms run from about 3e-5
/// (median) to 4e-4 (max). Scaling by `max(W, H)/2` puts every threshold
/// above all of them; the normalized-device conversion `2/max(W, H)` selects
/// most of the cloud every interval.
pub fn tau_grad_px_scale(_width: usize, _height: usize) -> f64 {
    1.0
}

/// Per-Gaussian statistics over one growth interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthStats {
    pub k: usize,
    pub grad_sum: Vec<f64>,
    pub view_count: Vec<u32>,
    /// `k` slots per Gaussian, descending; the first `min(view_count, k)`
    /// are populated.
    topk: Vec<f64>,
    /// Distinct view ids with an over-large, low-SSIM observation (sorted).
    pub rehgs_hit_views: Vec<Vec<u32>>,
    /// Most recent world-space mean gradient, used to offset clones.
    pub last_mean_grad: Vec<Vector3<f64>>,
    pub interval_iter: usize,
}

impl GrowthStats {
    pub fn new(n: usize, k: usize) -> Self {
        GrowthStats {
            k,
            grad_sum: vec![0.0; n],
            view_count: vec![0; n],
            topk: vec![0.0; n * k],
            rehgs_hit_views: vec![Vec::new(); n],
            last_mean_grad: vec![Vector3::zeros(); n],
            interval_iter: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.grad_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_sum.is_empty()
    }

    /// Populated top-k entries of Gaussian `i`, largest first.
    pub fn topk(&self, i: usize) -> &[f64] {
        let filled = (self.view_count[i] as usize).min(self.k);
        &self.topk[i * self.k..i * self.k + filled]
    }

    /// `k`-th largest gradient norm, once the Gaussian was seen `k` times.
    pub fn kth_largest(&self, i: usize) -> Option<f64> {
        (self.view_count[i] as usize >= self.k).then(|| self.topk[i * self.k + self.k - 1])
    }

    /// Records one gradient norm observation for Gaussian `i`.
    pub fn record_gradient(&mut self, i: usize, norm: f64) {
        let filled = (self.view_count[i] as usize).min(self.k);
        let slots = &mut self.topk[i * self.k..(i + 1) * self.k];
        let pos = slots[..filled].iter().position(|&v| norm > v).unwrap_or(filled);
        if pos < self.k {
            let end = filled.min(self.k - 1);
            slots.copy_within(pos..end, pos + 1);
            slots[pos] = norm;
        }
        self.grad_sum[i] += norm;
        self.view_count[i] += 1;
    }

    pub fn record_hard_view(&mut self, i: usize, view_id: u32) {
        if let Err(pos) = self.rehgs_hit_views[i].binary_search(&view_id) {
            self.rehgs_hit_views[i].insert(pos, view_id);
        }
    }
}

/// Gaussians whose max-contribution pixel count exceeds `tau_large` of the image.
pub fn over_large(render: &RenderOutput, cfg: &PolicyConfig) -> Vec<bool> {
    let limit = cfg.tau_large * (render.width() * render.height()) as f64;
    render.pixel_counts.iter().map(|&c| c as f64 > limit).collect()
}

/// Pixel nearest to a projected mean, if it lies on the image.
pub fn projected_pixel(
    mean2d: &nalgebra::Vector2<f64>,
    width: usize,
    height: usize,
) -> Option<(usize, usize)> {
    let (x, y) = (mean2d.x.round(), mean2d.y.round());
    (x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64).then_some((x as usize, y as usize))
}

/// Over-large Gaussians whose projected mean lands on a pixel with SSIM
/// below `tau_ssim` in this view.
pub fn hard_in_view(render: &RenderOutput, ssim: &SsimMap, cfg: &PolicyConfig) -> Vec<bool> {
    let mut hard = over_large(render, cfg);
    let splat_of = render.splat_of();
    for (i, h) in hard.iter_mut().enumerate() {
        if !*h {
            continue;
        }
        *h = splat_of[i]
            .and_then(|s| projected_pixel(&render.splats[s].mean2d, render.width(), render.height()))
            .is_some_and(|(x, y)| ssim.at(x, y) < cfg.tau_ssim);
    }
    hard
}

/// Folds one training view's gradients and error map into `stats`.
pub fn accumulate(
    stats: &mut GrowthStats,
    view_id: u32,
    grads: &ParamGrads,
    render: &RenderOutput,
    ssim: &SsimMap,
    cfg: &PolicyConfig,
) -> Result<()> {
    let n = stats.len();
    if grads.len() != n || render.visible.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "growth stats for {n} gaussians, gradients for {}, render for {}",
            grads.len(),
            render.visible.len()
        )));
    }
    if ssim.width != render.width() || ssim.height != render.height() {
        return Err(Error::DimensionMismatch(
            "ssim map and render differ in size".into(),
        ));
    }
    for i in 0..n {
        if render.visible[i] {
            stats.record_gradient(i, grads.viewspace_grads[i].norm());
            stats.last_mean_grad[i] = grads.d_means[i];
        }
    }
    for (i, hard) in hard_in_view(render, ssim, cfg).into_iter().enumerate() {
        if hard {
            stats.record_hard_view(i, view_id);
        }
    }
    stats.interval_iter += 1;
    Ok(())
}

pub fn select_og(stats: &GrowthStats, cfg: &PolicyConfig) -> Vec<bool> {
    let tau = cfg.tau_grad_px();
    (0..stats.len())
        .map(|i| stats.view_count[i] > 0 && stats.grad_sum[i] >= tau * stats.view_count[i] as f64)
        .collect()
}

pub fn select_pghgs(stats: &GrowthStats, cfg: &PolicyConfig) -> Vec<bool> {
    let tau = cfg.lambda * cfg.tau_grad_px();
    (0..stats.len())
        .map(|i| stats.kth_largest(i).is_some_and(|g| g >= tau))
        .collect()
}

pub fn select_rehgs(stats: &GrowthStats, _cfg: &PolicyConfig) -> Vec<bool> {
    stats
        .rehgs_hit_views
        .iter()
        .map(|v| v.len() >= REHGS_MIN_VIEWS)
        .collect()
}

/// Top `|select_og|` Gaussians by `k`-th largest gradient norm; ties go to
/// the smaller index.
pub fn select_effi(stats: &GrowthStats, cfg: &PolicyConfig) -> Vec<bool> {
    let budget = select_og(stats, cfg).iter().filter(|&&s| s).count();
    let mut ranked: Vec<(usize, f64)> = (0..stats.len())
        .filter_map(|i| stats.kth_largest(i).map(|g| (i, g)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mask = vec![false; stats.len()];
    for &(i, _) in ranked.iter().take(budget) {
        mask[i] = true;
    }
    mask
}

/// Where a Gaussian of a grown or pruned cloud came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    /// Index in the cloud before the operation.
    pub parent: usize,
    /// Whether optimizer state is copied from the parent (else zeroed).
    pub inherit_state: bool,
}

/// Clones small selected Gaussians and splits large ones. The returned
/// origins index the input cloud.
pub fn grow(
    cloud: &GaussianCloud,
    mask: &[bool],
    stats: &GrowthStats,
    cfg: &PolicyConfig,
    scene_extent: f64,
    seed: u64,
) -> Result<(GaussianCloud, Vec<Origin>)> {
    if mask.len() != cloud.len() || stats.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "grow: cloud of {}, mask of {}, stats of {}",
            cloud.len(),
            mask.len(),
            stats.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    let mut origins: Vec<Origin> = (0..cloud.len())
        .map(|i| Origin {
            parent: i,
            inherit_state: true,
        })
        .collect();
    let shrink = SPLIT_SCALE_DIVISOR.ln();
    for i in (0..cloud.len()).filter(|&i| mask[i]) {
        let p = cloud.params(i);
        if cloud.max_scale(i) < cfg.percent_dense * scene_extent {
            let mut copy = p;
            let g = stats.last_mean_grad[i];
            let norm = g.norm();
            if norm > 0.0 {
                copy.mean -= g / norm * (CLONE_OFFSET * scene_extent);
            }
            out.push(copy);
            origins.push(Origin {
                parent: i,
                inherit_state: true,
            });
        } else {
            let r = quat_to_matrix(&normalize_quat(&p.rotation)?);
            let s = Matrix3::from_diagonal(&p.log_scale.map(f64::exp));
            let mut children = [p, p];
            for child in &mut children {
                let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                child.mean = p.mean + r * s * z;
                child.log_scale = p.log_scale.map(|v| v - shrink);
            }
            out.set_params(i, children[0]);
            out.push(children[1]);
            origins.push(Origin {
                parent: i,
                inherit_state: false,
            });
        }
    }
    Ok((out, origins))
}

/// Removes nearly transparent and oversized Gaussians. Returns the kept
/// mask over the input.
pub fn prune(cloud: &GaussianCloud, cfg: &PolicyConfig, scene_extent: f64) -> (GaussianCloud, Vec<bool>) {
    let keep: Vec<bool> = (0..cloud.len())
        .map(|i| {
            cloud.opacity(i) >= cfg.prune_opacity && cloud.max_scale(i) <= PRUNE_MAX_SCALE * scene_extent
        })
        .collect();
    (cloud.retain_mask(&keep), keep)
}

/// One row of the per-interval growth log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthLogRow {
    pub iteration: usize,
    pub policy: Policy,
    pub n_before: usize,
    pub og_count: usize,
    pub pghgs_count: usize,
    pub rehgs_count: usize,
    pub effi_count: usize,
    pub union_count: usize,
    pub pruned: usize,
    pub n_after: usize,
}

impl GrowthLogRow {
    pub const CSV_HEADER: &'static str =
        "iteration,policy,N_before,og_count,pghgs_count,rehgs_count,effi_count,union_count,pruned,N_after";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.policy,
            self.n_before,
            self.og_count,
            self.pghgs_count,
            self.rehgs_count,
            self.effi_count,
            self.union_count,
            self.pruned,
            self.n_after
        )
    }
}

/// The per-criterion masks of one interval and the policy's union.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub og: Vec<bool>,
    pub pghgs: Vec<bool>,
    pub rehgs: Vec<bool>,
    pub effi: Vec<bool>,
    pub union: Vec<bool>,
}

/// Evaluates every criterion; the union only includes the policy's.
pub fn select(stats: &GrowthStats, cfg: &PolicyConfig) -> Selection {
    let og = select_og(stats, cfg);
    let pghgs = select_pghgs(stats, cfg);
    let rehgs = select_rehgs(stats, cfg);
    let effi = select_effi(stats, cfg);
    let p = cfg.policy;
    let union = (0..stats.len())
        .map(|i| {
            og[i]
                || (p.uses_pghgs() && pghgs[i])
                || (p.uses_rehgs() && rehgs[i])
                || (p.uses_effi() && effi[i])
        })
        .collect();
    Selection {
        og,
        pghgs,
        rehgs,
        effi,
        union,
    }
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

#[derive(Debug, Clone)]
pub struct IntervalOutcome {
    pub cloud: GaussianCloud,
    pub stats: GrowthStats,
    /// Origin of every Gaussian of `cloud` in the cloud before the interval.
    pub origins: Vec<Origin>,
    pub selection: Selection,
    pub log: GrowthLogRow,
}

/// Selects, grows, prunes, and resets statistics for the new cloud.
pub fn run_interval_policy(
    cloud: &GaussianCloud,
    stats: &GrowthStats,
    cfg: &PolicyConfig,
    scene_extent: f64,
    seed: u64,
    iteration: usize,
) -> Result<IntervalOutcome> {
    let selection = select(stats, cfg);
    let (grown, grow_origins) = grow(cloud, &selection.union, stats, cfg, scene_extent, seed)?;
    let (pruned, keep) = prune(&grown, cfg, scene_extent);
    let origins: Vec<Origin> = grow_origins
        .into_iter()
        .zip(&keep)
        .filter_map(|(o, &k)| k.then_some(o))
        .collect();
    let log = GrowthLogRow {
        iteration,
        policy: cfg.policy,
        n_before: cloud.len(),
        og_count: count(&selection.og),
        pghgs_count: count(&selection.pghgs),
        rehgs_count: count(&selection.rehgs),
        effi_count: count(&selection.effi),
        union_count: count(&selection.union),
        pruned: grown.len() - pruned.len(),
        n_after: pruned.len(),
    };
    Ok(IntervalOutcome {
        stats: GrowthStats::new(pruned.len(), cfg.k),
        cloud: pruned,
        origins,
        selection,
        log,
    })
}
