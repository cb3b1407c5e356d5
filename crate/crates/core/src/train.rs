//! Optimization loop: render, loss, backward, Adam, growth intervals,
//! evaluation and exact checkpoint/resume.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backward::{backward_view, ParamGrads};
use crate::camera::Split;
use crate::densify::{accumulate, run_interval_policy, GrowthLogRow, GrowthStats, Origin, PolicyConfig};
use crate::error::{Error, Result};
use crate::gaussian::{logit, GaussianCloud, PARAMS_PER_GAUSSIAN};
use crate::loss::{combined_loss, psnr, ssim_map, DEFAULT_LAMBDA_SSIM};
use crate::render::render_view;
use crate::scene::Scene;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;
/// Opacity that periodic resets clamp to.
pub const OPACITY_RESET_VALUE: f64 = 0.01;

const GROWTH_STREAM: u64 = 1 << 40;
const STATE_MAGIC: &[u8; 8] = b"HGSSTATE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iters: usize,
    /// Initial mean learning rate, in units of the scene extent.
    pub lr_means: f64,
    pub lr_means_final: f64,
    pub lr_scales: f64,
    pub lr_rotations: f64,
    pub lr_opacities: f64,
    pub lr_colors: f64,
    pub lambda_ssim: f64,
    pub eval_every: usize,
    /// Checkpoint period for drivers that save while training; 0 is off.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::with_iters(3000)
    }
}

impl TrainConfig {
    /// Defaults with densification ending at 60% of `total_iters`.
    pub fn with_iters(total_iters: usize) -> Self {
        TrainConfig {
            total_iters,
            lr_means: 1.6e-4,
            lr_means_final: 1.6e-6,
            lr_scales: 5e-3,
            lr_rotations: 1e-3,
            lr_opacities: 5e-2,
            lr_colors: 2.5e-3,
            lambda_ssim: DEFAULT_LAMBDA_SSIM,
            eval_every: 500,
            checkpoint_every: 0,
            seed: 0,
            policy: PolicyConfig {
                densify_end: total_iters * 3 / 5,
                ..PolicyConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.total_iters < 1 {
            return bad("total_iters must be at least 1");
        }
        let lrs = [
            self.lr_means,
            self.lr_means_final,
            self.lr_scales,
            self.lr_rotations,
            self.lr_opacities,
            self.lr_colors,
        ];
        if !lrs.iter().all(|&lr| lr > 0.0 && lr.is_finite()) {
            return bad("learning rates must be positive");
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return bad("lambda_ssim must be in [0, 1]");
        }
        self.policy.validate()
    }

    /// Stable digest of the configuration, stored in checkpoints.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        serde_json::to_string(self).unwrap_or_default().hash(&mut h);
        h.finish()
    }

    /// Mean learning rate at iteration `iter` (1-based), log-linear from
    /// `lr_means` to `lr_means_final`.
    pub fn lr_means_at(&self, iter: usize) -> f64 {
        let t = (iter as f64 / self.total_iters as f64).clamp(0.0, 1.0);
        (self.lr_means.ln() * (1.0 - t) + self.lr_means_final.ln() * t).exp()
    }
}

/// Adam moments over the flat parameter layout of [`GaussianCloud::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(n_gaussians: usize) -> Self {
        Adam {
            m: vec![0.0; n_gaussians * PARAMS_PER_GAUSSIAN],
            v: vec![0.0; n_gaussians * PARAMS_PER_GAUSSIAN],
            step: 0,
        }
    }

    /// One update with per-slot learning rates. Gaussians whose gradient is
    /// exactly zero (not seen this step) keep their parameters and moments.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lrs: &[f64; PARAMS_PER_GAUSSIAN]) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (g, (p, (m, v))) in grads.chunks_exact(PARAMS_PER_GAUSSIAN).zip(
            params.chunks_exact_mut(PARAMS_PER_GAUSSIAN).zip(
                self.m
                    .chunks_exact_mut(PARAMS_PER_GAUSSIAN)
                    .zip(self.v.chunks_exact_mut(PARAMS_PER_GAUSSIAN)),
            ),
        ) {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            for j in 0..PARAMS_PER_GAUSSIAN {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lrs[j] * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }

    /// State for a cloud rebuilt from `origins`.
    pub fn remap(&self, origins: &[Origin]) -> Adam {
        let mut out = Adam::new(origins.len());
        out.step = self.step;
        for (j, o) in origins.iter().enumerate() {
            if o.inherit_state {
                let (src, dst) = (o.parent * PARAMS_PER_GAUSSIAN, j * PARAMS_PER_GAUSSIAN);
                out.m[dst..dst + PARAMS_PER_GAUSSIAN]
                    .copy_from_slice(&self.m[src..src + PARAMS_PER_GAUSSIAN]);
                out.v[dst..dst + PARAMS_PER_GAUSSIAN]
                    .copy_from_slice(&self.v[src..src + PARAMS_PER_GAUSSIAN]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub train_psnr: f64,
    pub test_psnr: Option<f64>,
    pub test_ssim: Option<f64>,
    pub n_gaussians: usize,
}

impl EvalRecord {
    pub const CSV_HEADER: &'static str = "iteration,train_psnr,test_psnr,test_ssim,n_gaussians";

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{},{},{}",
            self.iteration,
            self.train_psnr,
            opt(self.test_psnr),
            opt(self.test_ssim),
            self.n_gaussians
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub records: Vec<EvalRecord>,
    pub growth_log: Vec<GrowthLogRow>,
    /// Wall time at each record, in seconds. Not part of the deterministic
    /// outputs.
    pub wall_seconds: Vec<f64>,
    pub final_cloud: GaussianCloud,
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    config: &'a TrainConfig,
    final_n: usize,
    final_test_psnr: Option<f64>,
    final_test_ssim: Option<f64>,
    final_cloud_fingerprint: String,
    records: &'a [EvalRecord],
    growth_log: &'a [GrowthLogRow],
}

impl TrainReport {
    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    pub fn records_csv(&self) -> String {
        lines(EvalRecord::CSV_HEADER, self.records.iter().map(EvalRecord::csv))
    }

    pub fn growth_log_csv(&self) -> String {
        lines(
            GrowthLogRow::CSV_HEADER,
            self.growth_log.iter().map(GrowthLogRow::csv),
        )
    }

    pub fn timing_csv(&self) -> String {
        lines(
            "iteration,wall_seconds",
            self.records
                .iter()
                .zip(&self.wall_seconds)
                .map(|(r, w)| format!("{},{w:.3}", r.iteration)),
        )
    }

    /// JSON summary; byte-identical across runs with the same seed.
    pub fn summary_json(&self) -> String {
        let last = self.last();
        let summary = ReportSummary {
            config: &self.config,
            final_n: self.final_cloud.len(),
            final_test_psnr: last.and_then(|r| r.test_psnr),
            final_test_ssim: last.and_then(|r| r.test_ssim),
            final_cloud_fingerprint: format!("{:016x}", self.final_cloud.fingerprint()),
            records: &self.records,
            growth_log: &self.growth_log,
        };
        serde_json::to_string_pretty(&summary).unwrap_or_default() + "\n"
    }
}

fn lines(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

/// Mean PSNR and mean SSIM of `cloud` over the views of `split`.
pub fn evaluate(cloud: &GaussianCloud, scene: &Scene, split: Split) -> Result<(f64, f64)> {
    let views = scene.views(split);
    if views.is_empty() {
        return Err(Error::InvalidInput(format!("no {split:?} views to evaluate")));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for &v in &views {
        let r = render_view(cloud, &scene.cameras[v], &scene.background)?;
        p += psnr(&r.image, &scene.gt_images[v])?;
        s += ssim_map(&r.image, &scene.gt_images[v])?.mean();
    }
    Ok((p / views.len() as f64, s / views.len() as f64))
}

/// Resumable training state over a borrowed scene.
pub struct Trainer<'a> {
    scene: &'a Scene,
    cfg: TrainConfig,
    pub cloud: GaussianCloud,
    pub adam: Adam,
    pub stats: GrowthStats,
    /// Completed iterations.
    pub iteration: usize,
    pub records: Vec<EvalRecord>,
    pub growth_log: Vec<GrowthLogRow>,
    pub wall_seconds: Vec<f64>,
    /// Last loss value, for monitoring.
    pub last_loss: f64,
    train_views: Vec<usize>,
    dump_dir: Option<PathBuf>,
    clock: Instant,
    elapsed_before: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(scene: &'a Scene, init: GaussianCloud, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        init.validate()?;
        let mut cfg = cfg.clone();
        let (w, h) = scene.max_dims();
        cfg.policy.resolve_units(w, h);
        let n = init.len();
        Ok(Trainer {
            scene,
            train_views: scene.views(Split::Train),
            adam: Adam::new(n),
            stats: GrowthStats::new(n, cfg.policy.k),
            cfg,
            cloud: init,
            iteration: 0,
            records: Vec::new(),
            growth_log: Vec::new(),
            wall_seconds: Vec::new(),
            last_loss: f64::NAN,
            dump_dir: None,
            clock: Instant::now(),
            elapsed_before: 0.0,
        })
    }

    /// Where non-finite losses dump the offending view and cloud.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    /// The configuration with resolved gradient units.
    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.total_iters
    }

    /// Scene index of the training view used at iteration `iter` (1-based).
    /// Views are visited in a fresh seeded permutation every epoch.
    pub fn view_for(&self, iter: usize) -> usize {
        let n = self.train_views.len();
        let epoch = (iter - 1) / n;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        self.train_views[perm[(iter - 1) % n]]
    }

    fn lrs(&self, iter: usize) -> [f64; PARAMS_PER_GAUSSIAN] {
        let c = &self.cfg;
        let mean = c.lr_means_at(iter) * self.scene.extent;
        let mut lrs = [0.0; PARAMS_PER_GAUSSIAN];
        lrs[0..3].fill(mean);
        lrs[3..6].fill(c.lr_scales);
        lrs[6..10].fill(c.lr_rotations);
        lrs[10] = c.lr_opacities;
        lrs[11..14].fill(c.lr_colors);
        lrs
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<()> {
        let it = self.iteration + 1;
        let v = self.view_for(it);
        let cam = &self.scene.cameras[v];
        let gt = &self.scene.gt_images[v];
        let render = render_view(&self.cloud, cam, &self.scene.background)?;
        let (loss, d_image) = combined_loss(&render.image, gt, self.cfg.lambda_ssim)?;
        let grads = if loss.is_finite() {
            backward_view(&self.cloud, cam, &render, &d_image)?
        } else {
            ParamGrads::zeros(0)
        };
        if !loss.is_finite() || !grads.all_finite() {
            return Err(self.dump_non_finite(it, v));
        }
        self.last_loss = loss;

        let policy = &self.cfg.policy;
        if it <= policy.densify_end {
            let ssim = ssim_map(&render.image, gt)?;
            accumulate(&mut self.stats, cam.view_id, &grads, &render, &ssim, policy)?;
        }

        let mut params = self.cloud.to_flat();
        let lrs = self.lrs(it);
        self.adam.update(&mut params, &grads.to_flat(), &lrs);
        self.cloud = GaussianCloud::from_flat(&params)?;

        if policy.is_growth_step(it) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(GROWTH_STREAM + it as u64);
            let outcome =
                run_interval_policy(&self.cloud, &self.stats, policy, self.scene.extent, rng.gen(), it)?;
            self.adam = self.adam.remap(&outcome.origins);
            self.cloud = outcome.cloud;
            self.stats = outcome.stats;
            self.growth_log.push(outcome.log);
        }
        if let Some(every) = policy.opacity_reset_every {
            if every > 0 && it.is_multiple_of(every) && it <= policy.densify_end {
                self.reset_opacity();
            }
        }

        self.iteration = it;
        if it.is_multiple_of(self.cfg.eval_every) || it == self.cfg.total_iters {
            self.record()?;
        }
        Ok(())
    }

    fn reset_opacity(&mut self) {
        let cap = logit(OPACITY_RESET_VALUE);
        for (i, o) in self.cloud.raw_opacities.iter_mut().enumerate() {
            *o = o.min(cap);
            let slot = i * PARAMS_PER_GAUSSIAN + 10;
            self.adam.m[slot] = 0.0;
            self.adam.v[slot] = 0.0;
        }
    }

    fn record(&mut self) -> Result<()> {
        let (train_psnr, _) = evaluate(&self.cloud, self.scene, Split::Train)?;
        let test = if self.scene.views(Split::Test).is_empty() {
            None
        } else {
            Some(evaluate(&self.cloud, self.scene, Split::Test)?)
        };
        self.records.push(EvalRecord {
            iteration: self.iteration,
            train_psnr,
            test_psnr: test.map(|t| t.0),
            test_ssim: test.map(|t| t.1),
            n_gaussians: self.cloud.len(),
        });
        self.wall_seconds
            .push(self.elapsed_before + self.clock.elapsed().as_secs_f64());
        Ok(())
    }

    fn dump_non_finite(&self, iteration: usize, v: usize) -> Error {
        let view_id = self.scene.cameras[v].view_id;
        let dump = self.dump_dir.as_ref().and_then(|dir| {
            let d = dir.join(format!("nonfinite_{iteration}"));
            fs::create_dir_all(&d).ok()?;
            self.cloud.save(&d.join("cloud.hgs")).ok()?;
            self.scene.gt_images[v]
                .save_png(&d.join(format!("view_{view_id}_gt.png")))
                .ok()?;
            fs::write(
                d.join("info.json"),
                format!("{{\"iteration\": {iteration}, \"view_id\": {view_id}}}\n"),
            )
            .ok()?;
            Some(d)
        });
        Error::NonFiniteLoss {
            iteration,
            view_id,
            n_gaussians: self.cloud.len(),
            dump,
        }
    }

    /// Runs until `iteration` iterations are complete (capped at the total).
    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        while self.iteration < iteration.min(self.cfg.total_iters) {
            self.step()?;
        }
        Ok(())
    }

    pub fn report(&self) -> TrainReport {
        TrainReport {
            config: self.cfg.clone(),
            records: self.records.clone(),
            growth_log: self.growth_log.clone(),
            wall_seconds: self.wall_seconds.clone(),
            final_cloud: self.cloud.clone(),
        }
    }

    /// Writes `path` (HGSCLOUD), `path.json` (sidecar) and `path.state`
    /// (exact f64 parameters and Adam moments).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.cloud.save(path)?;
        let blob = state_path(path);
        let mut buf = Vec::new();
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&(self.cloud.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.adam.step.to_le_bytes());
        for v in self
            .cloud
            .to_flat()
            .iter()
            .chain(&self.adam.m)
            .chain(&self.adam.v)
        {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(&blob)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(&blob, e))?;
        let sidecar = Sidecar {
            iteration: self.iteration,
            config_digest: format!("{:016x}", self.cfg.digest()),
            state_blob: blob
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            stats: self.stats.clone(),
            records: self.records.clone(),
            growth_log: self.growth_log.clone(),
            wall_seconds: self.wall_seconds.clone(),
            elapsed: self.elapsed_before + self.clock.elapsed().as_secs_f64(),
        };
        let json_path = sidecar_path(path);
        let text = serde_json::to_string(&sidecar).map_err(|source| Error::Json {
            path: json_path.clone(),
            source,
        })?;
        fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
    }

    /// Restores a checkpoint written by [`Trainer::save_checkpoint`] with
    /// the same configuration.
    pub fn resume(scene: &'a Scene, cfg: &TrainConfig, path: &Path) -> Result<Self> {
        let json_path = sidecar_path(path);
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: json_path,
            source,
        })?;
        let mut t = Trainer::new(scene, GaussianCloud::new(), cfg)?;
        if sidecar.config_digest != format!("{:016x}", t.cfg.digest()) {
            return Err(Error::BadCheckpoint(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        let blob = path.with_file_name(&sidecar.state_blob);
        let mut buf = Vec::new();
        fs::File::open(&blob)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(&blob, e))?;
        if buf.len() < 24 || &buf[..8] != STATE_MAGIC {
            return Err(Error::BadCheckpoint("state blob has a bad header".into()));
        }
        let word = |i: usize| -> [u8; 8] { buf[i..i + 8].try_into().expect("8-byte slice") };
        let n = u64::from_le_bytes(word(8)) as usize;
        let step = u64::from_le_bytes(word(16));
        let len = n * PARAMS_PER_GAUSSIAN;
        if buf.len() != 24 + 3 * len * 8 {
            return Err(Error::BadCheckpoint("state blob has the wrong length".into()));
        }
        let vals: Vec<f64> = (0..3 * len)
            .map(|k| f64::from_le_bytes(word(24 + 8 * k)))
            .collect();
        let cloud = GaussianCloud::from_flat(&vals[..len])?;
        if cloud.len() != sidecar.stats.len() {
            return Err(Error::BadCheckpoint(
                "growth statistics do not match the cloud".into(),
            ));
        }
        t.cloud = cloud;
        t.adam = Adam {
            m: vals[len..2 * len].to_vec(),
            v: vals[2 * len..].to_vec(),
            step,
        };
        t.stats = sidecar.stats;
        t.iteration = sidecar.iteration;
        t.records = sidecar.records;
        t.growth_log = sidecar.growth_log;
        t.wall_seconds = sidecar.wall_seconds;
        t.elapsed_before = sidecar.elapsed;
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    iteration: usize,
    config_digest: String,
    state_blob: String,
    stats: GrowthStats,
    records: Vec<EvalRecord>,
    growth_log: Vec<GrowthLogRow>,
    wall_seconds: Vec<f64>,
    elapsed: f64,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".json")
}

pub fn state_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".state")
}

/// Trains `init` on `scene` for `cfg.total_iters` iterations.
pub fn train(scene: &Scene, init: GaussianCloud, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut t = Trainer::new(scene, init, cfg)?;
    t.run_until(cfg.total_iters)?;
    Ok(t.report())
}
