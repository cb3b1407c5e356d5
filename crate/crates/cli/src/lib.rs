//! The `hgs` command line: scene generation, training, evaluation, policy
//! comparison, rendering and diagnostic maps.

pub mod compare;
pub mod config;
pub mod diag;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hgs_core::camera::Split;
use hgs_core::gaussian::GaussianCloud;
use hgs_core::render::render_view;
use hgs_core::scene::{gen_synthetic, init_cloud, Scene};
use hgs_core::train::{evaluate, TrainReport, Trainer};

use crate::compare::CompareArgs;
use crate::config::{RunConfig, TrainArgs};
use crate::diag::DiagArgs;

pub const THREADS_ENV: &str = "HGS_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "hgs",
    version,
    about = "Gaussian splatting with hard-Gaussian densification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ring scene directory.
    GenScene(GenSceneArgs),
    /// Train one policy on a scene.
    Train(TrainCmdArgs),
    /// Evaluate a checkpoint on a scene split.
    Eval(EvalArgs),
    /// Train several policies and seeds and tabulate the results.
    Compare(CompareArgs),
    /// Render one view of a checkpoint.
    Render(RenderArgs),
    /// Export diagnostic maps for one view.
    Diag(DiagArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenSceneArgs {
    /// Output scene directory.
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(3..))]
    pub views: Option<u64>,
    /// Square image size in pixels.
    #[arg(long, value_parser = clap::value_parser!(u64).range(8..))]
    pub size: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub gaussians: Option<u64>,
    #[arg(long)]
    pub ring_radius: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainCmdArgs {
    pub scene: PathBuf,
    /// Output directory for reports and checkpoints.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Save a checkpoint every this many iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue from a checkpoint written with the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub view: u32,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (expected train or test)")),
    }
}

/// Caps the global thread pool from `HGS_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        // Fails only if the pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene(a) => cmd_gen_scene(&a).map(|_| ()),
        Command::Train(a) => {
            let report = cmd_train(&a)?;
            if let Some(r) = report.last() {
                println!("{}", hgs_core::train::EvalRecord::CSV_HEADER);
                println!("{}", r.csv());
            }
            Ok(())
        }
        Command::Eval(a) => {
            let (p, s) = cmd_eval(&a)?;
            println!("psnr,ssim\n{p:.6},{s:.6}");
            Ok(())
        }
        Command::Compare(a) => {
            let table = compare::cmd_compare(&a)?;
            print!("{}", table.markdown());
            Ok(())
        }
        Command::Render(a) => cmd_render(&a),
        Command::Diag(a) => diag::cmd_diag(&a).map(|_| ()),
    }
}

pub fn cmd_gen_scene(a: &GenSceneArgs) -> Result<Scene> {
    let (cfg, _) = RunConfig::load(a.config.as_deref())?;
    let mut spec = cfg.scene;
    if let Some(v) = a.views {
        spec.views = v as usize;
    }
    if let Some(v) = a.size {
        spec.width = v as usize;
        spec.height = v as usize;
    }
    if let Some(v) = a.gaussians {
        spec.gaussians = v as usize;
    }
    if let Some(v) = a.ring_radius {
        spec.ring_radius = v;
    }
    let (scene, _) = gen_synthetic(&spec, a.seed)?;
    scene
        .save(&a.out)
        .with_context(|| format!("writing scene to {}", a.out.display()))?;
    Ok(scene)
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    Scene::load(path).with_context(|| format!("loading scene {}", path.display()))
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud> {
    GaussianCloud::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Writes `report.csv`, `report.json`, `growth_log.csv` and `timing.csv`.
pub fn write_report(dir: &Path, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let files = [
        ("report.csv", report.records_csv()),
        ("report.json", report.summary_json()),
        ("growth_log.csv", report.growth_log_csv()),
        ("timing.csv", report.timing_csv()),
    ];
    for (name, text) in files {
        let p = dir.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "checkpoint.hgs";

/// Trains with a resolved configuration and writes every output to `out`.
pub fn train_to_dir(
    scene: &Scene,
    cfg: &RunConfig,
    out: &Path,
    checkpoint_every: usize,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(scene, &cfg.train, ckpt)
            .with_context(|| format!("resuming from {}", ckpt.display()))?,
        None => {
            let init = init_cloud(scene, cfg.init.count, cfg.init.mode, cfg.train.seed)?;
            Trainer::new(scene, init, &cfg.train)?
        }
    };
    trainer.set_dump_dir(out);
    let ckpt = out.join(CHECKPOINT_FILE);
    while !trainer.is_done() {
        let next = trainer
            .iteration
            .checked_div(checkpoint_every)
            .map_or(usize::MAX, |q| (q + 1) * checkpoint_every);
        trainer.run_until(next)?;
        if !trainer.is_done() {
            trainer.save_checkpoint(&ckpt)?;
        }
    }
    trainer.save_checkpoint(&ckpt)?;
    let report = trainer.report();
    write_report(out, &report)?;
    Ok(report)
}

pub fn cmd_train(a: &TrainCmdArgs) -> Result<TrainReport> {
    let cfg = a.train.resolve()?;
    let scene = load_scene(&a.scene)?;
    train_to_dir(&scene, &cfg, &a.out, a.checkpoint_every, a.resume.as_deref())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(f64, f64)> {
    let scene = load_scene(&a.scene)?;
    let cloud = load_cloud(&a.checkpoint)?;
    Ok(evaluate(&cloud, &scene, a.split)?)
}

pub fn view_index(scene: &Scene, view: u32) -> Result<usize> {
    match scene.view_index(view) {
        Some(v) => Ok(v),
        None => bail!("view {view} is not in the scene"),
    }
}

pub fn cmd_render(a: &RenderArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let cloud = load_cloud(&a.checkpoint)?;
    let v = view_index(&scene, a.view)?;
    let r = render_view(&cloud, &scene.cameras[v], &scene.background)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    r.image.save_png(&a.out)?;
    Ok(())
}
