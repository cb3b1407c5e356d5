//! Multi-policy, multi-seed comparison tables.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use hgs_core::densify::Policy;
use rayon::prelude::*;

use crate::config::{parse_policy, RunConfig, TrainArgs};
use crate::{load_scene, train_to_dir};

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    pub scene: PathBuf,
    /// Comma-separated policies (default og, or none with a sweep).
    #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
    pub policies: Option<Vec<Policy>>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Also train `og` at each of these comma-separated gradient thresholds.
    #[arg(long, value_delimiter = ',')]
    pub tau_grad_sweep: Option<Vec<f64>>,
    #[arg(long, default_value = "runs/compare")]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

/// One (configuration, seed) run of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub test_psnr: Option<f64>,
    pub test_ssim: Option<f64>,
    pub final_n: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub policy: Policy,
    pub tau_grad: f64,
    pub runs: Vec<RunResult>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CompareRow {
    fn stat(&self, f: impl Fn(&RunResult) -> Option<f64>) -> Option<(f64, f64)> {
        let xs: Option<Vec<f64>> = self.runs.iter().map(f).collect();
        xs.filter(|v| !v.is_empty()).map(|v| mean_std(&v))
    }

    pub fn psnr(&self) -> Option<(f64, f64)> {
        self.stat(|r| r.test_psnr)
    }

    pub fn ssim(&self) -> Option<(f64, f64)> {
        self.stat(|r| r.test_ssim)
    }

    pub fn final_n(&self) -> (f64, f64) {
        self.stat(|r| Some(r.final_n as f64)).unwrap_or((0.0, 0.0))
    }

    pub fn wall(&self) -> (f64, f64) {
        self.stat(|r| Some(r.wall_seconds)).unwrap_or((0.0, 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

fn opt6(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl CompareTable {
    pub fn row(&self, label: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aggregated rows; per-run values use the report CSV formatting.
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "label,policy,tau_grad,seeds,test_psnr_mean,test_psnr_std,test_ssim_mean,test_ssim_std,final_n_mean,final_n_std,wall_seconds_mean\n",
        );
        for r in &self.rows {
            let (p, s) = (r.psnr(), r.ssim());
            let (n, nsd) = r.final_n();
            let _ = writeln!(
                out,
                "{},{},{:e},{},{},{},{},{},{:.1},{:.1},{:.1}",
                r.label,
                r.policy,
                r.tau_grad,
                r.runs.len(),
                opt6(p.map(|x| x.0)),
                opt6(p.map(|x| x.1)),
                opt6(s.map(|x| x.0)),
                opt6(s.map(|x| x.1)),
                n,
                nsd,
                r.wall().0
            );
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("label,seed,test_psnr,test_ssim,final_n,wall_seconds\n");
        for r in &self.rows {
            for run in &r.runs {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{:.3}",
                    run.label,
                    run.seed,
                    opt6(run.test_psnr),
                    opt6(run.test_ssim),
                    run.final_n,
                    run.wall_seconds
                );
            }
        }
        out
    }

    pub fn markdown(&self) -> String {
        let mut out = String::from(
            "| run | seeds | test PSNR (dB) | test SSIM | final N | wall (s) |\n|---|---:|---:|---:|---:|---:|\n",
        );
        let pm = |v: Option<(f64, f64)>, d: usize| {
            v.map(|(m, s)| format!("{m:.d$} ± {s:.d$}"))
                .unwrap_or_else(|| "-".into())
        };
        for r in &self.rows {
            let (n, nsd) = r.final_n();
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {n:.1} ± {nsd:.1} | {:.1} |",
                r.label,
                r.runs.len(),
                pm(r.psnr(), 3),
                pm(r.ssim(), 4),
                r.wall().0
            );
        }
        out
    }
}

struct Job {
    label: String,
    cfg: RunConfig,
    seed: u64,
}

/// Row label of an `og` threshold sweep entry.
pub fn sweep_label(tau: f64) -> String {
    format!("og@tau={tau:e}")
}

pub fn cmd_compare(a: &CompareArgs) -> Result<CompareTable> {
    if a.seeds.is_empty() {
        bail!("compare needs at least one seed");
    }
    let base = a.train.resolve()?;
    let policies = match (&a.policies, &a.tau_grad_sweep) {
        (Some(p), _) => p.clone(),
        (None, Some(_)) => Vec::new(),
        (None, None) => vec![Policy::Og],
    };
    let mut configs: Vec<(String, RunConfig)> = policies
        .iter()
        .map(|&p| {
            let mut c = base.clone();
            c.train.policy.policy = p;
            (p.name().to_string(), c)
        })
        .collect();
    for &tau in a.tau_grad_sweep.iter().flatten() {
        let mut c = base.clone();
        c.train.policy.policy = Policy::Og;
        c.train.policy.tau_grad = tau;
        c.train.validate()?;
        configs.push((sweep_label(tau), c));
    }
    if configs.is_empty() {
        bail!("compare needs at least one policy or sweep threshold");
    }
    let scene = load_scene(&a.scene)?;
    let mut jobs = Vec::new();
    for (label, cfg) in &configs {
        for &seed in &a.seeds {
            let mut cfg = cfg.clone();
            cfg.train.seed = seed;
            jobs.push(Job {
                label: label.clone(),
                cfg,
                seed,
            });
        }
    }
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|job| {
            let scene = scene.clone();
            let dir = a.out.join(&job.label).join(format!("seed_{}", job.seed));
            let report = train_to_dir(&scene, &job.cfg, &dir, 0, None)
                .with_context(|| format!("run {} seed {}", job.label, job.seed))?;
            let last = report.last();
            Ok(RunResult {
                label: job.label.clone(),
                seed: job.seed,
                test_psnr: last.and_then(|r| r.test_psnr),
                test_ssim: last.and_then(|r| r.test_ssim),
                final_n: report.final_cloud.len(),
                wall_seconds: report.wall_seconds.last().copied().unwrap_or(0.0),
            })
        })
        .collect::<Result<_>>()?;
    let rows = configs
        .into_iter()
        .map(|(label, cfg)| CompareRow {
            runs: results.iter().filter(|r| r.label == label).cloned().collect(),
            policy: cfg.train.policy.policy,
            tau_grad: cfg.train.policy.tau_grad,
            label,
        })
        .collect();
    let table = CompareTable { rows };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("compare.csv"), table.csv())?;
    fs::write(a.out.join("compare_runs.csv"), table.runs_csv())?;
    fs::write(a.out.join("compare.md"), table.markdown())?;
    Ok(table)
}
