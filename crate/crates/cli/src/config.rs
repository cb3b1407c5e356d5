//! Run configuration: a TOML file with `[scene]`, `[init]` and `[train]`
//! tables, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use hgs_core::densify::Policy;
use hgs_core::scene::{InitMode, SceneSpec};
use hgs_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub count: usize,
    pub mode: InitMode,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            count: 200,
            mode: InitMode::GtSubsample,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub init: InitConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads `path` (or defaults). Returns whether `densify_end` was given.
    pub fn load(path: Option<&Path>) -> Result<(RunConfig, bool)> {
        let Some(path) = path else {
            return Ok((RunConfig::default(), false));
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: toml::Table =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let explicit_end = value
            .get("train")
            .and_then(|t| t.get("policy"))
            .and_then(|p| p.get("densify_end"))
            .is_some();
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok((cfg, explicit_end))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

pub fn parse_policy(s: &str) -> std::result::Result<Policy, String> {
    s.parse::<Policy>().map_err(|e| e.to_string())
}

pub fn parse_init_mode(s: &str) -> std::result::Result<InitMode, String> {
    s.parse::<InitMode>().map_err(|e| e.to_string())
}

/// Training flags shared by `train`, `compare` and `diag`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<Policy>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau_grad: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau_large: Option<f64>,
    #[arg(long)]
    pub tau_ssim: Option<f64>,
    /// Growth interval in iterations.
    #[arg(long)]
    pub interval: Option<usize>,
    #[arg(long)]
    pub densify_start: Option<usize>,
    #[arg(long)]
    pub densify_end: Option<usize>,
    #[arg(long)]
    pub opacity_reset_every: Option<usize>,
    #[arg(long)]
    pub lambda_ssim: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub init_count: Option<usize>,
    #[arg(long, value_parser = parse_init_mode)]
    pub init_mode: Option<InitMode>,
}

impl TrainArgs {
    /// Config file values with flags applied. Unless given explicitly,
    /// densification ends at 60% of the iterations.
    pub fn resolve(&self) -> Result<RunConfig> {
        let (mut cfg, mut explicit_end) = RunConfig::load(self.config.as_deref())?;
        let t = &mut cfg.train;
        let p = &mut t.policy;
        if let Some(v) = self.iters {
            t.total_iters = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.lambda_ssim {
            t.lambda_ssim = v;
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v;
        }
        if let Some(v) = self.policy {
            p.policy = v;
        }
        if let Some(v) = self.tau_grad {
            p.tau_grad = v;
        }
        if let Some(v) = self.k {
            p.k = v;
        }
        if let Some(v) = self.lambda {
            p.lambda = v;
        }
        if let Some(v) = self.tau_large {
            p.tau_large = v;
        }
        if let Some(v) = self.tau_ssim {
            p.tau_ssim = v;
        }
        if let Some(v) = self.interval {
            p.interval = v;
        }
        if let Some(v) = self.densify_start {
            p.densify_start = v;
        }
        if let Some(v) = self.densify_end {
            p.densify_end = v;
            explicit_end = true;
        }
        if let Some(v) = self.opacity_reset_every {
            p.opacity_reset_every = Some(v);
        }
        if !explicit_end {
            p.densify_end = t.total_iters * 3 / 5;
        }
        if let Some(v) = self.init_count {
            cfg.init.count = v;
        }
        if let Some(v) = self.init_mode {
            cfg.init.mode = v;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}
