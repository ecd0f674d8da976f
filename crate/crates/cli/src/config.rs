//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use diffclone_core::dataset::FilterMode;
use diffclone_core::denoiser::DenoiserConfig;
use diffclone_core::encoder::{Objective, PretrainConfig};
use diffclone_core::policies::{BcConfig, DiffCloneConfig};
use diffclone_core::sim::EnvConfig;

use crate::UsageError;

/// Which high-reward filter to apply before training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterSetting {
    None,
    Top(f64),
    Threshold(f64),
}

impl FilterSetting {
    pub fn mode(self) -> Option<FilterMode> {
        match self {
            Self::None => None,
            Self::Top(q) => Some(FilterMode::TopFraction(q)),
            Self::Threshold(t) => Some(FilterMode::Threshold(t)),
        }
    }
}

impl fmt::Display for FilterSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::Top(q) => write!(f, "top:{q}"),
            Self::Threshold(t) => write!(f, "threshold:{t}"),
        }
    }
}

impl FromStr for FilterSetting {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Self::None);
        }
        let parsed = match s.split_once(':') {
            Some(("top", v)) => v.parse().map(Self::Top),
            Some(("threshold", v)) => v.parse().map(Self::Threshold),
            _ => bail!("expected none, top:<fraction> or threshold:<reward>, got '{s}'"),
        };
        parsed.with_context(|| format!("bad number in filter '{s}'"))
    }
}

/// Every tunable of a run. Defaults follow the reference hyperparameters
/// where they exist.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub episodes: usize,
    pub noise_levels: Vec<f64>,
    pub action_dim: usize,
    pub particles: usize,
    pub max_steps: usize,
    pub filter: FilterSetting,
    pub subsample_period: usize,
    pub horizon: usize,
    pub exec_horizon: usize,
    pub obs_horizon: usize,
    pub diffusion_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub channels: Vec<usize>,
    pub groups: usize,
    pub kernel: usize,
    pub time_embed_dim: usize,
    pub ema: bool,
    pub bc_hidden: Vec<usize>,
    pub bc_horizon: usize,
    pub bc_learning_rate: f64,
    pub bc_epochs: usize,
    pub vinn_k: usize,
    pub encoder: String,
    pub pretrain_objective: String,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub eval_episodes: usize,
    /// Keys set by a config file or flag rather than left at the default.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            episodes: 200,
            noise_levels: vec![0.0, 0.05, 0.1],
            action_dim: 7,
            particles: 10,
            max_steps: 80,
            filter: FilterSetting::Top(0.5),
            subsample_period: 1,
            horizon: 16,
            exec_horizon: 8,
            obs_horizon: 1,
            diffusion_steps: 50,
            batch_size: 128,
            learning_rate: 1e-4,
            epochs: 100,
            channels: vec![32, 64],
            groups: 4,
            kernel: 3,
            time_embed_dim: 32,
            ema: true,
            bc_hidden: vec![128, 128],
            bc_horizon: 1,
            bc_learning_rate: 1e-3,
            bc_epochs: 100,
            vinn_k: 5,
            encoder: "identity".into(),
            pretrain_objective: "moco".into(),
            pretrain_epochs: 20,
            pretrain_batch_size: 64,
            pretrain_learning_rate: 1e-3,
            eval_episodes: 50,
            explicit: BTreeSet::new(),
        }
    }
}

fn list<T: FromStr>(s: &str) -> Result<Vec<T>, T::Err> {
    s.split(',').map(|v| v.trim().parse()).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

macro_rules! parse_into {
    ($field:expr, $value:expr, $key:expr) => {
        $field = $value
            .parse()
            .map_err(|e| UsageError(format!("bad value '{}' for {}: {e}", $value, $key)))?
    };
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "episodes",
        "noise_levels",
        "action_dim",
        "particles",
        "max_steps",
        "filter",
        "subsample_period",
        "horizon",
        "exec_horizon",
        "obs_horizon",
        "diffusion_steps",
        "batch_size",
        "learning_rate",
        "epochs",
        "channels",
        "groups",
        "kernel",
        "time_embed_dim",
        "ema",
        "bc_hidden",
        "bc_horizon",
        "bc_learning_rate",
        "bc_epochs",
        "vinn_k",
        "encoder",
        "pretrain_objective",
        "pretrain_epochs",
        "pretrain_batch_size",
        "pretrain_learning_rate",
        "eval_episodes",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad_list = |e: &dyn fmt::Display| UsageError(format!("bad list '{value}' for {key}: {e}"));
        match key {
            "seed" => parse_into!(self.seed, value, key),
            "episodes" => parse_into!(self.episodes, value, key),
            "noise_levels" => self.noise_levels = list(value).map_err(|e| bad_list(&e))?,
            "action_dim" => parse_into!(self.action_dim, value, key),
            "particles" => parse_into!(self.particles, value, key),
            "max_steps" => parse_into!(self.max_steps, value, key),
            "filter" => self.filter = value.parse().map_err(|e: anyhow::Error| UsageError(format!("{e:#}")))?,
            "subsample_period" => parse_into!(self.subsample_period, value, key),
            "horizon" => parse_into!(self.horizon, value, key),
            "exec_horizon" => parse_into!(self.exec_horizon, value, key),
            "obs_horizon" => parse_into!(self.obs_horizon, value, key),
            "diffusion_steps" => parse_into!(self.diffusion_steps, value, key),
            "batch_size" => parse_into!(self.batch_size, value, key),
            "learning_rate" => parse_into!(self.learning_rate, value, key),
            "epochs" => parse_into!(self.epochs, value, key),
            "channels" => self.channels = list(value).map_err(|e| bad_list(&e))?,
            "groups" => parse_into!(self.groups, value, key),
            "kernel" => parse_into!(self.kernel, value, key),
            "time_embed_dim" => parse_into!(self.time_embed_dim, value, key),
            "ema" => parse_into!(self.ema, value, key),
            "bc_hidden" => self.bc_hidden = list(value).map_err(|e| bad_list(&e))?,
            "bc_horizon" => parse_into!(self.bc_horizon, value, key),
            "bc_learning_rate" => parse_into!(self.bc_learning_rate, value, key),
            "bc_epochs" => parse_into!(self.bc_epochs, value, key),
            "vinn_k" => parse_into!(self.vinn_k, value, key),
            "encoder" => self.encoder = value.to_string(),
            "pretrain_objective" => self.pretrain_objective = value.to_string(),
            "pretrain_epochs" => parse_into!(self.pretrain_epochs, value, key),
            "pretrain_batch_size" => parse_into!(self.pretrain_batch_size, value, key),
            "pretrain_learning_rate" => parse_into!(self.pretrain_learning_rate, value, key),
            "eval_episodes" => parse_into!(self.eval_episodes, value, key),
            _ => {
                return Err(UsageError(format!(
                    "unknown config key '{key}' (valid keys: {})",
                    Self::KEYS.join(", ")
                ))
                .into())
            }
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(UsageError(format!("{origin}:{}: expected key = value, got '{line}'", i + 1)).into());
            };
            self.set(k.trim(), v).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override given on the command line.
    pub fn merge_assignment(&mut self, assignment: &str) -> Result<()> {
        let Some((k, v)) = assignment.split_once('=') else {
            return Err(UsageError(format!("--set expects key=value, got '{assignment}'")).into());
        };
        self.set(k.trim(), v)
    }

    /// Resolved values in key order, one `key = value` pair each.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        Self::KEYS
            .iter()
            .map(|&k| {
                let v = match k {
                    "seed" => self.seed.to_string(),
                    "episodes" => self.episodes.to_string(),
                    "noise_levels" => join(&self.noise_levels),
                    "action_dim" => self.action_dim.to_string(),
                    "particles" => self.particles.to_string(),
                    "max_steps" => self.max_steps.to_string(),
                    "filter" => self.filter.to_string(),
                    "subsample_period" => self.subsample_period.to_string(),
                    "horizon" => self.horizon.to_string(),
                    "exec_horizon" => self.exec_horizon.to_string(),
                    "obs_horizon" => self.obs_horizon.to_string(),
                    "diffusion_steps" => self.diffusion_steps.to_string(),
                    "batch_size" => self.batch_size.to_string(),
                    "learning_rate" => self.learning_rate.to_string(),
                    "epochs" => self.epochs.to_string(),
                    "channels" => join(&self.channels),
                    "groups" => self.groups.to_string(),
                    "kernel" => self.kernel.to_string(),
                    "time_embed_dim" => self.time_embed_dim.to_string(),
                    "ema" => self.ema.to_string(),
                    "bc_hidden" => join(&self.bc_hidden),
                    "bc_horizon" => self.bc_horizon.to_string(),
                    "bc_learning_rate" => self.bc_learning_rate.to_string(),
                    "bc_epochs" => self.bc_epochs.to_string(),
                    "vinn_k" => self.vinn_k.to_string(),
                    "encoder" => self.encoder.clone(),
                    "pretrain_objective" => self.pretrain_objective.clone(),
                    "pretrain_epochs" => self.pretrain_epochs.to_string(),
                    "pretrain_batch_size" => self.pretrain_batch_size.to_string(),
                    "pretrain_learning_rate" => self.pretrain_learning_rate.to_string(),
                    "eval_episodes" => self.eval_episodes.to_string(),
                    other => unreachable!("key list and match out of sync at {other}"),
                };
                (k, v)
            })
            .collect()
    }

    /// The config in the same text form `merge_text` reads.
    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Re-checks every constraint the downstream modules impose.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| -> Result<()> { Err(UsageError(msg).into()) };
        if self.episodes == 0 || self.eval_episodes == 0 {
            return fail("episodes and eval_episodes must be positive".into());
        }
        if self.noise_levels.is_empty() || self.noise_levels.iter().any(|n| !(*n >= 0.0)) {
            return fail("noise_levels must be non-negative".into());
        }
        if self.subsample_period == 0 || self.horizon == 0 || self.obs_horizon == 0 || self.diffusion_steps == 0 {
            return fail("subsample_period, horizon, obs_horizon and diffusion_steps must be positive".into());
        }
        if self.exec_horizon == 0 || self.exec_horizon > self.horizon {
            return fail(format!("exec_horizon must be in 1..={}, got {}", self.horizon, self.exec_horizon));
        }
        if self.batch_size == 0 || self.pretrain_batch_size == 0 || self.vinn_k == 0 || self.bc_horizon == 0 {
            return fail("batch sizes, vinn_k and bc_horizon must be positive".into());
        }
        for (k, lr) in [
            ("learning_rate", self.learning_rate),
            ("bc_learning_rate", self.bc_learning_rate),
            ("pretrain_learning_rate", self.pretrain_learning_rate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{k} must be positive, got {lr}"));
            }
        }
        match self.filter {
            FilterSetting::Top(q) if !(q > 0.0 && q <= 1.0) => return fail(format!("filter top fraction must be in (0, 1], got {q}")),
            FilterSetting::Threshold(t) if !t.is_finite() => return fail(format!("filter threshold must be finite, got {t}")),
            _ => {}
        }
        self.objective()?;
        self.env().validate().map_err(|e| UsageError(e.to_string()))?;
        self.denoiser().validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(())
    }

    pub fn objective(&self) -> Result<Objective> {
        self.pretrain_objective
            .parse()
            .map_err(|e: diffclone_core::Error| UsageError(e.to_string()).into())
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            action_dim: self.action_dim,
            particles: self.particles,
            max_steps: self.max_steps,
            ..EnvConfig::default()
        }
    }

    /// Architecture; `obs_dim` is a placeholder replaced at training time.
    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            action_dim: self.action_dim,
            horizon: self.horizon,
            obs_dim: 1,
            channels: self.channels.clone(),
            kernel: self.kernel,
            groups: self.groups,
            time_embed_dim: self.time_embed_dim,
            diffusion_steps: self.diffusion_steps,
        }
    }

    pub fn diffclone(&self) -> DiffCloneConfig {
        DiffCloneConfig {
            denoiser: self.denoiser(),
            diffusion_steps: self.diffusion_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            exec_horizon: self.exec_horizon,
            obs_horizon: self.obs_horizon,
            ema: self.ema,
        }
    }

    pub fn bc(&self) -> BcConfig {
        BcConfig {
            hidden: self.bc_hidden.clone(),
            bc_horizon: self.bc_horizon,
            exec_horizon: self.bc_horizon,
            obs_horizon: self.obs_horizon,
            batch_size: self.batch_size,
            learning_rate: self.bc_learning_rate,
            epochs: self.bc_epochs,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            learning_rate: self.pretrain_learning_rate,
            ..PretrainConfig::default()
        }
    }
}
