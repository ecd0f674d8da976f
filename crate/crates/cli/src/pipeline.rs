//! Filter, sub-sample, normalize, window and train.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use diffclone_core::dataset::{compute_norm_stats, dataset_windows, filter_high_reward, Dataset, NormStats};
use diffclone_core::encoder::EncoderNet;
use diffclone_core::policies::{train_bc, train_diffclone, AnyPolicy, Encoder, VinnPolicy};
use diffclone_core::report::TrainReport;
use diffclone_core::Error;

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Agent {
    Diffclone,
    Bc,
    Vinn,
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Diffclone => "diffclone",
            Self::Bc => "bc",
            Self::Vinn => "vinn",
        };
        f.write_str(name)
    }
}

/// `identity`, or the path of a pretrained encoder checkpoint.
pub fn load_encoder(source: &str, raw_dim: usize) -> Result<Encoder> {
    if source == "identity" {
        return Ok(Encoder::identity(raw_dim));
    }
    let net = EncoderNet::load(Path::new(source)).with_context(|| format!("loading encoder {source}"))?;
    Ok(Encoder::Learned(net))
}

/// Applies the configured high-reward filter.
pub fn filter(cfg: &RunConfig, ds: &Dataset) -> Result<Dataset> {
    let Some(mode) = cfg.filter.mode() else {
        return Ok(ds.clone());
    };
    match filter_high_reward(ds, mode) {
        Err(Error::EmptySelection(detail)) => Err(Error::EmptySelection(format!(
            "filter setting 'filter = {}' kept no trajectories ({detail})",
            cfg.filter
        ))
        .into()),
        other => Ok(other?),
    }
}

/// Filtered data, statistics and encoder, ready for windowing.
pub struct Prepared {
    pub dataset: Dataset,
    pub stats: NormStats,
    pub encoder: Encoder,
}

pub fn prepare(cfg: &RunConfig, ds: &Dataset, encoder: Encoder) -> Result<Prepared> {
    if ds.dims.action_dim != cfg.action_dim {
        return Err(crate::UsageError(format!(
            "dataset has action_dim {}, config has {}",
            ds.dims.action_dim, cfg.action_dim
        ))
        .into());
    }
    let dataset = filter(cfg, ds)?;
    let stats = compute_norm_stats(&dataset, encoder.as_dyn())?;
    Ok(Prepared { dataset, stats, encoder })
}

pub fn train(agent: Agent, cfg: &RunConfig, prep: &Prepared) -> Result<(AnyPolicy, TrainReport)> {
    let Prepared { dataset, stats, encoder } = prep;
    let enc = encoder.as_dyn();
    let seed = cfg.seed;
    Ok(match agent {
        Agent::Diffclone => {
            let windows = dataset_windows(dataset, cfg.horizon, cfg.obs_horizon, cfg.subsample_period, stats, enc)?;
            let (p, r) = train_diffclone(&windows, stats.clone(), encoder.clone(), &cfg.diffclone(), seed)?;
            (AnyPolicy::DiffClone(p), r)
        }
        Agent::Bc => {
            let windows = dataset_windows(dataset, cfg.bc_horizon, cfg.obs_horizon, cfg.subsample_period, stats, enc)?;
            let (p, r) = train_bc(&windows, stats.clone(), encoder.clone(), &cfg.bc(), seed)?;
            (AnyPolicy::Bc(p), r)
        }
        Agent::Vinn => {
            let memory = subsampled(dataset, cfg.subsample_period)?;
            let p = VinnPolicy::build(&memory, stats.clone(), encoder.clone(), cfg.vinn_k)?;
            (AnyPolicy::Vinn(p), TrainReport::default())
        }
    })
}

fn subsampled(ds: &Dataset, period: usize) -> Result<Dataset> {
    let trajectories = ds
        .trajectories
        .iter()
        .map(|t| diffclone_core::dataset::subsample(t, period))
        .collect::<diffclone_core::Result<_>>()?;
    Ok(Dataset::new(ds.dims, trajectories)?)
}
