use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{conditioning, Encoder, Observation, Policy};
use crate::checkpoint::Checkpoint;
use crate::dataset::{NormStats, TrainingWindow};
use crate::denoiser::{DenoiserConfig, DenoiserNet};
use crate::encoder::momentum_update;
use crate::error::{bail, Result};
use crate::report::TrainReport;
use crate::rng::{self, Rng};
use crate::schedule::{noised, sample_chunks, NoiseSchedule};
use crate::tensor::{Adam, Graph, Scope, Tensor};

pub(super) const CHECKPOINT_KIND: &str = "diffclone";

#[derive(Debug, Clone, PartialEq)]
pub struct DiffCloneConfig {
    pub denoiser: DenoiserConfig,
    pub diffusion_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub exec_horizon: usize,
    pub obs_horizon: usize,
    /// Keep an exponential moving average of the weights and use it for
    /// the final network.
    pub ema: bool,
}

impl Default for DiffCloneConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            diffusion_steps: 50,
            batch_size: 128,
            learning_rate: 1e-4,
            epochs: 100,
            exec_horizon: 8,
            obs_horizon: 1,
            ema: true,
        }
    }
}

/// One training batch with its injected noise.
#[derive(Debug, Clone)]
pub struct NoisyBatch {
    /// `[B, H, A]`.
    pub noisy: Tensor,
    pub timesteps: Vec<usize>,
    /// `[B, obs_dim]`.
    pub obs: Tensor,
    /// The noise mixed into `noisy`, same layout.
    pub eps: Vec<f64>,
}

/// Draws `t` uniformly from `1..=T` and fresh Gaussian noise for every
/// selected window, then forms `x_t`.
pub fn make_noisy_batch(
    windows: &[TrainingWindow],
    indices: &[usize],
    horizon: usize,
    sched: &NoiseSchedule,
    r: &mut Rng,
) -> Result<NoisyBatch> {
    let b = indices.len();
    let first = &windows[indices[0]];
    let (per, od) = (first.actions.len(), first.obs.len());
    if per % horizon != 0 {
        bail!(Shape, "window of {per} actions is not a multiple of horizon {horizon}");
    }
    let mut noisy = Vec::with_capacity(b * per);
    let mut eps_all = Vec::with_capacity(b * per);
    let mut obs = Vec::with_capacity(b * od);
    let mut timesteps = Vec::with_capacity(b);
    for &i in indices {
        let w = &windows[i];
        let t = r.random_range(1..=sched.steps());
        let eps = rng::normal_vec(r, per);
        noisy.extend(noised(&w.actions, &eps, sched.alpha_bar()[t]));
        eps_all.extend(eps);
        obs.extend_from_slice(&w.obs);
        timesteps.push(t);
    }
    Ok(NoisyBatch {
        noisy: Tensor::new([b, horizon, per / horizon], noisy)?,
        timesteps,
        obs: Tensor::new([b, od], obs)?,
        eps: eps_all,
    })
}

/// Mean squared error between predicted and injected noise.
pub fn noise_mse(pred: &[f64], batch: &NoisyBatch) -> Result<f64> {
    if pred.len() != batch.eps.len() {
        bail!(Shape, "prediction has {} values, noise {}", pred.len(), batch.eps.len());
    }
    Ok(pred.iter().zip(&batch.eps).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / pred.len() as f64)
}

const EMA_POWER: f64 = 0.75;
const EMA_MAX_DECAY: f64 = 0.9999;

/// Weight-average decay after `step` optimizer steps; starts at 0 so the
/// average tracks the raw weights early on.
pub fn ema_decay(step: usize) -> f64 {
    (1.0 - (1.0 + step as f64).powf(-EMA_POWER)).clamp(0.0, EMA_MAX_DECAY)
}

/// Fits `net` to predict the injected noise; one report row per epoch.
pub fn train_denoiser(
    net: &mut DenoiserNet,
    windows: &[TrainingWindow],
    sched: &NoiseSchedule,
    cfg: &DiffCloneConfig,
    seed: u64,
) -> Result<TrainReport> {
    if windows.is_empty() {
        bail!(Usage, "diffusion training needs at least one window");
    }
    if cfg.batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    let dc = net.config().clone();
    for w in windows {
        if w.obs.len() != dc.obs_dim || w.actions.len() != dc.horizon * dc.action_dim {
            bail!(
                Config,
                "window has obs {} / actions {}, denoiser expects {} / {}x{}",
                w.obs.len(),
                w.actions.len(),
                dc.obs_dim,
                dc.horizon,
                dc.action_dim
            );
        }
    }
    let mut shuffle = rng::stream(seed, "shuffle");
    let mut noise = rng::stream(seed, "noise");
    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut average = cfg.ema.then(|| net.params().clone());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_noisy_batch(windows, chunk, dc.horizon, sched, &mut noise)?;
            let mut g = Graph::new();
            let x = g.input(&batch.noisy);
            let o = g.input(&batch.obs);
            let pred = net.forward_graph(&mut g, &Scope::train(net.params()), x, &batch.timesteps, o)?;
            let target = g.constant(batch.noisy.shape().to_vec(), batch.eps)?;
            let loss = g.mse(pred, target)?;
            total += g.value(loss)[0];
            batches += 1;
            g.backward(loss)?.accumulate_into(net.params_mut());
            adam.step(net.params_mut())?;
            if let Some(avg) = average.as_mut() {
                momentum_update(avg, net.params(), ema_decay(step))?;
            }
            step += 1;
        }
        let mean = total / batches as f64;
        if !mean.is_finite() {
            bail!(Numeric, "training loss became non-finite in epoch {epoch}");
        }
        report.push(epoch, mean, started.elapsed().as_secs_f64());
        log::info!("diffclone epoch {epoch} loss {mean:.6}");
    }
    if let Some(avg) = average {
        net.params_mut().copy_values_from(&avg)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct DiffClonePolicy {
    pub denoiser: DenoiserNet,
    pub schedule: NoiseSchedule,
    pub stats: NormStats,
    pub encoder: Encoder,
    pub exec_horizon: usize,
    pub obs_horizon: usize,
}

/// Builds a fresh denoiser sized from the windows and trains it.
pub fn train_diffclone(
    windows: &[TrainingWindow],
    stats: NormStats,
    encoder: Encoder,
    cfg: &DiffCloneConfig,
    seed: u64,
) -> Result<(DiffClonePolicy, TrainReport)> {
    if windows.is_empty() {
        bail!(Usage, "diffusion training needs at least one window");
    }
    let mut dcfg = cfg.denoiser.clone();
    dcfg.obs_dim = stats.obs_dim() * cfg.obs_horizon;
    dcfg.action_dim = stats.action_dim();
    dcfg.diffusion_steps = cfg.diffusion_steps;
    let mut net = DenoiserNet::build(dcfg, rng::derive_seed(seed, "init"))?;
    let schedule = NoiseSchedule::square_cosine(cfg.diffusion_steps)?;
    let report = train_denoiser(&mut net, windows, &schedule, cfg, seed)?;
    let policy = DiffClonePolicy::new(net, schedule, stats, encoder, cfg.exec_horizon, cfg.obs_horizon)?;
    Ok((policy, report))
}

impl DiffClonePolicy {
    pub fn new(
        denoiser: DenoiserNet,
        schedule: NoiseSchedule,
        stats: NormStats,
        encoder: Encoder,
        exec_horizon: usize,
        obs_horizon: usize,
    ) -> Result<Self> {
        let c = denoiser.config();
        if exec_horizon == 0 || exec_horizon > c.horizon {
            bail!(Config, "execution horizon {exec_horizon} must be in 1..={}", c.horizon);
        }
        if obs_horizon == 0 || stats.obs_dim() * obs_horizon != c.obs_dim {
            bail!(
                Config,
                "{obs_horizon} frames of {} features do not match denoiser obs_dim {}",
                stats.obs_dim(),
                c.obs_dim
            );
        }
        if schedule.steps() != c.diffusion_steps {
            bail!(Config, "schedule has {} steps, denoiser was built for {}", schedule.steps(), c.diffusion_steps);
        }
        if stats.action_dim() != c.action_dim {
            bail!(Config, "statistics have {} action dims, denoiser {}", stats.action_dim(), c.action_dim);
        }
        Ok(Self {
            denoiser,
            schedule,
            stats,
            encoder,
            exec_horizon,
            obs_horizon,
        })
    }

    pub fn horizon(&self) -> usize {
        self.denoiser.config().horizon
    }

    /// `count` windows in normalized action units for a normalized conditioning vector.
    pub fn sample_normalized(&self, cond: &[f64], count: usize, seed: u64) -> Result<Vec<Tensor>> {
        sample_chunks(&self.denoiser, cond, &self.schedule, count, seed)
    }

    /// `H` denormalized actions for the current observation.
    pub fn infer_chunk(&self, raw: &[f64], joint: &[f64], seed: u64) -> Result<Vec<Vec<f64>>> {
        let obs = Observation {
            raw: raw.to_vec(),
            joint: joint.to_vec(),
        };
        self.plan(std::slice::from_ref(&obs), seed)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set("exec_horizon", self.exec_horizon);
        ck.set("obs_horizon", self.obs_horizon);
        self.encoder.write(&mut ck);
        self.stats.write(&mut ck);
        self.denoiser.write_checkpoint(&mut ck, "denoiser");
        ck
    }

    pub fn read_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        Self::new(
            DenoiserNet::read_checkpoint(ck, "denoiser")?,
            NoiseSchedule::square_cosine(ck.parse("diffusion_steps")?)?,
            NormStats::read(ck)?,
            Encoder::read(ck)?,
            ck.parse("exec_horizon")?,
            ck.parse("obs_horizon")?,
        )
    }
}

impl Policy for DiffClonePolicy {
    fn exec_horizon(&self) -> usize {
        self.exec_horizon
    }

    fn plan(&self, history: &[Observation], seed: u64) -> Result<Vec<Vec<f64>>> {
        let cond = conditioning(history, self.obs_horizon, &self.stats, self.encoder.as_dyn())?;
        let window = self.sample_normalized(&cond, 1, seed)?.remove(0);
        window
            .data()
            .chunks(self.stats.action_dim())
            .map(|z| self.stats.denormalize_action(z))
            .collect()
    }
}
