use std::time::Instant;

use rand::seq::SliceRandom;

use super::{conditioning, Encoder, Observation, Policy};
use crate::checkpoint::Checkpoint;
use crate::dataset::{NormStats, TrainingWindow};
use crate::error::{bail, Result};
use crate::nn::Mlp;
use crate::report::TrainReport;
use crate::rng;
use crate::tensor::{Adam, Graph, ParamSet, Scope};

pub(super) const CHECKPOINT_KIND: &str = "bc";

#[derive(Debug, Clone, PartialEq)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    /// Actions predicted per query; 1 is plain single-step BC.
    pub bc_horizon: usize,
    pub exec_horizon: usize,
    pub obs_horizon: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            bc_horizon: 1,
            exec_horizon: 1,
            obs_horizon: 1,
            batch_size: 128,
            learning_rate: 1e-3,
            epochs: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BcPolicy {
    pub net: Mlp,
    pub params: ParamSet,
    pub stats: NormStats,
    pub encoder: Encoder,
    pub hidden: Vec<usize>,
    pub bc_horizon: usize,
    pub exec_horizon: usize,
    pub obs_horizon: usize,
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

/// Regresses the first `bc_horizon` window actions on the window observation.
pub fn train_bc(
    windows: &[TrainingWindow],
    stats: NormStats,
    encoder: Encoder,
    cfg: &BcConfig,
    seed: u64,
) -> Result<(BcPolicy, TrainReport)> {
    if windows.is_empty() {
        bail!(Usage, "BC training needs at least one transition");
    }
    if cfg.batch_size == 0 || cfg.bc_horizon == 0 || cfg.obs_horizon == 0 {
        bail!(Config, "batch size and horizons must be positive");
    }
    if cfg.exec_horizon == 0 || cfg.exec_horizon > cfg.bc_horizon {
        bail!(Config, "execution horizon {} must be in 1..={}", cfg.exec_horizon, cfg.bc_horizon);
    }
    let ad = stats.action_dim();
    let din = stats.obs_dim() * cfg.obs_horizon;
    let dout = cfg.bc_horizon * ad;
    for w in windows {
        if w.obs.len() != din || w.actions.len() < dout {
            bail!(
                Config,
                "window has obs {} / actions {}, BC needs {} / at least {}",
                w.obs.len(),
                w.actions.len(),
                din,
                dout
            );
        }
    }
    let mut params = ParamSet::new();
    let mut init = rng::stream(seed, "init");
    let net = Mlp::new(&mut params, "bc", &layer_dims(din, &cfg.hidden, dout), &mut init)?;
    let mut shuffle = rng::stream(seed, "shuffle");
    let mut adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut obs = Vec::with_capacity(b * din);
            let mut act = Vec::with_capacity(b * dout);
            for &i in chunk {
                obs.extend_from_slice(&windows[i].obs);
                act.extend_from_slice(&windows[i].actions[..dout]);
            }
            let mut g = Graph::new();
            let x = g.constant([b, din], obs)?;
            let y = g.constant([b, dout], act)?;
            let pred = net.forward(&mut g, &Scope::train(&params), x)?;
            let loss = g.mse(pred, y)?;
            total += g.value(loss)[0];
            batches += 1;
            g.backward(loss)?.accumulate_into(&mut params);
            adam.step(&mut params)?;
        }
        let mean = total / batches as f64;
        if !mean.is_finite() {
            bail!(Numeric, "training loss became non-finite in epoch {epoch}");
        }
        report.push(epoch, mean, started.elapsed().as_secs_f64());
        log::info!("bc epoch {epoch} loss {mean:.6}");
    }
    let policy = BcPolicy {
        net,
        params,
        stats,
        encoder,
        hidden: cfg.hidden.clone(),
        bc_horizon: cfg.bc_horizon,
        exec_horizon: cfg.exec_horizon,
        obs_horizon: cfg.obs_horizon,
    };
    Ok((policy, report))
}

impl BcPolicy {
    /// Normalized prediction, `bc_horizon * action_dim` values.
    pub fn predict_normalized(&self, cond: &[f64]) -> Result<Vec<f64>> {
        if cond.len() != self.net.in_dim() {
            bail!(Shape, "BC expects {} inputs, got {}", self.net.in_dim(), cond.len());
        }
        self.net.apply(&self.params, 1, cond.to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        let hidden: Vec<String> = self.hidden.iter().map(ToString::to_string).collect();
        ck.set("hidden", hidden.join(","));
        ck.set("bc_horizon", self.bc_horizon);
        ck.set("exec_horizon", self.exec_horizon);
        ck.set("obs_horizon", self.obs_horizon);
        self.encoder.write(&mut ck);
        self.stats.write(&mut ck);
        ck.push_params("bc", &self.params);
        ck
    }

    pub fn read_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let raw = ck.require("hidden")?;
        let hidden = if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(',')
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| crate::Error::Format(format!("bad hidden widths '{raw}'")))?
        };
        let stats = NormStats::read(ck)?;
        let bc_horizon: usize = ck.parse("bc_horizon")?;
        let obs_horizon: usize = ck.parse("obs_horizon")?;
        let mut params = ParamSet::new();
        let dims = layer_dims(stats.obs_dim() * obs_horizon, &hidden, bc_horizon * stats.action_dim());
        let net = Mlp::new(&mut params, "bc", &dims, &mut rng::from_seed(0))?;
        ck.load_params("bc", &mut params)?;
        Ok(Self {
            net,
            params,
            encoder: Encoder::read(ck)?,
            stats,
            hidden,
            bc_horizon,
            exec_horizon: ck.parse("exec_horizon")?,
            obs_horizon,
        })
    }
}

impl Policy for BcPolicy {
    fn exec_horizon(&self) -> usize {
        self.exec_horizon
    }

    fn plan(&self, history: &[Observation], _seed: u64) -> Result<Vec<Vec<f64>>> {
        let cond = conditioning(history, self.obs_horizon, &self.stats, self.encoder.as_dyn())?;
        self.predict_normalized(&cond)?
            .chunks(self.stats.action_dim())
            .map(|z| self.stats.denormalize_action(z))
            .collect()
    }
}
