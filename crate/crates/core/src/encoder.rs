//! Small observation encoder with MoCo, BYOL and delta-dynamics pretraining.

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, ObsEncoder};
use crate::error::{bail, Result};
use crate::nn::Mlp;
use crate::report::TrainReport;
use crate::rng::{self, Rng};
use crate::tensor::{Adam, Graph, ParamSet, Scope, Var};

pub const CHECKPOINT_KIND: &str = "encoder";

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub raw_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl EncoderConfig {
    pub fn new(raw_dim: usize) -> Self {
        Self {
            raw_dim,
            hidden: 64,
            embed_dim: 16,
        }
    }

    fn dims(&self) -> [usize; 3] {
        [self.raw_dim, self.hidden, self.embed_dim]
    }
}

#[derive(Debug, Clone)]
pub struct EncoderNet {
    config: EncoderConfig,
    params: ParamSet,
    mlp: Mlp,
}

impl EncoderNet {
    pub fn build(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut r = rng::from_seed(seed);
        let mlp = Mlp::new(&mut params, "encoder", &config.dims(), &mut r)?;
        Ok(Self { config, params, mlp })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Records the encoder on `g`, reading weights through `s`.
    pub fn forward(&self, g: &mut Graph, s: &Scope, x: Var) -> Result<Var> {
        self.mlp.forward(g, s, x)
    }

    pub fn encode_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if let Some(r) = rows.iter().find(|r| r.len() != self.config.raw_dim) {
            bail!(Shape, "encoder expects {} raw dims, got {}", self.config.raw_dim, r.len());
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let flat = rows.concat();
        let out = self.mlp.apply(&self.params, rows.len(), flat)?;
        Ok(out.chunks(self.config.embed_dim).map(<[f64]>::to_vec).collect())
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        ck.set("encoder.raw_dim", self.config.raw_dim);
        ck.set("encoder.hidden", self.config.hidden);
        ck.set("encoder.embed_dim", self.config.embed_dim);
        ck.push_params("encoder", &self.params);
    }

    pub fn read_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = EncoderConfig {
            raw_dim: ck.parse("encoder.raw_dim")?,
            hidden: ck.parse("encoder.hidden")?,
            embed_dim: ck.parse("encoder.embed_dim")?,
        };
        let mut net = Self::build(config, 0)?;
        ck.load_params("encoder", &mut net.params)?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        self.write_checkpoint(&mut ck);
        ck.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        Self::read_checkpoint(&ck)
    }
}

impl ObsEncoder for EncoderNet {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn encode(&self, raw: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_rows(&[raw.to_vec()])?.remove(0))
    }
}

/// Mean InfoNCE over the rows of `q` with positives `k_pos` and a shared
/// set of negatives given as rows of `negatives` (`[K, D]`).
pub fn infonce_graph(g: &mut Graph, q: Var, k_pos: Var, negatives: &[Vec<f64>], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        bail!(Config, "temperature must be positive, got {tau}");
    }
    let rows = g.shape(q)[0];
    let mut logits = g.row_dot(q, k_pos)?;
    if !negatives.is_empty() {
        let d = g.shape(q)[1];
        if let Some(n) = negatives.iter().find(|n| n.len() != d) {
            bail!(Shape, "negative key has {} dims, queries have {d}", n.len());
        }
        let k = negatives.len();
        let mut t = vec![0.0; d * k];
        for (j, n) in negatives.iter().enumerate() {
            for (i, v) in n.iter().enumerate() {
                t[i * k + j] = *v;
            }
        }
        let neg_t = g.constant([d, k], t)?;
        let neg = g.matmul(q, neg_t)?;
        logits = g.cat_cols(logits, neg)?;
    }
    let logits = g.scale(logits, 1.0 / tau)?;
    g.cross_entropy(logits, &vec![0; rows])
}

/// `-log softmax(q·k⁺/τ, q·k⁻ⱼ/τ)[0]` for one query.
pub fn infonce_loss(q: &[f64], k_pos: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if q.len() != k_pos.len() {
        bail!(Shape, "query has {} dims, positive key {}", q.len(), k_pos.len());
    }
    let mut g = Graph::new();
    let qv = g.constant([1, q.len()], q.to_vec())?;
    let kv = g.constant([1, k_pos.len()], k_pos.to_vec())?;
    let l = infonce_graph(&mut g, qv, kv, negatives, tau)?;
    Ok(g.value(l)[0])
}

/// Mean `2 - 2 cos(q_pred, z_target)` over rows; no gradient reaches `z_target`.
pub fn byol_graph(g: &mut Graph, q_pred: Var, z_target: Var) -> Result<Var> {
    let d = g.shape(q_pred)[1];
    for v in [q_pred, z_target] {
        if g.value(v).chunks(d).any(|r| r.iter().all(|x| *x == 0.0)) {
            bail!(Usage, "BYOL loss is undefined for a zero-norm vector");
        }
    }
    let z = g.detach(z_target);
    let qn = g.normalize_rows(q_pred)?;
    let zn = g.normalize_rows(z)?;
    let cos = g.row_dot(qn, zn)?;
    let mean = g.mean(cos)?;
    g.affine(mean, -2.0, 2.0)
}

pub fn byol_loss(q_pred: &[f64], z_target: &[f64]) -> Result<f64> {
    if q_pred.len() != z_target.len() {
        bail!(Shape, "BYOL inputs have {} and {} dims", q_pred.len(), z_target.len());
    }
    let mut g = Graph::new();
    let q = g.constant([1, q_pred.len()], q_pred.to_vec())?;
    let z = g.constant([1, z_target.len()], z_target.to_vec())?;
    let l = byol_graph(&mut g, q, z)?;
    Ok(g.value(l)[0])
}

/// `MSE(head(enc(obs_t1) - enc(obs_t)), state_t1 - state_t)` over a batch.
#[allow(clippy::too_many_arguments)]
pub fn delta_dynamics_graph(
    g: &mut Graph,
    enc: &EncoderNet,
    enc_scope: &Scope,
    head: &Mlp,
    head_scope: &Scope,
    obs_t: Var,
    obs_t1: Var,
    delta_state: Var,
) -> Result<Var> {
    let e0 = enc.forward(g, enc_scope, obs_t)?;
    let e1 = enc.forward(g, enc_scope, obs_t1)?;
    let de = g.sub(e1, e0)?;
    let pred = head.forward(g, head_scope, de)?;
    g.mse(pred, delta_state)
}

pub fn delta_dynamics_loss(
    enc: &EncoderNet,
    head: &Mlp,
    head_params: &ParamSet,
    obs_t: &[f64],
    obs_t1: &[f64],
    state_t: &[f64],
    state_t1: &[f64],
) -> Result<f64> {
    let raw = enc.config.raw_dim;
    if obs_t.len() != raw || obs_t1.len() != raw {
        bail!(Shape, "observations must have {raw} dims");
    }
    if state_t.len() != state_t1.len() || state_t.len() != head.out_dim() {
        bail!(Shape, "state deltas must have {} dims", head.out_dim());
    }
    let mut g = Graph::new();
    let o0 = g.constant([1, raw], obs_t.to_vec())?;
    let o1 = g.constant([1, raw], obs_t1.to_vec())?;
    let ds: Vec<f64> = state_t1.iter().zip(state_t).map(|(a, b)| a - b).collect();
    let dv = g.constant([1, ds.len()], ds)?;
    let l = delta_dynamics_graph(
        &mut g,
        enc,
        &Scope::frozen(&enc.params),
        head,
        &Scope::frozen(head_params),
        o0,
        o1,
        dv,
    )?;
    Ok(g.value(l)[0])
}

/// Momentum (key) encoder and negative-key queue.
#[derive(Debug, Clone)]
pub struct MocoState {
    pub target: ParamSet,
    pub queue: VecDeque<Vec<f64>>,
    pub capacity: usize,
    pub momentum: f64,
    pub temperature: f64,
}

impl MocoState {
    pub fn new(online: &ParamSet) -> Self {
        Self {
            target: online.clone(),
            queue: VecDeque::new(),
            capacity: 256,
            momentum: 0.99,
            temperature: 0.07,
        }
    }

    /// `target ← m·target + (1 − m)·online`.
    pub fn momentum_update(&mut self, online: &ParamSet) -> Result<()> {
        momentum_update(&mut self.target, online, self.momentum)
    }

    pub fn enqueue(&mut self, keys: &[Vec<f64>]) {
        for k in keys {
            self.queue.push_back(k.clone());
        }
        while self.queue.len() > self.capacity {
            self.queue.pop_front();
        }
    }

    pub fn negatives(&self) -> Vec<Vec<f64>> {
        self.queue.iter().cloned().collect()
    }
}

pub fn momentum_update(target: &mut ParamSet, online: &ParamSet, m: f64) -> Result<()> {
    target.check_same_layout(online)?;
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        let src = online.get(id).data().to_vec();
        for (t, o) in target.get_mut(id).data_mut().iter_mut().zip(src) {
            *t = m * *t + (1.0 - m) * o;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Moco,
    Byol,
    Delta,
}

impl std::str::FromStr for Objective {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moco" => Ok(Self::Moco),
            "byol" => Ok(Self::Byol),
            "delta" => Ok(Self::Delta),
            other => bail!(Config, "unknown pretraining objective '{other}' (moco|byol|delta)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub noise_std: f64,
    pub dropout: f64,
    pub queue_size: usize,
    pub momentum: f64,
    pub temperature: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            noise_std: 0.05,
            dropout: 0.1,
            queue_size: 256,
            momentum: 0.99,
            temperature: 0.07,
        }
    }
}

/// Additive Gaussian noise followed by independent coordinate dropout.
pub fn augment(x: &[f64], noise_std: f64, dropout: f64, r: &mut Rng) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let noisy = v + noise_std * rng::normal(r);
            if r.random::<f64>() < dropout {
                0.0
            } else {
                noisy
            }
        })
        .collect()
}

fn augment_batch(rows: &[&Vec<f64>], cfg: &PretrainConfig, r: &mut Rng) -> Vec<f64> {
    rows.iter().flat_map(|x| augment(x, cfg.noise_std, cfg.dropout, r)).collect()
}

/// Trains `enc` in place; returns one record per epoch.
pub fn pretrain(
    enc: &mut EncoderNet,
    ds: &Dataset,
    objective: Objective,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if ds.num_steps() == 0 {
        bail!(Usage, "pretraining needs a nonempty dataset");
    }
    if ds.dims.obs_dim != enc.config.raw_dim {
        bail!(Shape, "dataset has {} raw dims, encoder expects {}", ds.dims.obs_dim, enc.config.raw_dim);
    }
    if cfg.batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    let mut shuffle = rng::stream(seed, "shuffle");
    let mut aug = rng::stream(seed, "augment");
    let mut init = rng::stream(seed, "init");
    let raw = enc.config.raw_dim;
    let embed = enc.config.embed_dim;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut head_adam = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();

    let observations: Vec<&Vec<f64>> = ds.trajectories.iter().flat_map(|t| t.steps.iter().map(|s| &s.obs)).collect();
    let pairs: Vec<(usize, usize, usize)> = ds
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (1..t.len()).map(move |i| (ti, i - 1, i)))
        .collect();
    if objective == Objective::Delta && pairs.is_empty() {
        bail!(Usage, "delta-dynamics pretraining needs trajectories with at least two steps");
    }

    let mut moco = MocoState::new(&enc.params);
    moco.capacity = cfg.queue_size;
    moco.momentum = cfg.momentum;
    moco.temperature = cfg.temperature;
    let mut head_params = ParamSet::new();
    let head = match objective {
        Objective::Moco => None,
        Objective::Byol => Some(Mlp::new(&mut head_params, "predictor", &[embed, enc.config.hidden, embed], &mut init)?),
        Objective::Delta => Some(Mlp::new(
            &mut head_params,
            "delta_head",
            &[embed, enc.config.hidden, ds.dims.joint_dim],
            &mut init,
        )?),
    };

    let n_items = if objective == Objective::Delta { pairs.len() } else { observations.len() };
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut shuffle);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut g = Graph::new();
            let loss = match objective {
                Objective::Moco | Objective::Byol => {
                    let rows: Vec<&Vec<f64>> = chunk.iter().map(|&i| observations[i]).collect();
                    let v1 = g.constant([b, raw], augment_batch(&rows, cfg, &mut aug))?;
                    let v2 = g.constant([b, raw], augment_batch(&rows, cfg, &mut aug))?;
                    let q = enc.forward(&mut g, &Scope::train(&enc.params), v1)?;
                    let k = enc.forward(&mut g, &Scope::frozen(&moco.target), v2)?;
                    if objective == Objective::Moco {
                        let qn = g.normalize_rows(q)?;
                        let kn = g.normalize_rows(k)?;
                        let negatives = moco.negatives();
                        let loss = infonce_graph(&mut g, qn, kn, &negatives, moco.temperature)?;
                        let keys: Vec<Vec<f64>> = g.value(kn).chunks(embed).map(<[f64]>::to_vec).collect();
                        moco.enqueue(&keys);
                        loss
                    } else {
                        let head = head.as_ref().expect("byol predictor");
                        let p = head.forward(&mut g, &Scope::train(&head_params), q)?;
                        byol_graph(&mut g, p, k)?
                    }
                }
                Objective::Delta => {
                    let mut o0 = Vec::with_capacity(b);
                    let mut o1 = Vec::with_capacity(b);
                    let mut dstate = Vec::with_capacity(b * ds.dims.joint_dim);
                    for &i in chunk {
                        let (ti, a, c) = pairs[i];
                        let t = &ds.trajectories[ti];
                        o0.push(&t.steps[a].obs);
                        o1.push(&t.steps[c].obs);
                        dstate.extend(t.steps[c].joint.iter().zip(&t.steps[a].joint).map(|(x, y)| x - y));
                    }
                    let v0 = g.constant([b, raw], augment_batch(&o0, cfg, &mut aug))?;
                    let v1 = g.constant([b, raw], augment_batch(&o1, cfg, &mut aug))?;
                    let dv = g.constant([b, ds.dims.joint_dim], dstate)?;
                    let head = head.as_ref().expect("delta head");
                    delta_dynamics_graph(
                        &mut g,
                        enc,
                        &Scope::train(&enc.params),
                        head,
                        &Scope::train(&head_params),
                        v0,
                        v1,
                        dv,
                    )?
                }
            };
            total += g.value(loss)[0];
            batches += 1;
            let grads = g.backward(loss)?;
            grads.accumulate_into(&mut enc.params);
            adam.step(&mut enc.params)?;
            if head.is_some() {
                grads.accumulate_into(&mut head_params);
                head_adam.step(&mut head_params)?;
            }
            if objective != Objective::Delta {
                moco.momentum_update(&enc.params)?;
            }
        }
        report.push(epoch, total / batches as f64, started.elapsed().as_secs_f64());
        log::info!("pretrain epoch {epoch} loss {:.5}", total / batches as f64);
    }
    Ok(report)
}
