//! Agents and the receding-horizon controller that runs them.

mod bc;
mod diffclone;
mod vinn;

pub use bc::{train_bc, BcConfig, BcPolicy};
pub use diffclone::{
    ema_decay, make_noisy_batch, noise_mse, train_denoiser, train_diffclone, DiffCloneConfig, DiffClonePolicy, NoisyBatch,
};
pub use vinn::{vinn_predict, vinn_weights, VinnPolicy};

use crate::checkpoint::Checkpoint;
use crate::dataset::{features, IdentityEncoder, NormStats, ObsEncoder};
use crate::encoder::EncoderNet;
use crate::error::{bail, Result};
use crate::rng;

/// What the agent sees at one step: the raw observation and joint state.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub raw: Vec<f64>,
    pub joint: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn observe(&self) -> Observation;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;
}

pub trait Policy {
    /// How many planned actions run before replanning.
    fn exec_horizon(&self) -> usize;
    /// Plans from the observations seen so far, oldest first.
    fn plan(&self, history: &[Observation], seed: u64) -> Result<Vec<Vec<f64>>>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn exec_horizon(&self) -> usize {
        (**self).exec_horizon()
    }

    fn plan(&self, history: &[Observation], seed: u64) -> Result<Vec<Vec<f64>>> {
        (**self).plan(history, seed)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    /// Observation before each executed action, plus the final one.
    pub observations: Vec<Observation>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub inferences: usize,
    pub done: bool,
}

impl EpisodeTrace {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Plans a chunk, executes up to `exec_horizon` of it, re-observes and
/// repeats until the episode ends or `max_steps` actions have run.
pub fn receding_horizon_rollout<P, E>(policy: &P, env: &mut E, max_steps: usize, seed: u64) -> Result<EpisodeTrace>
where
    P: Policy + ?Sized,
    E: Environment + ?Sized,
{
    let exec = policy.exec_horizon();
    if exec == 0 {
        bail!(Config, "execution horizon must be positive");
    }
    let mut trace = EpisodeTrace {
        observations: vec![env.observe()],
        ..EpisodeTrace::default()
    };
    while trace.steps() < max_steps && !trace.done {
        let chunk = policy.plan(&trace.observations, rng::derive_indexed(seed, "plan", trace.inferences as u64))?;
        trace.inferences += 1;
        if chunk.is_empty() {
            bail!(Usage, "policy returned an empty plan");
        }
        for action in chunk.into_iter().take(exec) {
            let out = env.step(&action)?;
            trace.actions.push(action);
            trace.rewards.push(out.reward);
            trace.observations.push(env.observe());
            trace.done = out.done;
            if out.done || trace.steps() >= max_steps {
                break;
            }
        }
    }
    Ok(trace)
}

/// The observation encoder a policy was trained with.
#[derive(Debug, Clone)]
pub enum Encoder {
    Identity(IdentityEncoder),
    Learned(EncoderNet),
}

impl Encoder {
    pub fn identity(raw_dim: usize) -> Self {
        Self::Identity(IdentityEncoder(raw_dim))
    }

    pub fn as_dyn(&self) -> &dyn ObsEncoder {
        match self {
            Self::Identity(e) => e,
            Self::Learned(e) => e,
        }
    }

    pub(crate) fn write(&self, ck: &mut Checkpoint) {
        match self {
            Self::Identity(e) => {
                ck.set("encoder", "identity");
                ck.set("encoder.raw_dim", e.0);
            }
            Self::Learned(net) => {
                ck.set("encoder", "learned");
                net.write_checkpoint(ck);
            }
        }
    }

    pub(crate) fn read(ck: &Checkpoint) -> Result<Self> {
        match ck.require("encoder")? {
            "identity" => Ok(Self::identity(ck.parse("encoder.raw_dim")?)),
            "learned" => Ok(Self::Learned(EncoderNet::read_checkpoint(ck)?)),
            other => bail!(Format, "unknown encoder kind '{other}'"),
        }
    }
}

impl ObsEncoder for Encoder {
    fn embed_dim(&self) -> usize {
        self.as_dyn().embed_dim()
    }

    fn encode(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.as_dyn().encode(raw)
    }
}

/// Normalized features of the latest `obs_horizon` observations, oldest
/// first, repeating the earliest one when the history is short.
pub fn conditioning(
    history: &[Observation],
    obs_horizon: usize,
    stats: &NormStats,
    enc: &dyn ObsEncoder,
) -> Result<Vec<f64>> {
    if history.is_empty() {
        bail!(Usage, "planning needs at least one observation");
    }
    let n = history.len();
    let mut out = Vec::with_capacity(obs_horizon * stats.obs_dim());
    for back in (0..obs_horizon).rev() {
        let o = &history[n - 1 - back.min(n - 1)];
        let f = features(enc, &o.raw, &o.joint)?;
        if f.len() != stats.obs_dim() {
            bail!(Shape, "observation yields {} features, statistics expect {}", f.len(), stats.obs_dim());
        }
        out.extend(stats.normalize_obs(&f)?);
    }
    Ok(out)
}

/// Any saved agent, dispatched on the checkpoint kind.
#[derive(Debug, Clone)]
pub enum AnyPolicy {
    DiffClone(DiffClonePolicy),
    Bc(BcPolicy),
    Vinn(VinnPolicy),
}

impl AnyPolicy {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        match ck.kind()? {
            diffclone::CHECKPOINT_KIND => Ok(Self::DiffClone(DiffClonePolicy::read_checkpoint(&ck)?)),
            bc::CHECKPOINT_KIND => Ok(Self::Bc(BcPolicy::read_checkpoint(&ck)?)),
            vinn::CHECKPOINT_KIND => Ok(Self::Vinn(VinnPolicy::read_checkpoint(&ck)?)),
            other => bail!(Format, "checkpoint kind '{other}' is not an agent"),
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        match self {
            Self::DiffClone(p) => p.to_checkpoint().save(path),
            Self::Bc(p) => p.to_checkpoint().save(path),
            Self::Vinn(p) => p.to_checkpoint().save(path),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Self::DiffClone(p) => p.stats.action_dim(),
            Self::Bc(p) => p.stats.action_dim(),
            Self::Vinn(p) => p.action_dim(),
        }
    }
}

impl Policy for AnyPolicy {
    fn exec_horizon(&self) -> usize {
        match self {
            Self::DiffClone(p) => p.exec_horizon(),
            Self::Bc(p) => p.exec_horizon(),
            Self::Vinn(p) => p.exec_horizon(),
        }
    }

    fn plan(&self, history: &[Observation], seed: u64) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::DiffClone(p) => p.plan(history, seed),
            Self::Bc(p) => p.plan(history, seed),
            Self::Vinn(p) => p.plan(history, seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Counts steps; terminates after `end` steps if set.
    struct Counter {
        t: usize,
        end: Option<usize>,
    }

    impl Environment for Counter {
        fn observe(&self) -> Observation {
            Observation {
                raw: vec![self.t as f64],
                joint: vec![],
            }
        }

        fn step(&mut self, _: &[f64]) -> Result<StepOutcome> {
            self.t += 1;
            Ok(StepOutcome {
                reward: 1.0,
                done: self.end == Some(self.t),
            })
        }
    }

    /// Emits `[inference index, position in chunk]` for a 16-step chunk.
    struct Chunker;

    impl Policy for Chunker {
        fn exec_horizon(&self) -> usize {
            8
        }

        fn plan(&self, history: &[Observation], _: u64) -> Result<Vec<Vec<f64>>> {
            let t = history.last().unwrap().raw[0];
            Ok((0..16).map(|i| vec![t, i as f64]).collect())
        }
    }

    #[test]
    fn inference_counting() {
        let mut env = Counter { t: 0, end: None };
        let tr = receding_horizon_rollout(&Chunker, &mut env, 24, 0).unwrap();
        assert_eq!(tr.inferences, 3);
        assert_eq!(tr.steps(), 24);
        assert_eq!(tr.observations.len(), 25);

        let mut env = Counter { t: 0, end: Some(3) };
        let tr = receding_horizon_rollout(&Chunker, &mut env, 80, 0).unwrap();
        assert_eq!(tr.inferences, 1);
        assert_eq!(tr.steps(), 3);
        assert!(tr.done);
    }

    #[test]
    fn trace_is_concatenation_of_chunk_prefixes() {
        let mut env = Counter { t: 0, end: None };
        let tr = receding_horizon_rollout(&Chunker, &mut env, 20, 0).unwrap();
        let mut expect = Vec::new();
        for start in [0.0, 8.0, 16.0] {
            let prefix = if start == 16.0 { 4 } else { 8 };
            expect.extend((0..prefix).map(|i| vec![start, i as f64]));
        }
        assert_eq!(tr.actions, expect);
        assert_eq!(tr.total_reward(), 20.0);
    }
}
