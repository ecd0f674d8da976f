//! Demonstration storage, high-reward filtering, normalization and windowing.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const FORMAT: &str = "diffclone-traj";
pub const NORM_FORMAT: &str = "diffclone-norm";
pub const VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: Vec<f64>,
    pub joint: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub obs_dim: usize,
    pub joint_dim: usize,
    pub action_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    obs_dim: usize,
    joint_dim: usize,
    action_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub trajectories: Vec<Trajectory>,
}

fn corrupt(context: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Corruption {
        context: context.into(),
        detail: detail.into(),
    }
}

impl Dataset {
    pub fn new(dims: Dims, trajectories: Vec<Trajectory>) -> Result<Self> {
        let ds = Self { dims, trajectories };
        for t in &ds.trajectories {
            ds.check(t)?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    fn check(&self, t: &Trajectory) -> Result<()> {
        let ctx = || format!("trajectory '{}'", t.id);
        if t.steps.is_empty() {
            return Err(corrupt(ctx(), "has no steps"));
        }
        let d = &self.dims;
        for (i, s) in t.steps.iter().enumerate() {
            for (field, got, want) in [
                ("obs", s.obs.len(), d.obs_dim),
                ("joint", s.joint.len(), d.joint_dim),
                ("action", s.action.len(), d.action_dim),
            ] {
                if got != want {
                    return Err(corrupt(ctx(), format!("step {i}: {field} has {got} entries, header declares {want}")));
                }
            }
            let finite = s.obs.iter().chain(&s.joint).chain(&s.action).all(|v| v.is_finite());
            if !finite || !s.reward.is_finite() {
                return Err(corrupt(ctx(), format!("step {i} holds a non-finite value")));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            obs_dim: self.dims.obs_dim,
            joint_dim: self.dims.joint_dim,
            action_dim: self.dims.action_dim,
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl std::io::Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let first = match lines.next() {
            Some(line) => line?,
            None => bail!(Format, "empty trajectory file"),
        };
        let header: Header = serde_json::from_str(&first)
            .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
        if header.format != FORMAT {
            bail!(Format, "unexpected format tag '{}'", header.format);
        }
        if header.version != VERSION {
            bail!(Format, "unsupported version {}", header.version);
        }
        let mut ds = Dataset {
            dims: Dims {
                obs_dim: header.obs_dim,
                joint_dim: header.joint_dim,
                action_dim: header.action_dim,
            },
            trajectories: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(&line)
                .map_err(|e| corrupt(format!("record {}", n + 1), e.to_string()))?;
            ds.check(&t)?;
            ds.trajectories.push(t);
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterMode {
    /// Keep trajectories whose total reward is at least the threshold.
    Threshold(f64),
    /// Keep the best `ceil(q * N)`; equal totals are ranked by id.
    TopFraction(f64),
}

/// Number kept by [`FilterMode::TopFraction`]. The small slack keeps
/// products such as `0.3 * 10` from rounding up to the next integer.
pub fn top_fraction_count(q: f64, n: usize) -> usize {
    ((q * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Keeps the high-reward trajectories in their original order.
pub fn filter_high_reward(ds: &Dataset, mode: FilterMode) -> Result<Dataset> {
    if ds.is_empty() {
        bail!(Usage, "cannot filter an empty dataset");
    }
    let totals: Vec<f64> = ds.trajectories.iter().map(Trajectory::total_reward).collect();
    let keep: Vec<bool> = match mode {
        FilterMode::Threshold(tau) => totals.iter().map(|&r| r >= tau).collect(),
        FilterMode::TopFraction(q) => {
            if !(q > 0.0 && q <= 1.0) {
                bail!(Config, "top fraction must be in (0, 1], got {q}");
            }
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.sort_by(|&a, &b| {
                totals[b]
                    .total_cmp(&totals[a])
                    .then_with(|| ds.trajectories[a].id.cmp(&ds.trajectories[b].id))
            });
            let mut keep = vec![false; ds.len()];
            for &i in order.iter().take(top_fraction_count(q, ds.len())) {
                keep[i] = true;
            }
            keep
        }
    };
    let trajectories: Vec<Trajectory> = ds
        .trajectories
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| t.clone())
        .collect();
    if trajectories.is_empty() {
        return Err(Error::EmptySelection(format!("{mode:?} kept none of {} trajectories", ds.len())));
    }
    Ok(Dataset {
        dims: ds.dims,
        trajectories,
    })
}

/// Keeps steps `0, period, 2 * period, ...`.
pub fn subsample(traj: &Trajectory, period: usize) -> Result<Trajectory> {
    if period < 1 {
        bail!(Config, "sub-sampling period must be at least 1");
    }
    Ok(Trajectory {
        id: traj.id.clone(),
        steps: traj.steps.iter().step_by(period).cloned().collect(),
    })
}

/// Maps a raw observation to the features the policy is conditioned on.
pub trait ObsEncoder {
    fn embed_dim(&self) -> usize;
    fn encode(&self, raw: &[f64]) -> Result<Vec<f64>>;
}

/// Passes raw observations through unchanged.
#[derive(Debug, Clone, Copy)]
pub struct IdentityEncoder(pub usize);

impl ObsEncoder for IdentityEncoder {
    fn embed_dim(&self) -> usize {
        self.0
    }

    fn encode(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.0 {
            bail!(Shape, "identity encoder expects {} dims, got {}", self.0, raw.len());
        }
        Ok(raw.to_vec())
    }
}

/// `encode(obs) ⊕ joint` for one step.
pub fn features(enc: &dyn ObsEncoder, obs: &[f64], joint: &[f64]) -> Result<Vec<f64>> {
    let mut f = enc.encode(obs)?;
    f.extend_from_slice(joint);
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub act_mean: Vec<f64>,
    pub act_std: Vec<f64>,
    pub epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct NormFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    stats: NormStats,
}

/// Welford accumulation of per-dimension population moments.
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn finish(self, floor: f64) -> (Vec<f64>, Vec<f64>) {
        let std = self.m2.iter().map(|s| (s / self.n).sqrt().max(floor)).collect();
        (self.mean, std)
    }
}

pub fn compute_norm_stats(ds: &Dataset, enc: &dyn ObsEncoder) -> Result<NormStats> {
    if ds.num_steps() == 0 {
        bail!(Usage, "normalization statistics need at least one step");
    }
    let mut obs = Moments::new(enc.embed_dim() + ds.dims.joint_dim);
    let mut act = Moments::new(ds.dims.action_dim);
    for t in &ds.trajectories {
        for s in &t.steps {
            let f = features(enc, &s.obs, &s.joint)?;
            if f.len() != obs.mean.len() {
                bail!(Config, "encoder produced {} features, expected {}", f.len(), obs.mean.len());
            }
            obs.push(&f);
            act.push(&s.action);
        }
    }
    let (obs_mean, obs_std) = obs.finish(STD_FLOOR);
    let (act_mean, act_std) = act.finish(STD_FLOOR);
    Ok(NormStats {
        obs_mean,
        obs_std,
        act_mean,
        act_std,
        epsilon: STD_FLOOR,
    })
}

pub fn normalize(x: &[f64], mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mean.len() || x.len() != std.len() {
        bail!(Shape, "cannot normalize {} dims with {}-dim statistics", x.len(), mean.len());
    }
    Ok(x.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect())
}

pub fn denormalize(z: &[f64], mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    if z.len() != mean.len() || z.len() != std.len() {
        bail!(Shape, "cannot denormalize {} dims with {}-dim statistics", z.len(), mean.len());
    }
    Ok(z.iter().zip(mean).zip(std).map(|((v, m), s)| v * s + m).collect())
}

impl NormStats {
    pub fn obs_dim(&self) -> usize {
        self.obs_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.act_mean.len()
    }

    pub fn normalize_obs(&self, x: &[f64]) -> Result<Vec<f64>> {
        normalize(x, &self.obs_mean, &self.obs_std)
    }

    pub fn denormalize_obs(&self, z: &[f64]) -> Result<Vec<f64>> {
        denormalize(z, &self.obs_mean, &self.obs_std)
    }

    pub fn normalize_action(&self, a: &[f64]) -> Result<Vec<f64>> {
        normalize(a, &self.act_mean, &self.act_std)
    }

    pub fn denormalize_action(&self, z: &[f64]) -> Result<Vec<f64>> {
        denormalize(z, &self.act_mean, &self.act_std)
    }

    pub fn to_json(&self) -> String {
        let file = NormFile {
            format: NORM_FORMAT.into(),
            version: VERSION,
            stats: self.clone(),
        };
        serde_json::to_string(&file).expect("plain numeric struct serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NormFile =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("unreadable statistics: {e}")))?;
        if file.format != NORM_FORMAT || file.version != VERSION {
            bail!(Format, "unexpected statistics format '{}' v{}", file.format, file.version);
        }
        let s = file.stats;
        if s.obs_mean.len() != s.obs_std.len() || s.act_mean.len() != s.act_std.len() {
            bail!(Format, "statistics mean/std lengths disagree");
        }
        if s.obs_std.iter().chain(&s.act_std).any(|v| !(*v > 0.0)) {
            bail!(Format, "statistics contain a non-positive std");
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub(crate) fn write(&self, ck: &mut crate::checkpoint::Checkpoint) {
        ck.set("norm.epsilon", self.epsilon);
        for (name, v) in [
            ("norm.obs_mean", &self.obs_mean),
            ("norm.obs_std", &self.obs_std),
            ("norm.act_mean", &self.act_mean),
            ("norm.act_std", &self.act_std),
        ] {
            ck.push_array(name, vec![v.len()], v.clone());
        }
    }

    pub(crate) fn read(ck: &crate::checkpoint::Checkpoint) -> Result<Self> {
        let get = |name: &str| ck.array(name).map(|a| a.data.clone());
        Ok(Self {
            obs_mean: get("norm.obs_mean")?,
            obs_std: get("norm.obs_std")?,
            act_mean: get("norm.act_mean")?,
            act_std: get("norm.act_std")?,
            epsilon: ck.parse("norm.epsilon")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    /// Normalized conditioning features, `obs_horizon` frames oldest first.
    pub obs: Vec<f64>,
    /// Normalized actions, `[H, action_dim]` row-major.
    pub actions: Vec<f64>,
    pub pad_count: usize,
}

pub fn make_windows(
    traj: &Trajectory,
    horizon: usize,
    stats: &NormStats,
    enc: &dyn ObsEncoder,
) -> Result<Vec<TrainingWindow>> {
    make_windows_stacked(traj, horizon, 1, stats, enc)
}

/// One window per step. Actions past the end repeat the final action;
/// frames before the start repeat the first observation.
pub fn make_windows_stacked(
    traj: &Trajectory,
    horizon: usize,
    obs_horizon: usize,
    stats: &NormStats,
    enc: &dyn ObsEncoder,
) -> Result<Vec<TrainingWindow>> {
    if horizon < 1 || obs_horizon < 1 {
        bail!(Config, "action and observation horizons must be at least 1");
    }
    let feats: Vec<Vec<f64>> = traj
        .steps
        .iter()
        .map(|s| {
            let f = features(enc, &s.obs, &s.joint)?;
            if f.len() != stats.obs_dim() {
                bail!(
                    Config,
                    "encoder output plus joint state has {} dims, statistics have {}",
                    f.len(),
                    stats.obs_dim()
                );
            }
            stats.normalize_obs(&f)
        })
        .collect::<Result<_>>()?;
    let acts: Vec<Vec<f64>> = traj
        .steps
        .iter()
        .map(|s| stats.normalize_action(&s.action))
        .collect::<Result<_>>()?;
    let n = traj.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut obs = Vec::with_capacity(obs_horizon * stats.obs_dim());
        for back in (0..obs_horizon).rev() {
            obs.extend_from_slice(&feats[i.saturating_sub(back)]);
        }
        let mut actions = Vec::with_capacity(horizon * stats.action_dim());
        for j in i..i + horizon {
            actions.extend_from_slice(&acts[j.min(n - 1)]);
        }
        out.push(TrainingWindow {
            obs,
            actions,
            pad_count: (i + horizon).saturating_sub(n),
        });
    }
    Ok(out)
}

/// Applies sub-sampling and windowing to every trajectory.
pub fn dataset_windows(
    ds: &Dataset,
    horizon: usize,
    obs_horizon: usize,
    period: usize,
    stats: &NormStats,
    enc: &dyn ObsEncoder,
) -> Result<Vec<TrainingWindow>> {
    let mut out = Vec::new();
    for t in &ds.trajectories {
        out.extend(make_windows_stacked(&subsample(t, period)?, horizon, obs_horizon, stats, enc)?);
    }
    Ok(out)
}
