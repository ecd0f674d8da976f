//! Two-dimensional pouring toy: carry a cup of particles around a wall and
//! tip them into a target.
//!
//! The gripper starts near the source on the left. A vertical wall at
//! `x = 0` blocks the direct path, so the scripted expert detours either
//! above or below it. Tilting past the pour threshold releases one particle
//! per step, delivered if the gripper is within the target radius and
//! spilled otherwise.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;

use crate::dataset::{Dataset, Dims, Step, Trajectory};
use crate::error::{bail, Result};
use crate::policies::{receding_horizon_rollout, Environment, Observation, Policy, StepOutcome};
use crate::rng::{self, Rng};

pub const RAW_OBS_DIM: usize = 7;
pub const JOINT_DIM: usize = 3;
/// Axes the environment reads from an action: dx, dy, dθ.
pub const CONTROL_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub arena: f64,
    pub wall_x: f64,
    pub wall_half_height: f64,
    pub source: (f64, f64),
    pub source_jitter: f64,
    pub target: (f64, f64),
    pub target_radius: f64,
    pub particles: usize,
    pub max_steps: usize,
    /// Width of recorded actions; axes past the first three are inert.
    pub action_dim: usize,
    pub action_limit: f64,
    pub pour_threshold: f64,
    pub success_fraction: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            arena: 1.0,
            wall_x: 0.0,
            wall_half_height: 0.3,
            source: (-0.8, 0.0),
            source_jitter: 0.05,
            target: (0.8, 0.0),
            target_radius: 0.12,
            particles: 10,
            max_steps: 80,
            action_dim: 3,
            action_limit: 0.08,
            pour_threshold: 1.0,
            success_fraction: 0.9,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let inside = |(x, y): (f64, f64)| x.abs() <= self.arena && y.abs() <= self.arena;
        if !inside(self.source) || !inside(self.target) {
            bail!(Config, "source and target must lie inside the arena");
        }
        if self.particles < 1 {
            bail!(Config, "at least one particle is required");
        }
        if self.action_dim < CONTROL_DIM {
            bail!(Config, "action_dim must be at least {CONTROL_DIM}, got {}", self.action_dim);
        }
        if self.max_steps < 1 || self.action_limit <= 0.0 {
            bail!(Config, "max_steps and action_limit must be positive");
        }
        Ok(())
    }

    /// Delivered particles needed for a success.
    pub fn success_threshold(&self) -> f64 {
        self.success_fraction * self.particles as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub remaining: usize,
    pub delivered: usize,
    pub spilled: usize,
    pub step_index: usize,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct PourEnv {
    pub config: EnvConfig,
    pub state: EnvState,
}

/// Whether the segment `a → b` touches the wall `{wall_x} × [-h, h]`.
fn crosses_wall(a: (f64, f64), b: (f64, f64), wall_x: f64, h: f64) -> bool {
    let (da, db) = (a.0 - wall_x, b.0 - wall_x);
    if (da < 0.0 && db < 0.0) || (da > 0.0 && db > 0.0) {
        return false;
    }
    if da == db {
        let (lo, hi) = (a.1.min(b.1), a.1.max(b.1));
        return hi >= -h && lo <= h;
    }
    let s = da / (da - db);
    let yc = a.1 + s * (b.1 - a.1);
    yc.abs() <= h
}

impl PourEnv {
    pub fn reset(config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::from_seed(seed);
        let jitter = if config.source_jitter > 0.0 {
            r.random_range(-config.source_jitter..=config.source_jitter)
        } else {
            0.0
        };
        let state = EnvState {
            x: config.source.0,
            y: config.source.1 + jitter,
            theta: 0.0,
            remaining: config.particles,
            delivered: 0,
            spilled: 0,
            step_index: 0,
            done: false,
        };
        Ok(Self { config, state })
    }

    pub fn observation(&self) -> Observation {
        let s = &self.state;
        let c = &self.config;
        Observation {
            raw: vec![
                s.x,
                s.y,
                s.theta.sin(),
                s.theta.cos(),
                s.remaining as f64 / c.particles as f64,
                c.target.0 - s.x,
                c.target.1 - s.y,
            ],
            joint: vec![s.x, s.y, s.theta],
        }
    }

    fn blocked(&self, from: (f64, f64), to: (f64, f64)) -> bool {
        crosses_wall(from, to, self.config.wall_x, self.config.wall_half_height)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.state.done {
            bail!(Usage, "episode already finished");
        }
        if action.len() < CONTROL_DIM {
            bail!(Shape, "action needs at least {CONTROL_DIM} entries, got {}", action.len());
        }
        if action.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "action contains a non-finite value");
        }
        let c = &self.config;
        let lim = c.action_limit;
        let (dx, dy, dth) = (
            action[0].clamp(-lim, lim),
            action[1].clamp(-lim, lim),
            action[2].clamp(-lim, lim),
        );
        let from = (self.state.x, self.state.y);
        let nx = (from.0 + dx).clamp(-c.arena, c.arena);
        let ny = (from.1 + dy).clamp(-c.arena, c.arena);
        let to = [(nx, ny), (from.0, ny), (nx, from.1), from]
            .into_iter()
            .find(|&p| p == from || !self.blocked(from, p))
            .expect("staying put is always allowed");
        let s = &mut self.state;
        (s.x, s.y) = to;
        s.theta = (s.theta + dth).clamp(-FRAC_PI_2, FRAC_PI_2);

        let mut reward = 0.0;
        if s.theta.abs() >= c.pour_threshold && s.remaining > 0 {
            s.remaining -= 1;
            let dist = ((s.x - c.target.0).powi(2) + (s.y - c.target.1).powi(2)).sqrt();
            if dist <= c.target_radius {
                s.delivered += 1;
                reward = 1.0;
            } else {
                s.spilled += 1;
            }
        }
        s.step_index += 1;
        s.done = s.remaining == 0 || s.step_index >= c.max_steps;
        Ok(StepOutcome { reward, done: s.done })
    }

    pub fn success(&self) -> bool {
        self.state.delivered as f64 >= self.config.success_threshold()
    }
}

impl Environment for PourEnv {
    fn observe(&self) -> Observation {
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        PourEnv::step(self, action)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Detour above the wall.
    Left,
    /// Detour below the wall.
    Right,
}

/// Distance from the target at which the expert stops and pours.
const POUR_RADIUS: f64 = 0.08;
const POUR_TILT: f64 = 1.2;
const TILT_LATCH: f64 = 0.2;
const DETOUR_Y: f64 = 0.55;

/// Noise-free expert action for an observation, padded to `action_dim`.
pub fn expert_action(cfg: &EnvConfig, obs: &Observation, mode: Mode) -> Vec<f64> {
    let (x, y, theta) = (obs.joint[0], obs.joint[1], obs.joint[2]);
    let started = obs.raw[4] < 1.0;
    let (tx, ty) = cfg.target;
    let dist = ((tx - x).powi(2) + (ty - y).powi(2)).sqrt();
    // Once tilting has begun inside the cup, keep going rather than reset.
    let near = dist <= POUR_RADIUS || (theta >= TILT_LATCH && dist <= cfg.target_radius);
    let lim = cfg.action_limit;
    let toward = |gx: f64, gy: f64| ((gx - x).clamp(-lim, lim), (gy - y).clamp(-lim, lim));
    let (dx, dy, dth) = if started || near {
        let (dx, dy) = toward(tx, ty);
        (dx, dy, (POUR_TILT - theta).clamp(-lim, lim))
    } else if x < cfg.wall_x {
        let wy = match mode {
            Mode::Left => DETOUR_Y,
            Mode::Right => -DETOUR_Y,
        };
        let (dx, dy) = toward(cfg.wall_x, wy);
        (dx, dy, (-theta).clamp(-lim, lim))
    } else {
        let (dx, dy) = toward(tx, ty);
        (dx, dy, (-theta).clamp(-lim, lim))
    };
    let mut a = vec![0.0; cfg.action_dim];
    a[..CONTROL_DIM].copy_from_slice(&[dx, dy, dth]);
    a
}

/// Expert action with additive Gaussian noise on the control axes, clipped.
pub fn scripted_expert(cfg: &EnvConfig, obs: &Observation, mode: Mode, noise_scale: f64, r: &mut Rng) -> Vec<f64> {
    let mut a = expert_action(cfg, obs, mode);
    if noise_scale > 0.0 {
        for v in &mut a[..CONTROL_DIM] {
            *v = (*v + noise_scale * rng::normal(r)).clamp(-cfg.action_limit, cfg.action_limit);
        }
    }
    a
}

/// The scripted expert as a closed-loop policy. Without a fixed mode it
/// detours on the side of the wall it currently sits on.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    pub config: EnvConfig,
    pub mode: Option<Mode>,
    pub noise_scale: f64,
}

impl Policy for ExpertPolicy {
    fn exec_horizon(&self) -> usize {
        1
    }

    fn plan(&self, history: &[Observation], seed: u64) -> Result<Vec<Vec<f64>>> {
        let obs = history.last().ok_or_else(|| crate::Error::Usage("no observation".into()))?;
        let mode = self
            .mode
            .unwrap_or(if obs.joint[1] >= 0.0 { Mode::Left } else { Mode::Right });
        let mut r = rng::from_seed(seed);
        Ok(vec![scripted_expert(&self.config, obs, mode, self.noise_scale, &mut r)])
    }
}

/// Runs the expert once and records every step.
pub fn expert_episode(cfg: &EnvConfig, mode: Mode, noise_scale: f64, env_seed: u64, noise_seed: u64, id: String) -> Result<Trajectory> {
    let mut env = PourEnv::reset(cfg.clone(), env_seed)?;
    let mut r = rng::from_seed(noise_seed);
    let mut steps = Vec::new();
    while !env.state.done {
        let obs = env.observation();
        let action = scripted_expert(cfg, &obs, mode, noise_scale, &mut r);
        let out = env.step(&action)?;
        steps.push(Step {
            obs: obs.raw,
            joint: obs.joint,
            action,
            reward: out.reward,
        });
    }
    Ok(Trajectory { id, steps })
}

/// `n_episodes` demonstrations, alternating detour side and cycling
/// through `noise_levels`.
pub fn generate_dataset(cfg: &EnvConfig, n_episodes: usize, noise_levels: &[f64], seed: u64) -> Result<Dataset> {
    if n_episodes < 1 {
        bail!(Config, "at least one episode is required");
    }
    if noise_levels.is_empty() || noise_levels.iter().any(|n| !(*n >= 0.0)) {
        bail!(Config, "noise levels must be a nonempty list of non-negative values");
    }
    cfg.validate()?;
    let mut trajectories = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let mode = if i % 2 == 0 { Mode::Left } else { Mode::Right };
        let noise = noise_levels[i % noise_levels.len()];
        trajectories.push(expert_episode(
            cfg,
            mode,
            noise,
            rng::derive_indexed(seed, "env", i as u64),
            rng::derive_indexed(seed, "noise", i as u64),
            format!("ep{i:05}"),
        )?);
    }
    Dataset::new(
        Dims {
            obs_dim: RAW_OBS_DIM,
            joint_dim: JOINT_DIM,
            action_dim: cfg.action_dim,
        },
        trajectories,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode: usize,
    pub reward: f64,
    pub success: bool,
    pub steps: usize,
    pub inferences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean_reward: f64,
    /// Percentage of successful episodes.
    pub success_rate: f64,
    pub episodes: Vec<EpisodeResult>,
}

impl EvalSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,reward,success,steps\n");
        for e in &self.episodes {
            writeln!(out, "{},{},{},{}", e.episode, e.reward, u8::from(e.success), e.steps).expect("writing to a String");
        }
        out
    }
}

pub fn run_episode<P: Policy + ?Sized>(policy: &P, cfg: &EnvConfig, episode: usize, seed: u64) -> Result<EpisodeResult> {
    let mut env = PourEnv::reset(cfg.clone(), rng::derive_indexed(seed, "env", episode as u64))?;
    let trace = receding_horizon_rollout(policy, &mut env, cfg.max_steps, rng::derive_indexed(seed, "eval", episode as u64))?;
    Ok(EpisodeResult {
        episode,
        reward: trace.total_reward(),
        success: env.success(),
        steps: trace.steps(),
        inferences: trace.inferences,
    })
}

/// Runs `n_episodes` rollouts, on up to `jobs` threads.
pub fn evaluate<P: Policy + Sync + ?Sized>(
    policy: &P,
    cfg: &EnvConfig,
    n_episodes: usize,
    seed: u64,
    jobs: usize,
) -> Result<EvalSummary> {
    if n_episodes < 1 {
        bail!(Config, "at least one evaluation episode is required");
    }
    let episodes: Vec<EpisodeResult> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| crate::Error::Config(format!("cannot start {jobs} workers: {e}")))?;
        pool.install(|| {
            (0..n_episodes)
                .into_par_iter()
                .map(|i| run_episode(policy, cfg, i, seed))
                .collect::<Result<_>>()
        })?
    } else {
        (0..n_episodes)
            .map(|i| run_episode(policy, cfg, i, seed))
            .collect::<Result<_>>()?
    };
    let n = episodes.len() as f64;
    let mean_reward = episodes.iter().map(|e| e.reward).sum::<f64>() / n;
    let successes = episodes.iter().filter(|e| e.success).count();
    Ok(EvalSummary {
        mean_reward,
        success_rate: successes as f64 / n * 100.0,
        episodes,
    })
}
