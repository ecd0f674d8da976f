//! Self-checks with pass/fail verdicts, shared by the command line and the
//! acceptance suite.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng as _;

use crate::dataset::{NormStats, TrainingWindow};
use crate::denoiser::{DenoiserConfig, DenoiserNet};
use crate::encoder::{infonce_graph, EncoderConfig, EncoderNet};
use crate::error::{bail, Result};
use crate::gradcheck::{check_params, GradCheckReport};
use crate::nn::Mlp;
use crate::policies::{train_bc, train_diffclone, BcConfig, DiffCloneConfig, Encoder};
use crate::rng;
use crate::schedule::{NoiseSchedule, COSINE_OFFSET};
use crate::tensor::{ParamSet, Scope, Tensor};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// One measured quantity and whether it met its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("<= {limit:e}"),
            pass: value <= limit,
        }
    }

    fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!(">= {limit}"),
            pass: value >= limit,
        }
    }

    fn equals(name: &str, value: f64, want: f64) -> Self {
        Self {
            name: name.into(),
            value,
            bound: format!("== {want}"),
            pass: value == want,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "pass" } else { "FAIL" };
        write!(f, "{verdict} {}={:e} (want {})", self.name, self.value, self.bound)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub name: String,
    pub checks: Vec<Check>,
}

impl Diagnostic {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{}: {c}", self.name)?;
        }
        let verdict = if self.passed() { "pass" } else { "FAIL" };
        write!(f, "{}: {verdict}", self.name)
    }
}

fn uniform(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// The denoiser used for gradient checking: H=4, channels [4, 8], obs_dim 3.
pub fn tiny_denoiser_config() -> DenoiserConfig {
    DenoiserConfig {
        action_dim: 2,
        horizon: 4,
        obs_dim: 3,
        channels: vec![4, 8],
        kernel: 3,
        groups: 2,
        time_embed_dim: 4,
        diffusion_steps: 50,
    }
}

fn denoiser_point(seed: u64) -> Result<GradCheckReport> {
    let cfg = tiny_denoiser_config();
    let mut net = DenoiserNet::build(cfg.clone(), rng::derive_seed(seed, "init"))?;
    let mut r = rng::stream(seed, "data");
    let b = 2;
    let x = Tensor::new([b, cfg.horizon, cfg.action_dim], uniform(&mut r, b * cfg.horizon * cfg.action_dim))?;
    let obs = Tensor::new([b, cfg.obs_dim], uniform(&mut r, b * cfg.obs_dim))?;
    let target = uniform(&mut r, b * cfg.horizon * cfg.action_dim);
    let timesteps: Vec<usize> = (0..b).map(|_| r.random_range(1..=cfg.diffusion_steps)).collect();
    let arch = net.clone();
    check_params(net.params_mut(), GRADCHECK_STEP, |g, ps| {
        let xv = g.input(&x);
        let ov = g.input(&obs);
        let out = arch.forward_graph(g, &Scope::train(ps), xv, &timesteps, ov)?;
        let t = g.constant([b, cfg.horizon, cfg.action_dim], target.clone())?;
        g.mse(out, t)
    })
}

fn bc_point(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng::stream(seed, "init");
    let mut ps = ParamSet::new();
    let net = Mlp::new(&mut ps, "bc", &[3, 8, 8, 2], &mut r)?;
    let mut d = rng::stream(seed, "data");
    let x = Tensor::new([4, 3], uniform(&mut d, 12))?;
    let y = uniform(&mut d, 8);
    check_params(&mut ps, GRADCHECK_STEP, |g, ps| {
        let xv = g.input(&x);
        let out = net.forward(g, &Scope::train(ps), xv)?;
        let t = g.constant([4, 2], y.clone())?;
        g.mse(out, t)
    })
}

fn encoder_point(seed: u64) -> Result<GradCheckReport> {
    let cfg = EncoderConfig {
        raw_dim: 5,
        hidden: 6,
        embed_dim: 4,
    };
    let mut enc = EncoderNet::build(cfg, rng::derive_seed(seed, "init"))?;
    let mut d = rng::stream(seed, "data");
    let a = Tensor::new([3, 5], uniform(&mut d, 15))?;
    let b = Tensor::new([3, 5], uniform(&mut d, 15))?;
    let negatives: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut d, 4)).collect();
    let arch = enc.clone();
    check_params(enc.params_mut(), GRADCHECK_STEP, |g, ps| {
        let s = Scope::train(ps);
        let av = g.input(&a);
        let bv = g.input(&b);
        let q = arch.forward(g, &s, av)?;
        let k = arch.forward(g, &s, bv)?;
        let qn = g.normalize_rows(q)?;
        let kn = g.normalize_rows(k)?;
        infonce_graph(g, qn, kn, &negatives, 0.5)
    })
}

/// Central finite differences against reverse mode for the denoiser, the
/// BC network and the encoder, each at `points` random parameter draws.
pub fn gradcheck(points: usize, seed: u64) -> Result<Diagnostic> {
    if points == 0 {
        bail!(Config, "gradient check needs at least one parameter point");
    }
    type Point = fn(u64) -> Result<GradCheckReport>;
    let nets: [(&str, Point); 3] = [("denoiser", denoiser_point), ("bc", bc_point), ("encoder", encoder_point)];
    let mut checks = Vec::new();
    for (name, point) in nets {
        let mut worst = 0.0f64;
        for p in 0..points {
            let report = point(rng::derive_indexed(seed, name, p as u64))?;
            worst = worst.max(report.max_rel_err);
        }
        checks.push(Check::at_most(&format!("{name}.max_rel_err"), worst, GRADCHECK_TOL));
    }
    Ok(Diagnostic {
        name: "gradcheck".into(),
        checks,
    })
}

/// Cumulative signal level evaluated directly from the cosine profile.
pub fn closed_form_alpha_bar(t: f64, steps: f64) -> f64 {
    let f = |u: f64| ((u / steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * PI / 2.0).cos().powi(2);
    f(t) / f(0.0)
}

/// Endpoint, monotonicity, closed-form and single-step inversion checks.
pub fn schedule(steps: usize) -> Result<Diagnostic> {
    if steps < 2 {
        bail!(Usage, "schedule diagnostic needs T >= 2, got {steps}");
    }
    let s = NoiseSchedule::square_cosine(steps)?;
    let ab = s.alpha_bar();
    let violations = ab.windows(2).filter(|w| !(w[1] < w[0])).count();
    let closed = (ab[steps] - closed_form_alpha_bar(steps as f64, steps as f64)).abs();
    let mut r = rng::from_seed(steps as u64);
    let mut inversion = 0.0f64;
    for _ in 0..100 {
        let x0 = rng::normal_vec(&mut r, 8);
        let eps = rng::normal_vec(&mut r, 8);
        let x1 = s.add_noise(&x0, &eps, 1)?;
        let back = s.ddpm_step(&x1, &eps, 1, &eps)?;
        for (a, b) in back.iter().zip(&x0) {
            inversion = inversion.max((a - b).abs());
        }
    }
    Ok(Diagnostic {
        name: "schedule".into(),
        checks: vec![
            Check::equals("alpha_bar[0]", ab[0], 1.0),
            Check::equals("monotone_violations", violations as f64, 0.0),
            Check::at_most(&format!("alpha_bar[{steps}].closed_form_err"), closed, 1e-12),
            Check::equals("sigma[1]", s.sigma(1), 0.0),
            Check::at_most("t1_inversion_err", inversion, 1e-10),
        ],
    })
}

fn unit_stats(obs_dim: usize, action_dim: usize) -> NormStats {
    NormStats {
        obs_mean: vec![0.0; obs_dim],
        obs_std: vec![1.0; obs_dim],
        act_mean: vec![0.0; action_dim],
        act_std: vec![1.0; action_dim],
        epsilon: 1e-6,
    }
}

/// Small denoiser and training schedule for the synthetic fixtures.
pub fn fixture_config(epochs: usize) -> DiffCloneConfig {
    DiffCloneConfig {
        denoiser: DenoiserConfig {
            channels: vec![16, 32],
            groups: 4,
            time_embed_dim: 16,
            horizon: 4,
            ..DenoiserConfig::default()
        },
        diffusion_steps: 50,
        batch_size: 64,
        learning_rate: 2e-3,
        epochs,
        exec_horizon: 2,
        obs_horizon: 1,
        ema: true,
    }
}

#[derive(Debug, Clone)]
pub struct ConstantActionConfig {
    pub windows: usize,
    pub samples: usize,
    pub tolerance: f64,
    pub min_fraction: f64,
    pub train: DiffCloneConfig,
}

impl Default for ConstantActionConfig {
    fn default() -> Self {
        Self {
            windows: 500,
            samples: 200,
            tolerance: 0.05,
            min_fraction: 0.95,
            train: fixture_config(200),
        }
    }
}

/// Trains on windows whose actions are one constant vector and measures how
/// many sampled first actions land within `tolerance` of it (L∞).
pub fn constant_action(cfg: &ConstantActionConfig, seed: u64) -> Result<Diagnostic> {
    let target = [0.7, -0.4, 0.2];
    let obs_dim = 3;
    let horizon = cfg.train.denoiser.horizon;
    let mut r = rng::stream(seed, "data");
    let windows: Vec<TrainingWindow> = (0..cfg.windows)
        .map(|_| TrainingWindow {
            obs: uniform(&mut r, obs_dim),
            actions: target.repeat(horizon),
            pad_count: 0,
        })
        .collect();
    let (policy, _) = train_diffclone(&windows, unit_stats(obs_dim, target.len()), Encoder::identity(obs_dim), &cfg.train, seed)?;
    let mut close = 0usize;
    for i in 0..cfg.samples {
        let obs = &windows[i % windows.len()].obs;
        let chunk = policy.sample_normalized(obs, 1, rng::derive_indexed(seed, "sample", i as u64))?;
        let first = &chunk[0].data()[..target.len()];
        let err = first.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        close += usize::from(err <= cfg.tolerance);
    }
    Ok(Diagnostic {
        name: "constant_action".into(),
        checks: vec![Check::at_least(
            "fraction_within_tolerance",
            close as f64 / cfg.samples as f64,
            cfg.min_fraction,
        )],
    })
}

#[derive(Debug, Clone)]
pub struct BimodalConfig {
    pub windows: usize,
    pub samples: usize,
    pub radius: f64,
    pub min_mode_fraction: f64,
    pub max_mean_fraction: f64,
    pub train: DiffCloneConfig,
    pub bc: BcConfig,
}

impl Default for BimodalConfig {
    fn default() -> Self {
        Self {
            windows: 400,
            samples: 200,
            radius: 0.2,
            min_mode_fraction: 0.25,
            max_mean_fraction: 0.10,
            train: fixture_config(200),
            bc: BcConfig {
                hidden: vec![32, 32],
                epochs: 100,
                batch_size: 64,
                ..BcConfig::default()
            },
        }
    }
}

/// One observation, actions −1 and +1 in equal numbers. A multimodal
/// learner should sample near both modes and rarely near their mean; a
/// regressor should predict the mean.
pub fn bimodal(cfg: &BimodalConfig, seed: u64) -> Result<Diagnostic> {
    let horizon = cfg.train.denoiser.horizon;
    let obs = vec![0.5];
    let windows: Vec<TrainingWindow> = (0..cfg.windows)
        .map(|i| TrainingWindow {
            obs: obs.clone(),
            actions: vec![if i % 2 == 0 { 1.0 } else { -1.0 }; horizon],
            pad_count: 0,
        })
        .collect();
    let (policy, _) = train_diffclone(&windows, unit_stats(1, 1), Encoder::identity(1), &cfg.train, seed)?;
    let samples = policy.sample_normalized(&obs, cfg.samples, rng::derive_seed(seed, "sample"))?;
    let near = |c: f64| samples.iter().filter(|s| (s.data()[0] - c).abs() <= cfg.radius).count() as f64 / cfg.samples as f64;
    let (plus, minus, mean) = (near(1.0), near(-1.0), near(0.0));

    let (bc, _) = train_bc(&windows, unit_stats(1, 1), Encoder::identity(1), &cfg.bc, seed)?;
    let bc_pred = bc.predict_normalized(&obs)?[0];
    Ok(Diagnostic {
        name: "bimodal".into(),
        checks: vec![
            Check::at_least("diffclone.near_plus_one", plus, cfg.min_mode_fraction),
            Check::at_least("diffclone.near_minus_one", minus, cfg.min_mode_fraction),
            Check::at_most("diffclone.near_zero", mean, cfg.max_mean_fraction),
            Check::at_most("bc.abs_prediction", bc_pred.abs(), cfg.radius),
        ],
    })
}
