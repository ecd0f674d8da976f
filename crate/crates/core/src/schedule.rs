//! Square-cosine DDPM noise schedule, forward noising and the ancestral
//! reverse step.
//!
//! Timesteps run `1..=T`; `t = 0` is clean data. All tables are indexed by
//! timestep directly, with index 0 of `beta`/`sigma` unused.

use crate::error::{bail, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Offset that keeps the first noise levels away from zero.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
/// Per-coordinate bound applied after every reverse step (normalized units).
pub const SAMPLE_CLAMP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    sigma: Vec<f64>,
}

fn cosine_profile(t: f64, steps: f64) -> f64 {
    let phase = (t / steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    phase.cos().powi(2)
}

impl NoiseSchedule {
    /// Builds the schedule `alpha_bar[t] = f(t) / f(0)` with
    /// `f(t) = cos²(((t/T + s) / (1 + s)) · π/2)`.
    pub fn square_cosine(steps: usize) -> Result<Self> {
        if steps < 1 {
            bail!(Config, "the schedule needs at least one timestep");
        }
        let t_max = steps as f64;
        let f0 = cosine_profile(0.0, t_max);
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|t| if t == 0 { 1.0 } else { cosine_profile(t as f64, t_max) / f0 })
            .collect();
        let mut beta = vec![0.0; steps + 1];
        let mut sigma = vec![0.0; steps + 1];
        for t in 1..=steps {
            beta[t] = (1.0 - alpha_bar[t] / alpha_bar[t - 1]).clamp(f64::MIN_POSITIVE, MAX_BETA);
            if t >= 2 {
                let var = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
                sigma[t] = var.sqrt();
            }
        }
        Ok(Self {
            steps,
            alpha_bar,
            beta,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `alpha_bar[0..=T]`.
    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            bail!(Usage, "timestep {t} outside 1..={}", self.steps);
        }
        Ok(())
    }

    /// `sqrt(alpha_bar[t]) · x0 + sqrt(1 - alpha_bar[t]) · eps`.
    pub fn add_noise(&self, x0: &[f64], eps: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            bail!(Shape, "clean sample has {} values, noise {}", x0.len(), eps.len());
        }
        Ok(noised(x0, eps, self.alpha_bar[t]))
    }

    /// One ancestral step from `t` to `t - 1`, clamped to `±SAMPLE_CLAMP`.
    pub fn ddpm_step(&self, xt: &[f64], eps_hat: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if xt.len() != eps_hat.len() || xt.len() != noise.len() {
            bail!(
                Shape,
                "ddpm_step operands have lengths {}, {}, {}",
                xt.len(),
                eps_hat.len(),
                noise.len()
            );
        }
        let beta = self.beta[t];
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let eps_coef = beta / (1.0 - self.alpha_bar[t]).sqrt();
        let sigma = self.sigma[t];
        Ok(xt
            .iter()
            .zip(eps_hat)
            .zip(noise)
            .map(|((&x, &e), &z)| {
                let mean = inv_sqrt_alpha * (x - eps_coef * e);
                clamp_sample(mean + sigma * z)
            })
            .collect())
    }
}

pub(crate) fn noised(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

pub fn clamp_sample(v: f64) -> f64 {
    v.clamp(-SAMPLE_CLAMP, SAMPLE_CLAMP)
}

/// Anything that predicts the noise in a batch of noisy action windows.
pub trait NoisePredictor {
    /// `(horizon, action_dim)` of one window.
    fn window(&self) -> (usize, usize);
    fn obs_dim(&self) -> usize;
    /// `noisy` is `[B, H, A]`, `obs` is `[B, obs_dim]`, one timestep per row.
    fn predict(&self, noisy: &Tensor, timesteps: &[usize], obs: &Tensor) -> Result<Tensor>;
}

/// Draws `count` action windows for one observation by running the reverse
/// chain from pure noise. Deterministic given `seed`.
pub fn sample_chunks<P: NoisePredictor + ?Sized>(
    predictor: &P,
    obs: &[f64],
    sched: &NoiseSchedule,
    count: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let (h, a) = predictor.window();
    if obs.len() != predictor.obs_dim() {
        bail!(
            Config,
            "observation has {} dims, predictor expects {}",
            obs.len(),
            predictor.obs_dim()
        );
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut rng: Rng = rng::from_seed(seed);
    let n = count * h * a;
    let mut x = rng::normal_vec(&mut rng, n);
    let obs_batch = Tensor::new([count, obs.len()], obs.repeat(count))?;
    for t in (1..=sched.steps()).rev() {
        let noisy = Tensor::new([count, h, a], x)?;
        let eps_hat = predictor.predict(&noisy, &vec![t; count], &obs_batch)?;
        if eps_hat.shape() != [count, h, a] {
            bail!(
                Config,
                "predictor returned {:?}, expected {:?}",
                eps_hat.shape(),
                [count, h, a]
            );
        }
        let z = rng::normal_vec(&mut rng, n);
        x = sched.ddpm_step(noisy.data(), eps_hat.data(), t, &z)?;
    }
    x.chunks(h * a)
        .map(|c| Tensor::new([h, a], c.to_vec()))
        .collect()
}

/// A single `[H, action_dim]` window.
pub fn sample_chunk<P: NoisePredictor + ?Sized>(
    predictor: &P,
    obs: &[f64],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    Ok(sample_chunks(predictor, obs, sched, 1, seed)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Independent closed-form evaluation of the cumulative product.
    fn closed_form_alpha_bar(t: f64, steps: f64) -> f64 {
        let f = |u: f64| ((u / steps + 0.008) / 1.008 * PI / 2.0).cos().powi(2);
        f(t) / f(0.0)
    }

    #[test]
    fn endpoints_and_monotonicity_at_50() {
        let s = NoiseSchedule::square_cosine(50).unwrap();
        assert_eq!(s.alpha_bar()[0], 1.0);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        let want = closed_form_alpha_bar(50.0, 50.0);
        assert!((s.alpha_bar()[50] - want).abs() <= 1e-12);
        assert!(s.alpha_bar()[50] > 0.0);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn zero_timesteps_rejected() {
        assert!(matches!(NoiseSchedule::square_cosine(0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn add_noise_extremes() {
        let s = NoiseSchedule::square_cosine(10).unwrap();
        let x0 = [0.3, -1.2];
        let eps = [1.5, 0.25];
        assert_eq!(noised(&x0, &eps, 1.0), x0.to_vec());
        assert_eq!(noised(&x0, &eps, 0.0), eps.to_vec());
        assert!(matches!(s.add_noise(&x0, &eps, 0), Err(crate::Error::Usage(_))));
        assert!(matches!(s.add_noise(&x0, &eps, 11), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn add_noise_matches_formula() {
        let s = NoiseSchedule::square_cosine(50).unwrap();
        let mut rng = rng::from_seed(2);
        for t in 1..=50 {
            let x0 = rng::normal_vec(&mut rng, 6);
            let eps = rng::normal_vec(&mut rng, 6);
            let got = s.add_noise(&x0, &eps, t).unwrap();
            let ab = closed_form_alpha_bar(t as f64, 50.0);
            for i in 0..6 {
                let want = ab.sqrt() * x0[i] + (1.0 - ab).sqrt() * eps[i];
                assert!((got[i] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ddpm_step_zero_inputs_and_first_step_ignores_noise() {
        let s = NoiseSchedule::square_cosine(50).unwrap();
        let out = s.ddpm_step(&[0.0; 4], &[0.0; 4], 30, &[0.0; 4]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        let xt = [0.4, -0.2];
        let eh = [0.1, 0.9];
        let a = s.ddpm_step(&xt, &eh, 1, &[3.0, -2.0]).unwrap();
        let b = s.ddpm_step(&xt, &eh, 1, &[-1.0, 7.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_chain_inverts_exactly() {
        let s = NoiseSchedule::square_cosine(1).unwrap();
        // With T = 1, alpha_bar[1] is cos²(π/2) up to round-off, so beta hits
        // the clip. The inversion identity holds for the unclipped t = 1 of
        // longer schedules, checked below.
        assert_eq!(s.beta(1), MAX_BETA);
        let s50 = NoiseSchedule::square_cosine(50).unwrap();
        let mut rng = rng::from_seed(5);
        for _ in 0..50 {
            let x0 = rng::normal_vec(&mut rng, 8);
            let eps = rng::normal_vec(&mut rng, 8);
            let x1 = s50.add_noise(&x0, &eps, 1).unwrap();
            let back = s50.ddpm_step(&x1, &eps, 1, &eps).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn reverse_step_with_true_noise_is_posterior_mean() {
        // With eps_hat equal to the injected noise the deterministic part of
        // the step is the Gaussian posterior mean of x_{t-1} given (x_t, x0).
        let s = NoiseSchedule::square_cosine(50).unwrap();
        let ab = s.alpha_bar();
        let mut rng = rng::from_seed(6);
        for t in 2..=49 {
            let x0 = [rng::normal(&mut rng) * 0.5];
            let eps = [rng::normal(&mut rng)];
            let xt = s.add_noise(&x0, &eps, t).unwrap();
            let got = s.ddpm_step(&xt, &eps, t, &[0.0]).unwrap()[0];
            let beta = 1.0 - ab[t] / ab[t - 1];
            let c0 = ab[t - 1].sqrt() * beta / (1.0 - ab[t]);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab[t - 1]) / (1.0 - ab[t]);
            let want = c0 * x0[0] + ct * xt[0];
            assert!((got - want).abs() <= 1e-9, "t={t}: {got} vs {want}");
        }
    }

    struct ZeroPredictor;
    impl NoisePredictor for ZeroPredictor {
        fn window(&self) -> (usize, usize) {
            (4, 2)
        }
        fn obs_dim(&self) -> usize {
            3
        }
        fn predict(&self, noisy: &Tensor, _: &[usize], _: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(noisy.shape().to_vec()))
        }
    }

    #[test]
    fn sample_chunk_shape_and_determinism() {
        let s = NoiseSchedule::square_cosine(5).unwrap();
        let a = sample_chunk(&ZeroPredictor, &[0.0; 3], &s, 9).unwrap();
        let b = sample_chunk(&ZeroPredictor, &[0.0; 3], &s, 9).unwrap();
        assert_eq!(a.shape(), &[4, 2]);
        assert_eq!(a, b);
        assert!(sample_chunk(&ZeroPredictor, &[0.0; 2], &s, 9).is_err());
    }

    #[test]
    fn zero_predictor_single_step_rescales_initial_draw() {
        let s = NoiseSchedule::square_cosine(1).unwrap();
        let got = sample_chunk(&ZeroPredictor, &[0.0; 3], &s, 4).unwrap();
        let mut rng = rng::from_seed(4);
        let init = rng::normal_vec(&mut rng, 8);
        let scale = 1.0 / (1.0 - s.beta(1)).sqrt();
        for (g, x) in got.data().iter().zip(init) {
            assert_eq!(*g, clamp_sample(scale * x));
        }
    }

    proptest! {
        #[test]
        fn schedule_invariants_hold(steps in 1usize..=200) {
            let s = NoiseSchedule::square_cosine(steps).unwrap();
            let ab = s.alpha_bar();
            prop_assert_eq!(ab[0], 1.0);
            prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
            prop_assert!(ab[steps] > 0.0);
            prop_assert_eq!(s.sigma(1), 0.0);
            for t in 1..=steps {
                let raw = 1.0 - ab[t] / ab[t - 1];
                prop_assert!(s.beta(t) > 0.0 && s.beta(t) <= MAX_BETA);
                prop_assert_eq!(s.beta(t), raw.min(MAX_BETA));
                if t >= 2 {
                    let var = s.beta(t) * (1.0 - ab[t - 1]) / (1.0 - ab[t]);
                    prop_assert!((s.sigma(t).powi(2) - var).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn clamp_is_idempotent(v in -50.0f64..50.0) {
            let c = clamp_sample(v);
            prop_assert_eq!(clamp_sample(c), c);
            if v.abs() <= SAMPLE_CLAMP {
                prop_assert_eq!(c, v);
            }
        }
    }
}
