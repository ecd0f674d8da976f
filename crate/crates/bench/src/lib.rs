//! Fixtures shared by the benchmarks.

use diffclone_core::denoiser::{DenoiserConfig, DenoiserNet};
use diffclone_core::{Result, Tensor};

/// Pouring-sized denoiser: three action axes over a 16-step window with a
/// ten-dimensional observation.
pub fn pouring_denoiser() -> Result<DenoiserNet> {
    let cfg = DenoiserConfig {
        action_dim: 3,
        obs_dim: 10,
        ..DenoiserConfig::default()
    };
    DenoiserNet::build(cfg, 0)
}

/// A batch of noisy windows, observations and timesteps for `net`.
pub fn batch(net: &DenoiserNet, b: usize) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let c = net.config();
    let n = b * c.horizon * c.action_dim;
    let x = Tensor::new([b, c.horizon, c.action_dim], (0..n).map(|i| ((i % 7) as f64 - 3.0) / 3.0).collect())?;
    let o = Tensor::new([b, c.obs_dim], (0..b * c.obs_dim).map(|i| ((i % 5) as f64 - 2.0) / 2.0).collect())?;
    let t = (0..b).map(|i| i % c.diffusion_steps + 1).collect();
    Ok((x, o, t))
}
