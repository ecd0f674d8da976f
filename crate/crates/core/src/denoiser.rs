//! FiLM-conditioned 1D U-Net that predicts the noise in an action window.
//!
//! The window `[H, action_dim]` is treated as `action_dim` channels over `H`
//! time steps. Each level runs one residual block and halves the length, a
//! middle block runs at the coarsest resolution, and the decoder upsamples,
//! concatenates the matching skip and runs another residual block. Every
//! block modulates its first normalized activation with `γ·h + β` computed
//! from `obs ⊕ embed(t)`.
//!
//! The network output `U` is blended with its input as
//! `ε̂ = √(1−ᾱ_t)·x_t + √ᾱ_t·U`, so at the noisiest step the prediction is
//! the input itself and the first reverse step cannot amplify network error.

use crate::checkpoint::Checkpoint;
use crate::error::{bail, Result};
use crate::nn::{Conv1d, GroupNorm, Linear};
use crate::rng;
use crate::schedule::{NoisePredictor, NoiseSchedule};
use crate::tensor::{Graph, ParamSet, Scope, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub action_dim: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub groups: usize,
    pub time_embed_dim: usize,
    /// Timestep count of the schedule the net is trained against.
    pub diffusion_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            action_dim: 7,
            horizon: 16,
            obs_dim: 10,
            channels: vec![32, 64],
            kernel: 3,
            groups: 4,
            time_embed_dim: 32,
            diffusion_steps: 50,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn cond_dim(&self) -> usize {
        self.obs_dim + self.time_embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_dim == 0 || self.obs_dim == 0 || self.horizon == 0 {
            bail!(Config, "action_dim, obs_dim and horizon must be positive");
        }
        if self.channels.is_empty() {
            bail!(Config, "denoiser needs at least one channel level");
        }
        if self.kernel % 2 == 0 {
            bail!(Config, "kernel size must be odd, got {}", self.kernel);
        }
        if self.groups == 0 {
            bail!(Config, "norm groups must be positive");
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % self.groups != 0) {
            bail!(Config, "channel width {c} is not a positive multiple of {} groups", self.groups);
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            bail!(Config, "time_embed_dim must be even and positive, got {}", self.time_embed_dim);
        }
        if self.diffusion_steps == 0 {
            bail!(Config, "diffusion_steps must be positive");
        }
        let factor = 1usize << self.levels();
        if self.horizon % factor != 0 {
            bail!(
                Config,
                "horizon {} must be divisible by {factor} for {} levels",
                self.horizon,
                self.levels()
            );
        }
        Ok(())
    }

    pub(crate) fn write(&self, ck: &mut Checkpoint) {
        ck.set("action_dim", self.action_dim);
        ck.set("horizon", self.horizon);
        ck.set("obs_dim", self.obs_dim);
        let widths: Vec<String> = self.channels.iter().map(ToString::to_string).collect();
        ck.set("channels", widths.join(","));
        ck.set("kernel", self.kernel);
        ck.set("groups", self.groups);
        ck.set("time_embed_dim", self.time_embed_dim);
        ck.set("diffusion_steps", self.diffusion_steps);
    }

    pub(crate) fn read(ck: &Checkpoint) -> Result<Self> {
        let channels = ck
            .require("channels")?
            .split(',')
            .map(|c| c.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| crate::Error::Format("unparsable channel list in checkpoint".into()))?;
        let config = Self {
            action_dim: ck.parse("action_dim")?,
            horizon: ck.parse("horizon")?,
            obs_dim: ck.parse("obs_dim")?,
            channels,
            kernel: ck.parse("kernel")?,
            groups: ck.parse("groups")?,
            time_embed_dim: ck.parse("time_embed_dim")?,
            diffusion_steps: ck.parse("diffusion_steps")?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Sinusoidal embedding of a diffusion step: `[sin(t·f0), cos(t·f0), sin(t·f1), ...]`
/// with frequencies falling geometrically from 1 to 1/10000.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        bail!(Config, "time embedding dimension must be even and positive, got {dim}");
    }
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / denom).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    conv1: Conv1d,
    norm1: GroupNorm,
    film: Linear,
    conv2: Conv1d,
    norm2: GroupNorm,
    residual: Option<Conv1d>,
    channels: usize,
}

/// Switches used by tests to probe the architecture.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Probe {
    pub film: bool,
    pub skips: bool,
}

impl Probe {
    const NORMAL: Probe = Probe {
        film: true,
        skips: true,
    };
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &DenoiserConfig,
        rng: &mut rng::Rng,
    ) -> Self {
        let conv1 = Conv1d::new(ps, &format!("{name}.conv1"), cin, cout, cfg.kernel, 1, rng);
        let norm1 = GroupNorm::new(ps, &format!("{name}.norm1"), cout, cfg.groups);
        let film = Linear::new(ps, &format!("{name}.film"), cfg.cond_dim(), 2 * cout, rng);
        // Start close to the identity modulation: gamma bias 1, beta bias 0.
        let bias = ps.get_mut(film.bias).data_mut();
        bias[..cout].iter_mut().for_each(|b| *b = 1.0);
        bias[cout..].iter_mut().for_each(|b| *b = 0.0);
        let conv2 = Conv1d::new(ps, &format!("{name}.conv2"), cout, cout, cfg.kernel, 1, rng);
        let norm2 = GroupNorm::new(ps, &format!("{name}.norm2"), cout, cfg.groups);
        let residual =
            (cin != cout).then(|| Conv1d::new(ps, &format!("{name}.residual"), cin, cout, 1, 1, rng));
        Self {
            conv1,
            norm1,
            film,
            conv2,
            norm2,
            residual,
            channels: cout,
        }
    }

    fn forward(&self, g: &mut Graph, s: &Scope, x: Var, cond: Var, probe: Probe) -> Result<Var> {
        let mut h = self.conv1.forward(g, s, x)?;
        h = self.norm1.forward(g, s, h)?;
        if probe.film {
            let mods = self.film.forward(g, s, cond)?;
            let gamma = g.slice_cols(mods, 0, self.channels)?;
            let beta = g.slice_cols(mods, self.channels, 2 * self.channels)?;
            h = g.film(h, gamma, beta)?;
        }
        h = g.mish(h)?;
        h = self.conv2.forward(g, s, h)?;
        h = self.norm2.forward(g, s, h)?;
        h = g.mish(h)?;
        let skip = match &self.residual {
            Some(conv) => conv.forward(g, s, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    params: ParamSet,
    time_in: Linear,
    time_out: Linear,
    down: Vec<(ResBlock, Conv1d)>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    final_conv: Conv1d,
    final_norm: GroupNorm,
    final_out: Conv1d,
    /// `ᾱ_t` for `t = 0..=diffusion_steps`.
    alpha_bar: Vec<f64>,
}

impl DenoiserNet {
    pub fn build(config: DenoiserConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::from_seed(init_seed);
        let mut ps = ParamSet::new();
        let d = config.time_embed_dim;
        let time_in = Linear::new(&mut ps, "time.0", d, 4 * d, &mut rng);
        let time_out = Linear::new(&mut ps, "time.1", 4 * d, d, &mut rng);

        let mut down = Vec::new();
        let mut cin = config.action_dim;
        for (i, &c) in config.channels.iter().enumerate() {
            let block = ResBlock::new(&mut ps, &format!("down.{i}"), cin, c, &config, &mut rng);
            let sample = Conv1d::new(&mut ps, &format!("down.{i}.downsample"), c, c, config.kernel, 2, &mut rng);
            down.push((block, sample));
            cin = c;
        }
        let deepest = *config.channels.last().expect("validated non-empty");
        let mid = ResBlock::new(&mut ps, "mid", deepest, deepest, &config, &mut rng);

        let mut up = Vec::new();
        let mut below = deepest;
        for (i, &c) in config.channels.iter().enumerate().rev() {
            up.push(ResBlock::new(&mut ps, &format!("up.{i}"), below + c, c, &config, &mut rng));
            below = c;
        }
        let c0 = config.channels[0];
        let final_conv = Conv1d::new(&mut ps, "final.conv", c0, c0, config.kernel, 1, &mut rng);
        let final_norm = GroupNorm::new(&mut ps, "final.norm", c0, config.groups);
        let final_out = Conv1d::new(&mut ps, "final.out", c0, config.action_dim, 1, 1, &mut rng);
        let alpha_bar = NoiseSchedule::square_cosine(config.diffusion_steps)?.alpha_bar().to_vec();

        Ok(Self {
            config,
            params: ps,
            time_in,
            time_out,
            down,
            mid,
            up,
            final_conv,
            final_norm,
            final_out,
            alpha_bar,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_inputs(&self, g: &Graph, noisy: Var, timesteps: &[usize], obs: Var) -> Result<usize> {
        let c = &self.config;
        let ns = g.shape(noisy);
        if ns.len() != 3 || ns[1] != c.horizon || ns[2] != c.action_dim {
            bail!(
                Shape,
                "noisy actions must be [B, {}, {}], got {:?}",
                c.horizon,
                c.action_dim,
                ns
            );
        }
        let batch = ns[0];
        if g.shape(obs) != [batch, c.obs_dim] {
            bail!(Shape, "observations must be [{batch}, {}], got {:?}", c.obs_dim, g.shape(obs));
        }
        if timesteps.len() != batch {
            bail!(Shape, "{} timesteps for a batch of {batch}", timesteps.len());
        }
        if let Some(t) = timesteps.iter().find(|&&t| t < 1 || t > c.diffusion_steps) {
            bail!(Usage, "timestep {t} outside 1..={}", c.diffusion_steps);
        }
        Ok(batch)
    }

    /// Records the batched forward pass. `noisy` is `[B, H, A]`, `obs` is
    /// `[B, obs_dim]`; the result is `[B, H, A]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        s: &Scope,
        noisy: Var,
        timesteps: &[usize],
        obs: Var,
    ) -> Result<Var> {
        self.forward_probe(g, s, noisy, timesteps, obs, Probe::NORMAL)
    }

    pub(crate) fn forward_probe(
        &self,
        g: &mut Graph,
        s: &Scope,
        noisy: Var,
        timesteps: &[usize],
        obs: Var,
        probe: Probe,
    ) -> Result<Var> {
        let batch = self.check_inputs(g, noisy, timesteps, obs)?;
        let d = self.config.time_embed_dim;
        let mut emb = Vec::with_capacity(batch * d);
        for &t in timesteps {
            emb.extend(time_embedding(t, d)?);
        }
        let emb = g.constant([batch, d], emb)?;
        let mut temb = self.time_in.forward(g, s, emb)?;
        temb = g.mish(temb)?;
        temb = self.time_out.forward(g, s, temb)?;
        let temb = g.mish(temb)?;
        let cond = g.cat_cols(obs, temb)?;

        let mut x = g.swap_last2(noisy)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (block, sample) in &self.down {
            x = block.forward(g, s, x, cond, probe)?;
            skips.push(x);
            x = sample.forward(g, s, x)?;
        }
        x = self.mid.forward(g, s, x, cond, probe)?;
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            x = g.upsample(x, 2)?;
            let skip = if probe.skips {
                skip
            } else {
                let shape = g.shape(skip).to_vec();
                let n = g.value(skip).len();
                g.constant(shape, vec![0.0; n])?
            };
            x = g.cat_channels(x, skip)?;
            x = block.forward(g, s, x, cond, probe)?;
        }
        x = self.final_conv.forward(g, s, x)?;
        x = self.final_norm.forward(g, s, x)?;
        x = g.mish(x)?;
        x = self.final_out.forward(g, s, x)?;
        let out = g.swap_last2(x)?;

        let per = self.config.horizon * self.config.action_dim;
        let (mut skip_w, mut out_w) = (Vec::with_capacity(batch * per), Vec::with_capacity(batch * per));
        for &t in timesteps {
            let ab = self.alpha_bar[t];
            skip_w.extend(std::iter::repeat_n((1.0 - ab).sqrt(), per));
            out_w.extend(std::iter::repeat_n(ab.sqrt(), per));
        }
        let shape = g.shape(noisy).to_vec();
        let skip_w = g.constant(shape.clone(), skip_w)?;
        let out_w = g.constant(shape, out_w)?;
        let passthrough = g.mul(noisy, skip_w)?;
        let residual = g.mul(out, out_w)?;
        g.add(passthrough, residual)
    }

    /// Single-window forward pass: `[H, A]` in, `[H, A]` out.
    pub fn forward(&self, noisy: &Tensor, t: usize, obs: &[f64]) -> Result<Tensor> {
        let c = &self.config;
        if noisy.shape() != [c.horizon, c.action_dim] {
            bail!(
                Shape,
                "noisy actions must be [{}, {}], got {:?}",
                c.horizon,
                c.action_dim,
                noisy.shape()
            );
        }
        let batched = noisy.clone().reshape([1, c.horizon, c.action_dim])?;
        let obs = Tensor::new([1, obs.len()], obs.to_vec())?;
        let out = self.predict(&batched, &[t], &obs)?;
        out.reshape([c.horizon, c.action_dim])
    }

    pub(crate) fn predict_probe(
        &self,
        noisy: &Tensor,
        timesteps: &[usize],
        obs: &Tensor,
        probe: Probe,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(noisy);
        let o = g.input(obs);
        let out = self.forward_probe(&mut g, &Scope::frozen(&self.params), x, timesteps, o, probe)?;
        Ok(g.tensor(out))
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        self.config.write(ck);
        ck.push_params(prefix, &self.params);
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let config = DenoiserConfig::read(ck)?;
        let mut net = Self::build(config, 0)?;
        ck.load_params(prefix, &mut net.params)?;
        Ok(net)
    }
}

impl NoisePredictor for DenoiserNet {
    fn window(&self) -> (usize, usize) {
        (self.config.horizon, self.config.action_dim)
    }

    fn obs_dim(&self) -> usize {
        self.config.obs_dim
    }

    fn predict(&self, noisy: &Tensor, timesteps: &[usize], obs: &Tensor) -> Result<Tensor> {
        self.predict_probe(noisy, timesteps, obs, Probe::NORMAL)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::Error;

    fn tiny() -> DenoiserConfig {
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

    /// Per-layer arithmetic written out independently of the builder.
    fn tally(c: &DenoiserConfig) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k + cout;
        let lin = |i: usize, o: usize| o * i + o;
        let gn = |ch: usize| 2 * ch;
        let cond = c.obs_dim + c.time_embed_dim;
        let block = |cin: usize, cout: usize| {
            conv(cin, cout, c.kernel)
                + gn(cout)
                + lin(cond, 2 * cout)
                + conv(cout, cout, c.kernel)
                + gn(cout)
                + if cin != cout { conv(cin, cout, 1) } else { 0 }
        };
        let d = c.time_embed_dim;
        let mut n = lin(d, 4 * d) + lin(4 * d, d);
        let mut cin = c.action_dim;
        for &ch in &c.channels {
            n += block(cin, ch) + conv(ch, ch, c.kernel);
            cin = ch;
        }
        n += block(cin, cin);
        let mut below = cin;
        for &ch in c.channels.iter().rev() {
            n += block(below + ch, ch);
            below = ch;
        }
        let c0 = c.channels[0];
        n + conv(c0, c0, c.kernel) + gn(c0) + conv(c0, c.action_dim, 1)
    }

    #[test]
    fn parameter_count_matches_tally() {
        for cfg in [DenoiserConfig::default(), tiny()] {
            let net = DenoiserNet::build(cfg.clone(), 0).unwrap();
            assert_eq!(net.num_params(), tally(&cfg));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = DenoiserConfig::default();
        c.horizon = 6;
        assert!(matches!(DenoiserNet::build(c, 0), Err(Error::Config(_))));
        let mut c = DenoiserConfig::default();
        c.kernel = 4;
        assert!(DenoiserNet::build(c, 0).is_err());
        let mut c = DenoiserConfig::default();
        c.channels = vec![30, 64];
        assert!(DenoiserNet::build(c, 0).is_err());
        assert!(DenoiserNet::build(DenoiserConfig::default(), 0).is_ok());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = DenoiserNet::build(tiny(), 42).unwrap();
        let b = DenoiserNet::build(tiny(), 42).unwrap();
        let c = DenoiserNet::build(tiny(), 43).unwrap();
        let bytes = |n: &DenoiserNet| {
            n.params()
                .iter()
                .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
                .collect::<Vec<u8>>()
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn time_embedding_properties() {
        assert!(matches!(time_embedding(3, 5), Err(Error::Config(_))));
        let embs: Vec<Vec<f64>> = (1..=50).map(|t| time_embedding(t, 32).unwrap()).collect();
        assert_eq!(embs[6], time_embedding(7, 32).unwrap());
        let mut min_gap = f64::INFINITY;
        for i in 0..embs.len() {
            assert!(embs[i].iter().all(|v| (-1.0..=1.0).contains(v)));
            for j in i + 1..embs.len() {
                let gap: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min_gap = min_gap.min(gap.sqrt());
            }
        }
        assert!(min_gap > 0.0);
        let e = time_embedding(2, 4).unwrap();
        let expect = [2f64.sin(), 2f64.cos(), (2.0e-4f64).sin(), (2.0e-4f64).cos()];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn inputs(cfg: &DenoiserConfig, batch: usize, seed: u64) -> (Tensor, Tensor) {
        let mut r = rng::from_seed(seed);
        let x = Tensor::new(
            [batch, cfg.horizon, cfg.action_dim],
            rng::normal_vec(&mut r, batch * cfg.horizon * cfg.action_dim),
        )
        .unwrap();
        let o = Tensor::new([batch, cfg.obs_dim], rng::normal_vec(&mut r, batch * cfg.obs_dim)).unwrap();
        (x, o)
    }

    #[test]
    fn output_shape_and_obs_sensitivity() {
        let cfg = DenoiserConfig::default();
        let net = DenoiserNet::build(cfg.clone(), 1).unwrap();
        let (x, o) = inputs(&cfg, 1, 2);
        let x1 = x.clone().reshape([16, 7]).unwrap();
        let a = net.forward(&x1, 5, o.data()).unwrap();
        assert_eq!(a.shape(), [16, 7]);
        let mut o2 = o.data().to_vec();
        o2[0] += 0.5;
        let b = net.forward(&x1, 5, &o2).unwrap();
        let diff: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum();
        assert!(diff > 0.0);
        assert!(matches!(net.forward(&Tensor::zeros([8, 7]), 5, o.data()), Err(Error::Shape(_))));
    }

    #[test]
    fn batched_rows_match_single_forward() {
        let cfg = tiny();
        let net = DenoiserNet::build(cfg.clone(), 3).unwrap();
        let (x, o) = inputs(&cfg, 3, 4);
        let ts = [1, 7, 20];
        let out = net.predict(&x, &ts, &o).unwrap();
        let per = cfg.horizon * cfg.action_dim;
        for b in 0..3 {
            let xi = Tensor::new([cfg.horizon, cfg.action_dim], x.data()[b * per..(b + 1) * per].to_vec()).unwrap();
            let single = net.forward(&xi, ts[b], &o.data()[b * 3..(b + 1) * 3]).unwrap();
            for (p, q) in single.data().iter().zip(&out.data()[b * per..(b + 1) * per]) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny();
        let net = DenoiserNet::build(cfg.clone(), 3).unwrap();
        let (x, o) = inputs(&cfg, 2, 9);
        let a = net.predict(&x, &[3, 4], &o).unwrap();
        let b = net.predict(&x, &[3, 4], &o).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn identity_film_equals_unconditioned_net() {
        let cfg = tiny();
        let mut net = DenoiserNet::build(cfg.clone(), 5).unwrap();
        let blocks: Vec<ResBlock> = net
            .down
            .iter()
            .map(|(b, _)| b.clone())
            .chain(std::iter::once(net.mid.clone()))
            .chain(net.up.iter().cloned())
            .collect();
        for b in &blocks {
            net.params.get_mut(b.film.weight).data_mut().fill(0.0);
            let bias = net.params.get_mut(b.film.bias).data_mut();
            bias[..b.channels].fill(1.0);
            bias[b.channels..].fill(0.0);
        }
        let (x, o) = inputs(&cfg, 2, 6);
        let with = net.predict(&x, &[2, 9], &o).unwrap();
        let without = net
            .predict_probe(&x, &[2, 9], &o, Probe { film: false, skips: true })
            .unwrap();
        for (a, b) in with.data().iter().zip(without.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn skips_are_connected() {
        let cfg = tiny();
        let net = DenoiserNet::build(cfg.clone(), 5).unwrap();
        let (x, o) = inputs(&cfg, 1, 6);
        let with = net.predict(&x, &[4], &o).unwrap();
        let without = net
            .predict_probe(&x, &[4], &o, Probe { film: true, skips: false })
            .unwrap();
        let diff: f64 = with.data().iter().zip(without.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = DenoiserConfig {
            action_dim: 2,
            horizon: 4,
            obs_dim: 3,
            channels: vec![4, 8],
            kernel: 3,
            groups: 2,
            time_embed_dim: 4,
            diffusion_steps: 50,
        };
        let mut net = DenoiserNet::build(cfg.clone(), 11).unwrap();
        let (x, o) = inputs(&cfg, 2, 12);
        let (_, target) = inputs(&DenoiserConfig { obs_dim: 8, ..cfg.clone() }, 2, 13);
        let target = target.into_data();
        let arch = net.clone();
        let report = gradcheck::check_params(&mut net.params, 1e-5, |g, ps| {
            let s = Scope::train(ps);
            let xv = g.input(&x);
            let ov = g.input(&o);
            let out = arch.forward_graph(g, &s, xv, &[3, 17], ov)?;
            let t = g.constant([2, 4, 2], target.clone())?;
            g.mse(out, t)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        assert_eq!(report.checked, tally(&cfg));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let net = DenoiserNet::build(cfg.clone(), 21).unwrap();
        let mut ck = Checkpoint::new("denoiser");
        net.write_checkpoint(&mut ck, "denoiser");
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let loaded = DenoiserNet::read_checkpoint(&back, "denoiser").unwrap();
        assert_eq!(loaded.config(), &cfg);
        let (x, o) = inputs(&cfg, 1, 3);
        assert_eq!(
            net.predict(&x, &[5], &o).unwrap().data(),
            loaded.predict(&x, &[5], &o).unwrap().data()
        );
    }
}
