//! Parameterised layers built on the tape.

use rand::Rng as _;

use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamSet, Scope, Tensor, Var};

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let weight = ps.insert(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[out_dim, in_dim], in_dim),
        );
        let bias = ps.insert(format!("{name}.bias"), fan_in_uniform(rng, &[out_dim], in_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        out_dim * in_dim + out_dim
    }

    pub fn forward(&self, g: &mut Graph, s: &Scope, x: Var) -> Result<Var> {
        let w = s.get(g, self.weight);
        let b = s.get(g, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * kernel;
        let weight = ps.insert(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[cout, cin, kernel], fan_in),
        );
        let bias = ps.insert(format!("{name}.bias"), fan_in_uniform(rng, &[cout], fan_in));
        Self {
            weight,
            bias,
            stride,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn num_params(cin: usize, cout: usize, kernel: usize) -> usize {
        cout * cin * kernel + cout
    }

    pub fn forward(&self, g: &mut Graph, s: &Scope, x: Var) -> Result<Var> {
        let w = s.get(g, self.weight);
        let b = s.get(g, self.bias);
        g.conv1d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Self {
        let scale = ps.insert(format!("{name}.scale"), Tensor::full([channels], 1.0));
        let shift = ps.insert(format!("{name}.shift"), Tensor::zeros([channels]));
        Self {
            scale,
            shift,
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &Scope, x: Var) -> Result<Var> {
        let sc = s.get(g, self.scale);
        let sh = s.get(g, self.shift);
        g.group_norm(x, self.groups, sc, sh)
    }
}

/// Feed-forward network with Mish between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width from input to output; at least two entries.
    pub fn new(ps: &mut ParamSet, name: &str, dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            bail!(Config, "an MLP needs at least input and output widths, got {:?}", dims);
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn num_params(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| Linear::num_params(w[0], w[1])).sum()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, g: &mut Graph, s: &Scope, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, s, x)?;
            if i < last {
                x = g.mish(x)?;
            }
        }
        Ok(x)
    }

    /// Evaluates rows of `x` without recording gradients.
    pub fn apply(&self, params: &ParamSet, rows: usize, x: Vec<f64>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let input = g.constant([rows, self.in_dim()], x)?;
        let out = self.forward(&mut g, &Scope::frozen(params), input)?;
        Ok(g.value(out).to_vec())
    }
}
