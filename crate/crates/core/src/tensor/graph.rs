use std::collections::HashMap;

use super::{gemm, ParamId, ParamSet, Tensor};
use crate::error::{bail, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Where a layer reads its parameters from: tracked (gradients flow back
/// into the set) or frozen (plain constants, nothing saved for backward).
#[derive(Clone, Copy)]
pub struct Scope<'a> {
    params: &'a ParamSet,
    trainable: bool,
}

impl<'a> Scope<'a> {
    pub fn train(params: &'a ParamSet) -> Self {
        Self {
            params,
            trainable: true,
        }
    }

    pub fn frozen(params: &'a ParamSet) -> Self {
        Self {
            params,
            trainable: false,
        }
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    pub fn get(&self, g: &mut Graph, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.params, id)
        } else {
            g.frozen(self.params, id)
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        a: Var,
        mul: f64,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        scale: Var,
        shift: Var,
        batch: usize,
        channels: usize,
        len: usize,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Film {
        h: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        channels: usize,
        len: usize,
    },
    Mish(Var),
    Relu(Var),
    Upsample {
        a: Var,
        factor: usize,
    },
    CatChannels {
        a: Var,
        b: Var,
        batch: usize,
        ca: usize,
        cb: usize,
        len: usize,
    },
    CatCols {
        a: Var,
        b: Var,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    SliceCols {
        a: Var,
        rows: usize,
        cols: usize,
        start: usize,
        end: usize,
    },
    SwapLast2 {
        a: Var,
        batch: usize,
        r: usize,
        c: usize,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    RowDot {
        a: Var,
        b: Var,
        d: usize,
    },
    NormalizeRows {
        a: Var,
        d: usize,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        classes: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    cin: usize,
    len: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// The tape. Nodes are appended in evaluation order, so every operand
/// precedes its consumers; `backward` walks them once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, usize), Var>,
    frozen: HashMap<(u64, usize), Var>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bindings: Vec<(u64, usize, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds gradients into every tensor of `params` that was bound on the
    /// graph. Bound tensors that received no gradient get an explicit zero.
    pub fn accumulate_into(&self, params: &mut ParamSet) {
        let tag = params.tag();
        for &(set, idx, var) in &self.bindings {
            if set != tag {
                continue;
            }
            let t = &mut params.tensors_mut()[idx];
            match self.wrt(var) {
                Some(g) => t.accumulate_grad(g).expect("bound gradient length"),
                None => {
                    let zeros = vec![0.0; t.numel()];
                    t.accumulate_grad(&zeros).expect("bound gradient length");
                }
            }
        }
    }
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, l] => Ok((1, c, l)),
        [b, c, l] => Ok((b, c, l)),
        _ => bail!(Shape, "{what} expects [C, L] or [B, C, L], got {:?}", shape),
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => bail!(Shape, "{what} expects a matrix, got {:?}", shape),
    }
}

fn with_batch(shape: &[usize], b: usize, c: usize, l: usize) -> Vec<usize> {
    if shape.len() == 2 {
        vec![c, l]
    } else {
        vec![b, c, l]
    }
}

/// Above this input `tanh(softplus(x))` is 1 to double precision.
const MISH_SATURATION: f64 = 20.0;

/// `tanh(softplus(x))` and `sigmoid(x)` from a single exponential, using
/// `tanh(ln(1 + e)) = n / (n + 2)` with `n = e·(e + 2)`.
fn mish_parts(x: f64) -> (f64, f64) {
    if x > MISH_SATURATION {
        return (1.0, 1.0 / (1.0 + (-x).exp()));
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    (n / (n + 2.0), e / (1.0 + e))
}

/// `x * tanh(softplus(x))`.
pub fn mish(x: f64) -> f64 {
    x * mish_parts(x).0
}

fn mish_grad(x: f64) -> f64 {
    let (t, s) = mish_parts(x);
    t + x * (1.0 - t * t) * s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at element {} of node {}",
                value[bad],
                bad,
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, tracked: bool) -> Var {
        // Leaves come from validated tensors; only the finiteness check can fail.
        self.push(shape, value, Op::Leaf, tracked)
            .expect("leaf values must be finite")
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A constant input: no gradient is computed for it.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// An input whose gradient is kept and can be read with
    /// [`Gradients::wrt`].
    pub fn input_tracked(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// A constant built from raw parts.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t.shape().to_vec(), t.into_data(), false))
    }

    /// Binds a trainable parameter. Binding the same tensor twice returns the
    /// same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let key = (params.tag(), id.0);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let t = params.get(id);
        let v = self.leaf(t.shape().to_vec(), t.data().to_vec(), true);
        self.bound.insert(key, v);
        v
    }

    /// A parameter read as a constant.
    pub fn frozen(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let key = (params.tag(), id.0);
        if let Some(&v) = self.frozen.get(&key) {
            return v;
        }
        let t = params.get(id);
        let v = self.leaf(t.shape().to_vec(), t.data().to_vec(), false);
        self.frozen.insert(key, v);
        v
    }

    /// Stop-gradient: a constant copy of `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.leaf(shape, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            bail!(Shape, "matmul inner dimensions differ: [{m},{k}] x [{k2},{n}]");
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, tracked)
    }

    /// `x · wᵀ + b` for `x: [rows, din]`, `w: [dout, din]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, din) = dims2(self.shape(x), "linear input")?;
        let (dout, din2) = dims2(self.shape(w), "linear weight")?;
        if din != din2 {
            bail!(Shape, "linear expects {din2} input features, got {din}");
        }
        let mut out = vec![0.0; rows * dout];
        gemm(rows, din, dout, self.value(x), false, self.value(w), true, &mut out, 0.0);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != dout {
                bail!(Shape, "bias of length {} for {} outputs", bias.len(), dout);
            }
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(
            vec![rows, dout],
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            tracked,
        )
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Shape,
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(self.shape(a).to_vec(), out, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `mul · a + add`, elementwise.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| mul * x + add).collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), out, Op::Affine { a, mul }, tracked)
    }

    pub fn scale(&mut self, a: Var, mul: f64) -> Result<Var> {
        self.affine(a, mul, 0.0)
    }

    /// Zero-padded cross-correlation. `x` is `[C_in, L]` or `[B, C_in, L]`,
    /// `w` is `[C_out, C_in, K]`, `b` is `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, cin, len) = dims3(self.shape(x), "conv1d")?;
        let (cout, cin2, k) = match *self.shape(w) {
            [co, ci, k] => (co, ci, k),
            ref s => bail!(Shape, "conv1d kernel must be [C_out, C_in, K], got {:?}", s),
        };
        if cin != cin2 {
            bail!(Shape, "conv1d input has {cin} channels, kernel expects {cin2}");
        }
        if stride == 0 {
            bail!(Config, "conv1d stride must be positive");
        }
        if len + 2 * pad < k {
            bail!(Shape, "conv1d kernel {k} longer than padded input {}", len + 2 * pad);
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                bail!(Shape, "conv1d bias must be [{cout}], got {:?}", self.shape(b));
            }
        }
        let lout = (len + 2 * pad - k) / stride + 1;
        let dims = ConvDims {
            batch,
            cin,
            len,
            cout,
            k,
            stride,
            pad,
            lout,
        };
        let ncol = batch * lout;
        let cols = im2col(self.value(x), &dims);
        let mut y = vec![0.0; cout * ncol];
        gemm(cout, cin * k, ncol, self.value(w), false, &cols, false, &mut y, 0.0);
        let bias = b.map(|b| self.value(b));
        let mut out = vec![0.0; batch * cout * lout];
        for bi in 0..batch {
            for co in 0..cout {
                let src = &y[co * ncol + bi * lout..][..lout];
                let dst = &mut out[(bi * cout + co) * lout..][..lout];
                let add = bias.map_or(0.0, |b| b[co]);
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + add);
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        let cols = if tracked { cols } else { Vec::new() };
        let shape = with_batch(self.shape(x), batch, cout, lout);
        self.push(shape, out, Op::Conv1d { x, w, b, dims, cols }, tracked)
    }

    /// Group normalization over `[C, L]` or `[B, C, L]` with per-channel
    /// affine `scale` and `shift`.
    pub fn group_norm(&mut self, x: Var, groups: usize, scale: Var, shift: Var) -> Result<Var> {
        let (batch, channels, len) = dims3(self.shape(x), "group_norm")?;
        if groups == 0 || channels % groups != 0 {
            bail!(Config, "{channels} channels cannot be split into {groups} groups");
        }
        if self.shape(scale) != [channels] || self.shape(shift) != [channels] {
            bail!(Shape, "group_norm scale/shift must be [{channels}]");
        }
        let cg = channels / groups;
        let n = (cg * len) as f64;
        let xs = self.value(x);
        let (sc, sh) = (self.value(scale), self.value(shift));
        let mut out = vec![0.0; xs.len()];
        let mut mean = Vec::with_capacity(batch * groups);
        let mut rstd = Vec::with_capacity(batch * groups);
        for bi in 0..batch {
            for gi in 0..groups {
                let start = (bi * channels + gi * cg) * len;
                let block = &xs[start..start + cg * len];
                let mu = block.iter().sum::<f64>() / n;
                let var = block.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                for ci in 0..cg {
                    let c = gi * cg + ci;
                    for li in 0..len {
                        let idx = start + ci * len + li;
                        out[idx] = (xs[idx] - mu) * r * sc[c] + sh[c];
                    }
                }
                mean.push(mu);
                rstd.push(r);
            }
        }
        let tracked = self.tracked(x) || self.tracked(scale) || self.tracked(shift);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::GroupNorm {
                x,
                scale,
                shift,
                batch,
                channels,
                len,
                groups,
                mean,
                rstd,
            },
            tracked,
        )
    }

    /// Feature-wise modulation `gamma[b, c] · h[b, c, l] + beta[b, c]`.
    pub fn film(&mut self, h: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (batch, channels, len) = dims3(self.shape(h), "film")?;
        let expect = [batch, channels];
        let ok = |s: &[usize]| s == expect || (batch == 1 && s == [channels]);
        if !ok(self.shape(gamma)) || !ok(self.shape(beta)) {
            bail!(
                Shape,
                "film modulation must be [{batch}, {channels}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            );
        }
        let (hv, gv, bv) = (self.value(h), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; hv.len()];
        for (row, (o, x)) in out.chunks_mut(len).zip(hv.chunks(len)).enumerate() {
            let (g, b) = (gv[row], bv[row]);
            o.iter_mut().zip(x).for_each(|(o, x)| *o = g * x + b);
        }
        let tracked = self.tracked(h) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            self.shape(h).to_vec(),
            out,
            Op::Film {
                h,
                gamma,
                beta,
                batch,
                channels,
                len,
            },
            tracked,
        )
    }

    pub fn mish(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| mish(x)).collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), out, Op::Mish(a), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), tracked)
    }

    /// Nearest-neighbour upsampling along the last axis.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        let (batch, c, len) = dims3(self.shape(a), "upsample")?;
        if factor == 0 {
            bail!(Config, "upsample factor must be positive");
        }
        let out = self
            .value(a)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, factor))
            .collect();
        let shape = with_batch(self.shape(a), batch, c, len * factor);
        let tracked = self.tracked(a);
        self.push(shape, out, Op::Upsample { a, factor }, tracked)
    }

    /// Concatenates along the channel axis.
    pub fn cat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, ca, len) = dims3(self.shape(a), "cat_channels")?;
        let (batch2, cb, len2) = dims3(self.shape(b), "cat_channels")?;
        if batch != batch2 || len != len2 || self.shape(a).len() != self.shape(b).len() {
            bail!(
                Shape,
                "cat_channels: {:?} and {:?} disagree outside the channel axis",
                self.shape(a),
                self.shape(b)
            );
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for bi in 0..batch {
            out.extend_from_slice(&av[bi * ca * len..(bi + 1) * ca * len]);
            out.extend_from_slice(&bv[bi * cb * len..(bi + 1) * cb * len]);
        }
        let shape = with_batch(self.shape(a), batch, ca + cb, len);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            shape,
            out,
            Op::CatChannels {
                a,
                b,
                batch,
                ca,
                cb,
                len,
            },
            tracked,
        )
    }

    /// Concatenates two matrices side by side.
    pub fn cat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, ca) = dims2(self.shape(a), "cat_cols")?;
        let (rows2, cb) = dims2(self.shape(b), "cat_cols")?;
        if rows != rows2 {
            bail!(Shape, "cat_cols: {rows} vs {rows2} rows");
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(vec![rows, ca + cb], out, Op::CatCols { a, b, rows, ca, cb }, tracked)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(a), "slice_cols")?;
        if start >= end || end > cols {
            bail!(Shape, "invalid column range {start}..{end} for {cols} columns");
        }
        let av = self.value(a);
        let out = (0..rows)
            .flat_map(|r| av[r * cols + start..r * cols + end].iter().copied())
            .collect();
        let tracked = self.tracked(a);
        self.push(
            vec![rows, end - start],
            out,
            Op::SliceCols {
                a,
                rows,
                cols,
                start,
                end,
            },
            tracked,
        )
    }

    /// Swaps the two trailing axes of a `[R, C]` or `[B, R, C]` array.
    pub fn swap_last2(&mut self, a: Var) -> Result<Var> {
        let (batch, r, c) = dims3(self.shape(a), "swap_last2")?;
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for bi in 0..batch {
            let src = &av[bi * r * c..(bi + 1) * r * c];
            let dst = &mut out[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let shape = with_batch(self.shape(a), batch, c, r);
        let tracked = self.tracked(a);
        self.push(shape, out, Op::SwapLast2 { a, batch, r, c }, tracked)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(a);
        self.push(vec![1], vec![s], Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let tracked = self.tracked(a);
        self.push(vec![1], vec![m], Op::Mean(a), tracked)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (av, bv) = (self.value(a), self.value(b));
        let m = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(vec![1], vec![m], Op::Mse(a, b), tracked)
    }

    /// Row-wise dot products, shape `[rows, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (rows, d) = dims2(self.shape(a), "row_dot")?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = av
            .chunks(d)
            .zip(bv.chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(vec![rows, 1], out, Op::RowDot { a, b, d }, tracked)
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, d) = dims2(self.shape(a), "normalize_rows")?;
        let av = self.value(a);
        let norms: Vec<f64> = av
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR))
            .collect();
        let out = av
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, n)| r.iter().map(move |v| v / n))
            .collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), out, Op::NormalizeRows { a, d, norms }, tracked)
    }

    /// Mean softmax cross-entropy of `logits: [rows, classes]` against
    /// integer targets, computed with max-subtraction.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.len() != rows {
            bail!(Shape, "{} targets for {} rows", targets.len(), rows);
        }
        if let Some(t) = targets.iter().find(|&&t| t >= classes) {
            bail!(Shape, "target class {t} out of range for {classes} classes");
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (r, (row, p)) in lv.chunks(classes).zip(probs.chunks_mut(classes)).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[targets[r]];
            p.iter_mut().zip(row).for_each(|(p, v)| *p = (v - m).exp() / z);
        }
        let tracked = self.tracked(logits);
        self.push(
            vec![1],
            vec![total / rows as f64],
            Op::CrossEntropy {
                logits,
                classes,
                targets: targets.to_vec(),
                probs,
            },
            tracked,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.shape(a), shape);
        }
        let out = self.value(a).to_vec();
        let tracked = self.tracked(a);
        self.push(shape, out, Op::Reshape(a), tracked)
    }

    /// Reverse pass from a scalar. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            bail!(
                Usage,
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            );
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            backprop(nodes, &node.op, &node.value, &gy, &mut grads);
        }
        let mut bindings: Vec<(u64, usize, Var)> =
            self.bound.iter().map(|(&(t, i), &v)| (t, i, v)).collect();
        bindings.sort_by_key(|&(t, i, _)| (t, i));
        Ok(Gradients { grads, bindings })
    }
}

const GROUP_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let ncol = d.batch * d.lout;
    let mut cols = vec![0.0; d.cin * d.k * ncol];
    for bi in 0..d.batch {
        for ci in 0..d.cin {
            let xrow = &x[(bi * d.cin + ci) * d.len..][..d.len];
            for kk in 0..d.k {
                let row = &mut cols[(ci * d.k + kk) * ncol + bi * d.lout..][..d.lout];
                for (lo, slot) in row.iter_mut().enumerate() {
                    let pos = (lo * d.stride + kk) as isize - d.pad as isize;
                    if pos >= 0 && (pos as usize) < d.len {
                        *slot = xrow[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].tracked {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], op: &Op, y: &[f64], gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match *op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            if let Some(da) = grad_slot(nodes, grads, a) {
                gemm(m, n, k, gy, false, val(b), true, da, 1.0);
            }
            if let Some(db) = grad_slot(nodes, grads, b) {
                gemm(k, m, n, val(a), true, gy, false, db, 1.0);
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            din,
            dout,
        } => {
            if let Some(dx) = grad_slot(nodes, grads, x) {
                gemm(rows, dout, din, gy, false, val(w), false, dx, 1.0);
            }
            if let Some(dw) = grad_slot(nodes, grads, w) {
                gemm(dout, rows, din, gy, true, val(x), false, dw, 1.0);
            }
            if let Some(db) = b.and_then(|b| grad_slot(nodes, grads, b)) {
                for row in gy.chunks(dout) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(d) = grad_slot(nodes, grads, v) {
                    d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = grad_slot(nodes, grads, b) {
                d.iter_mut().zip(gy).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                for ((d, g), o) in d.iter_mut().zip(gy).zip(val(b)) {
                    *d += g * o;
                }
            }
            if let Some(d) = grad_slot(nodes, grads, b) {
                for ((d, g), o) in d.iter_mut().zip(gy).zip(val(a)) {
                    *d += g * o;
                }
            }
        }
        Op::Affine { a, mul } => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                d.iter_mut().zip(gy).for_each(|(d, g)| *d += mul * g);
            }
        }
        Op::Conv1d {
            x,
            w,
            b,
            dims: d,
            ref cols,
        } => {
            let ncol = d.batch * d.lout;
            // gy is [B, C_out, L_out]; the GEMM layout is [C_out, B * L_out].
            let mut dy = vec![0.0; d.cout * ncol];
            for bi in 0..d.batch {
                for co in 0..d.cout {
                    let src = &gy[(bi * d.cout + co) * d.lout..][..d.lout];
                    dy[co * ncol + bi * d.lout..][..d.lout].copy_from_slice(src);
                }
            }
            if let Some(dw) = grad_slot(nodes, grads, w) {
                gemm(d.cout, ncol, d.cin * d.k, &dy, false, cols, true, dw, 1.0);
            }
            if let Some(db) = b.and_then(|b| grad_slot(nodes, grads, b)) {
                for (co, slot) in db.iter_mut().enumerate() {
                    *slot += dy[co * ncol..(co + 1) * ncol].iter().sum::<f64>();
                }
            }
            if let Some(dx) = grad_slot(nodes, grads, x) {
                let mut dcols = vec![0.0; d.cin * d.k * ncol];
                gemm(d.cin * d.k, d.cout, ncol, val(w), true, &dy, false, &mut dcols, 0.0);
                for bi in 0..d.batch {
                    for ci in 0..d.cin {
                        let xrow = &mut dx[(bi * d.cin + ci) * d.len..][..d.len];
                        for kk in 0..d.k {
                            let row = &dcols[(ci * d.k + kk) * ncol + bi * d.lout..][..d.lout];
                            for (lo, g) in row.iter().enumerate() {
                                let pos = (lo * d.stride + kk) as isize - d.pad as isize;
                                if pos >= 0 && (pos as usize) < d.len {
                                    xrow[pos as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::GroupNorm {
            x,
            scale,
            shift,
            batch,
            channels,
            len,
            groups,
            ref mean,
            ref rstd,
        } => {
            let cg = channels / groups;
            let n = (cg * len) as f64;
            let xs = val(x);
            let sc = val(scale);
            let xhat = |idx: usize, bg: usize| (xs[idx] - mean[bg]) * rstd[bg];
            if let Some(ds) = grad_slot(nodes, grads, scale) {
                for bi in 0..batch {
                    for c in 0..channels {
                        let bg = bi * groups + c / cg;
                        let start = (bi * channels + c) * len;
                        ds[c] += (0..len).map(|l| gy[start + l] * xhat(start + l, bg)).sum::<f64>();
                    }
                }
            }
            if let Some(dsh) = grad_slot(nodes, grads, shift) {
                for bi in 0..batch {
                    for c in 0..channels {
                        let start = (bi * channels + c) * len;
                        dsh[c] += gy[start..start + len].iter().sum::<f64>();
                    }
                }
            }
            if let Some(dx) = grad_slot(nodes, grads, x) {
                for bi in 0..batch {
                    for gi in 0..groups {
                        let bg = bi * groups + gi;
                        let start = (bi * channels + gi * cg) * len;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for ci in 0..cg {
                            let c = gi * cg + ci;
                            for l in 0..len {
                                let idx = start + ci * len + l;
                                let dxh = gy[idx] * sc[c];
                                s1 += dxh;
                                s2 += dxh * xhat(idx, bg);
                            }
                        }
                        for ci in 0..cg {
                            let c = gi * cg + ci;
                            for l in 0..len {
                                let idx = start + ci * len + l;
                                let dxh = gy[idx] * sc[c];
                                dx[idx] += rstd[bg] * (dxh - s1 / n - xhat(idx, bg) * s2 / n);
                            }
                        }
                    }
                }
            }
        }
        Op::Film {
            h,
            gamma,
            beta,
            batch,
            channels,
            len,
        } => {
            let rows = batch * channels;
            let gv = val(gamma);
            let hv = val(h);
            if let Some(dh) = grad_slot(nodes, grads, h) {
                for r in 0..rows {
                    for l in 0..len {
                        dh[r * len + l] += gy[r * len + l] * gv[r];
                    }
                }
            }
            if let Some(dg) = grad_slot(nodes, grads, gamma) {
                for r in 0..rows {
                    dg[r] += (0..len).map(|l| gy[r * len + l] * hv[r * len + l]).sum::<f64>();
                }
            }
            if let Some(db) = grad_slot(nodes, grads, beta) {
                for r in 0..rows {
                    db[r] += gy[r * len..(r + 1) * len].iter().sum::<f64>();
                }
            }
        }
        Op::Mish(a) => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                for ((d, g), x) in d.iter_mut().zip(gy).zip(val(a)) {
                    *d += g * mish_grad(*x);
                }
            }
        }
        Op::Relu(a) => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                for ((d, g), x) in d.iter_mut().zip(gy).zip(val(a)) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Upsample { a, factor } => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                for (d, g) in d.iter_mut().zip(gy.chunks(factor)) {
                    *d += g.iter().sum::<f64>();
                }
            }
        }
        Op::CatChannels {
            a,
            b,
            batch,
            ca,
            cb,
            len,
        } => {
            let stride = (ca + cb) * len;
            if let Some(d) = grad_slot(nodes, grads, a) {
                for bi in 0..batch {
                    let src = &gy[bi * stride..bi * stride + ca * len];
                    let dst = &mut d[bi * ca * len..(bi + 1) * ca * len];
                    dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                }
            }
            if let Some(d) = grad_slot(nodes, grads, b) {
                for bi in 0..batch {
                    let src = &gy[bi * stride + ca * len..(bi + 1) * stride];
                    let dst = &mut d[bi * cb * len..(bi + 1) * cb * len];
                    dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::CatCols { a, b, rows, ca, cb } => {
            let w = ca + cb;
            if let Some(d) = grad_slot(nodes, grads, a) {
                for r in 0..rows {
                    for j in 0..ca {
                        d[r * ca + j] += gy[r * w + j];
                    }
                }
            }
            if let Some(d) = grad_slot(nodes, grads, b) {
                for r in 0..rows {
                    for j in 0..cb {
                        d[r * cb + j] += gy[r * w + ca + j];
                    }
                }
            }
        }
        Op::SliceCols {
            a,
            rows,
            cols,
            start,
            end,
        } => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                let w = end - start;
                for r in 0..rows {
                    for j in 0..w {
                        d[r * cols + start + j] += gy[r * w + j];
                    }
                }
            }
        }
        Op::SwapLast2 { a, batch, r, c } => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                for bi in 0..batch {
                    let base = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            d[base + i * c + j] += gy[base + j * r + i];
                        }
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                d.iter_mut().for_each(|d| *d += gy[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                let s = gy[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Mse(a, b) => {
            let n = val(a).len() as f64;
            let coef = 2.0 * gy[0] / n;
            let diff: Vec<f64> = val(a).iter().zip(val(b)).map(|(x, y)| coef * (x - y)).collect();
            if let Some(d) = grad_slot(nodes, grads, a) {
                d.iter_mut().zip(&diff).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = grad_slot(nodes, grads, b) {
                d.iter_mut().zip(&diff).for_each(|(d, g)| *d -= g);
            }
        }
        Op::RowDot { a, b, d: dim } => {
            for (target, other) in [(a, b), (b, a)] {
                if let Some(d) = grad_slot(nodes, grads, target) {
                    for (r, g) in gy.iter().enumerate() {
                        let o = &val(other)[r * dim..(r + 1) * dim];
                        d[r * dim..(r + 1) * dim]
                            .iter_mut()
                            .zip(o)
                            .for_each(|(d, o)| *d += g * o);
                    }
                }
            }
        }
        Op::NormalizeRows { a, d: dim, ref norms } => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                for (r, n) in norms.iter().enumerate() {
                    let yr = &y[r * dim..(r + 1) * dim];
                    let gr = &gy[r * dim..(r + 1) * dim];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..dim {
                        d[r * dim + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            classes,
            ref targets,
            ref probs,
        } => {
            if let Some(d) = grad_slot(nodes, grads, logits) {
                let s = gy[0] / targets.len() as f64;
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        d[r * classes + c] += s * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(d) = grad_slot(nodes, grads, a) {
                d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
            }
        }
    }
}
