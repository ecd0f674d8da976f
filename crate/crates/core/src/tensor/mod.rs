//! Dense 64-bit arrays with a record-on-forward reverse-mode tape.
//!
//! Values live in [`Tensor`]s. Trainable parameters are grouped in a
//! [`ParamSet`]; a [`Graph`] copies them in as tracked leaves, records every
//! operation applied during the forward pass and, on [`Graph::backward`],
//! returns [`Gradients`] that can be accumulated back into the set.
//!
//! ```
//! use diffclone_core::tensor::{Graph, ParamSet, Tensor};
//!
//! let mut params = ParamSet::new();
//! let x = params.insert("x", Tensor::scalar(3.0));
//! let mut g = Graph::new();
//! let xv = g.param(&params, x);
//! let loss = g.mul(xv, xv).unwrap();
//! g.backward(loss).unwrap().accumulate_into(&mut params);
//! assert_eq!(params.get(x).grad().unwrap(), &[6.0]);
//! ```

mod graph;
mod optim;

pub use graph::{Gradients, Graph, Scope, Var};
pub use optim::Adam;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{bail, Result};

/// A dense row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            bail!(
                Shape,
                "shape {:?} holds {} elements but {} values were given",
                shape,
                numel,
                data.len()
            );
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// A single value, stored with shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a `[rows, cols]` matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            bail!(Shape, "cannot build a matrix from zero rows");
        };
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Shape, "ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Graphs copy their inputs, so a tensor
    /// is never aliased by a live tape.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            bail!(
                Shape,
                "gradient of length {} for tensor of {} elements",
                delta.len(),
                self.data.len()
            );
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    /// Value at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape;
        Ok(self)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        bail!(Shape, "dimensions must be positive, got {:?}", shape);
    }
    Ok(())
}

static NEXT_SET_TAG: AtomicU64 = AtomicU64::new(1);

fn fresh_tag() -> u64 {
    NEXT_SET_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Handle to one tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An ordered collection of named trainable tensors.
///
/// Every set carries a private tag so that a graph can tell apart two sets
/// with the same layout (an online network and its moving-average copy).
#[derive(Debug)]
pub struct ParamSet {
    tag: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            tag: fresh_tag(),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape && a.data == b.data)
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            tag: fresh_tag(),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Copies values from a set with an identical layout.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            bail!(
                Shape,
                "parameter sets hold {} and {} tensors",
                self.tensors.len(),
                other.tensors.len()
            );
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape != b.shape {
                bail!(
                    Shape,
                    "parameter {} ({}) has shape {:?} vs {:?}",
                    i,
                    self.names[i],
                    a.shape,
                    b.shape
                );
            }
        }
        Ok(())
    }

    /// Replaces all values from `(shape, data)` pairs in declaration order.
    pub fn load_arrays(&mut self, arrays: &[(Vec<usize>, Vec<f64>)]) -> Result<()> {
        if arrays.len() != self.tensors.len() {
            bail!(
                Format,
                "expected {} parameter arrays, found {}",
                self.tensors.len(),
                arrays.len()
            );
        }
        for (i, (t, (shape, data))) in self.tensors.iter_mut().zip(arrays).enumerate() {
            if &t.shape != shape || t.data.len() != data.len() {
                bail!(
                    Format,
                    "parameter {} ({}) expects shape {:?}, file has {:?}",
                    i,
                    self.names[i],
                    t.shape,
                    shape
                );
            }
            t.data.copy_from_slice(data);
        }
        Ok(())
    }
}

/// `c = a' * b' + beta * c` with `a'` = `[m, k]` and `b'` = `[k, n]`,
/// where each operand is either stored as given or transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index the kernel touches
    // (strides derived from m, k, n) lies inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}


#[cfg(test)]
mod op_tests;
