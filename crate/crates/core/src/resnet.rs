//! Residual MLPs producing the scale and shift of a coupling layer.
//!
//! Architecture, for input width `D` and hidden width `H`:
//!
//! ```text
//! h₀  = W_in x + b_in                         (D → H)
//! hₖ  = relu(hₖ₋₁ + W₂ relu(W₁ hₖ₋₁ + b₁) + b₂)  (H → H, per block)
//! pre = W_out h_last + b_out                   (H → D)
//! y   = s_max · tanh(pre)   for scale nets with a bound, else pre
//! ```
//!
//! All parameters live in one flat vector in serialization order:
//! `W_in` (row-major), `b_in`, then `W₁, b₁, W₂, b₂` per block, then `W_out`, `b_out`.
//! Gradients use the same layout, which keeps the optimizer and checkpoint code
//! layout-agnostic.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::linalg::{add_transposed_product, mul, mul_transposed, Matrix};
use crate::rng;

pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_BLOCKS: usize = 2;
pub const DEFAULT_SCALE_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Scale,
    Translation,
}

/// Bounding nonlinearity applied to scale-net outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleBound {
    Tanh { max: f64 },
    Unbounded,
}

impl Default for ScaleBound {
    fn default() -> Self {
        ScaleBound::Tanh { max: DEFAULT_SCALE_MAX }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
}

/// One dense layer's position inside the flat parameter vector.
#[derive(Debug, Clone)]
struct DenseSlot {
    weight: Range<usize>,
    bias: Range<usize>,
    out: usize,
    inp: usize,
}

impl NetShape {
    pub fn new(dim: usize, hidden: usize, blocks: usize) -> Self {
        Self { dim, hidden, blocks }
    }

    pub fn param_count(&self) -> usize {
        let (d, h) = (self.dim, self.hidden);
        d * h + h + self.blocks * 2 * (h * h + h) + h * d + d
    }

    fn slots(&self) -> Vec<DenseSlot> {
        let (d, h) = (self.dim, self.hidden);
        let mut dims = vec![(h, d)];
        dims.extend(std::iter::repeat_n((h, h), 2 * self.blocks));
        dims.push((d, h));
        let mut at = 0;
        dims.into_iter()
            .map(|(out, inp)| {
                let weight = at..at + out * inp;
                let bias = weight.end..weight.end + out;
                at = bias.end;
                DenseSlot { weight, bias, out, inp }
            })
            .collect()
    }
}

/// Gradient with respect to every parameter of a [`ResidualNet`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle(Vec<f64>);

impl GradientBundle {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        assert_eq!(self.0.len(), other.0.len(), "gradient shape");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|v| *v *= k);
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

/// Intermediates recorded by [`ResidualNet::forward_batch`].
#[derive(Debug, Clone)]
pub struct Tape {
    shape: NetShape,
    input: Matrix,
    /// `h₀ … h_last`
    hidden: Vec<Matrix>,
    /// `W₁ h + b₁` per block, before the inner relu.
    inner: Vec<Matrix>,
    /// Residual sum per block, before the block relu.
    summed: Vec<Matrix>,
    pre: Matrix,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.input.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNet {
    shape: NetShape,
    kind: OutputKind,
    bound: ScaleBound,
    params: Vec<f64>,
}

fn relu_in_place(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

fn relu_mask_in_place(grad: &mut Matrix, pre: &Matrix) {
    for (g, &p) in grad.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

impl ResidualNet {
    /// Fan-in scaled uniform weights, zero biases, and an all-zero output layer.
    pub fn init<R: Rng + ?Sized>(shape: NetShape, kind: OutputKind, bound: ScaleBound, rng: &mut R) -> Self {
        let mut params = vec![0.0; shape.param_count()];
        let slots = shape.slots();
        let last = slots.len() - 1;
        for slot in &slots[..last] {
            let limit = 1.0 / (slot.inp as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            for w in &mut params[slot.weight.clone()] {
                *w = dist.sample(rng);
            }
        }
        Self { shape, kind, bound, params }
    }

    pub fn from_params(shape: NetShape, kind: OutputKind, bound: ScaleBound, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(Error::CorruptPayload(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                params.len()
            )));
        }
        Ok(Self { shape, kind, bound, params })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn kind(&self) -> OutputKind {
        self.kind
    }

    pub fn bound(&self) -> ScaleBound {
        self.bound
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Adds `N(0, scale²)` noise to every parameter.
    pub fn perturb<R: Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for p in &mut self.params {
            let n: f64 = StandardNormal.sample(rng);
            *p += scale * n;
        }
    }

    fn dense(&self, x: &Matrix, slot: &DenseSlot) -> Matrix {
        let mut y = mul_transposed(x, &self.params[slot.weight.clone()], slot.out);
        y.add_row_vector(&self.params[slot.bias.clone()]);
        y
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        if x.cols() != self.shape.dim {
            return Err(Error::InvalidConfig(format!("net expects width {}, got {}", self.shape.dim, x.cols())));
        }
        let slots = self.shape.slots();
        let mut hidden = Vec::with_capacity(self.shape.blocks + 1);
        let mut inner = Vec::with_capacity(self.shape.blocks);
        let mut summed = Vec::with_capacity(self.shape.blocks);
        hidden.push(self.dense(x, &slots[0]));
        for b in 0..self.shape.blocks {
            let h = hidden.last().expect("h0 pushed");
            let a1 = self.dense(h, &slots[1 + 2 * b]);
            let mut r1 = a1.clone();
            relu_in_place(&mut r1);
            let mut u = self.dense(&r1, &slots[2 + 2 * b]);
            for (v, hv) in u.as_mut_slice().iter_mut().zip(h.as_slice()) {
                *v += hv;
            }
            let mut next = u.clone();
            relu_in_place(&mut next);
            inner.push(a1);
            summed.push(u);
            hidden.push(next);
        }
        let pre = self.dense(hidden.last().expect("non-empty"), &slots[slots.len() - 1]);
        let mut y = pre.clone();
        if let (OutputKind::Scale, ScaleBound::Tanh { max }) = (self.kind, self.bound) {
            y.as_mut_slice().iter_mut().for_each(|v| *v = max * v.tanh());
        }
        if !y.all_finite() {
            return Err(Error::NonFiniteActivation("residual net output"));
        }
        let tape = Tape { shape: self.shape, input: x.clone(), hidden, inner, summed, pre };
        Ok((y, tape))
    }

    /// Forward pass without keeping the tape.
    pub fn eval_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_batch(x).map(|(y, _)| y)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let (y, tape) = self.forward_batch(&Matrix::from_vec(1, x.len(), x.to_vec()))?;
        Ok((y.into_vec(), tape))
    }

    /// Reverse pass for `Σ upstream ⊙ y` summed over the batch.
    ///
    /// Returns the parameter gradient and the gradient with respect to the input rows.
    pub fn backward_batch(&self, tape: &Tape, upstream: &Matrix) -> Result<(GradientBundle, Matrix)> {
        if tape.shape != self.shape
            || tape.hidden.len() != self.shape.blocks + 1
            || upstream.rows() != tape.rows()
            || upstream.cols() != self.shape.dim
        {
            return Err(Error::TapeMismatch(format!(
                "tape {:?} x {} rows, net {:?}, upstream {}x{}",
                tape.shape,
                tape.rows(),
                self.shape,
                upstream.rows(),
                upstream.cols()
            )));
        }
        let slots = self.shape.slots();
        let mut grad = vec![0.0; self.params.len()];

        let mut dpre = upstream.clone();
        if let (OutputKind::Scale, ScaleBound::Tanh { max }) = (self.kind, self.bound) {
            for (g, &p) in dpre.as_mut_slice().iter_mut().zip(tape.pre.as_slice()) {
                let t = p.tanh();
                *g *= max * (1.0 - t * t);
            }
        }

        let out = &slots[slots.len() - 1];
        let h_last = tape.hidden.last().expect("non-empty");
        add_transposed_product(&dpre, h_last, &mut grad[out.weight.clone()]);
        dpre.add_column_sums_into(&mut grad[out.bias.clone()]);
        let mut dh = mul(&dpre, &self.params[out.weight.clone()], out.inp);

        for b in (0..self.shape.blocks).rev() {
            let (l1, l2) = (&slots[1 + 2 * b], &slots[2 + 2 * b]);
            let mut du = dh;
            relu_mask_in_place(&mut du, &tape.summed[b]);
            let mut r1 = tape.inner[b].clone();
            relu_in_place(&mut r1);
            add_transposed_product(&du, &r1, &mut grad[l2.weight.clone()]);
            du.add_column_sums_into(&mut grad[l2.bias.clone()]);
            let mut da1 = mul(&du, &self.params[l2.weight.clone()], l2.inp);
            relu_mask_in_place(&mut da1, &tape.inner[b]);
            let h_prev = &tape.hidden[b];
            add_transposed_product(&da1, h_prev, &mut grad[l1.weight.clone()]);
            da1.add_column_sums_into(&mut grad[l1.bias.clone()]);
            let through = mul(&da1, &self.params[l1.weight.clone()], l1.inp);
            for (d, t) in du.as_mut_slice().iter_mut().zip(through.as_slice()) {
                *d += t;
            }
            dh = du;
        }

        let inp = &slots[0];
        add_transposed_product(&dh, &tape.input, &mut grad[inp.weight.clone()]);
        dh.add_column_sums_into(&mut grad[inp.bias.clone()]);
        let dx = mul(&dh, &self.params[inp.weight.clone()], inp.inp);
        Ok((GradientBundle(grad), dx))
    }

    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(GradientBundle, Vec<f64>)> {
        let up = Matrix::from_vec(1, upstream.len(), upstream.to_vec());
        let (g, dx) = self.backward_batch(tape, &up)?;
        Ok((g, dx.into_vec()))
    }
}

/// Seeded initialization of a standalone net.
pub fn init_params(seed: u64, shape: NetShape, kind: OutputKind, bound: ScaleBound) -> ResidualNet {
    let mut r = rng::stream(seed, rng::purpose::INIT);
    ResidualNet::init(shape, kind, bound, &mut r)
}
