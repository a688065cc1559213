//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Values are computed as soon as an op is recorded; `backward` walks the
//! tape in reverse and accumulates parameter gradients into a [`GradStore`]
//! keyed by [`crate::nn::ParamId`]. Shape mismatches in graph builders are
//! programming errors and panic; the public contract surfaces
//! ([`Graph::backward`] and friends) return [`crate::error::Result`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamSet};
use crate::tensor::{self, PatchGeom, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MinElem(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    /// ln(max(x, floor)); subgradient 0 where the floor is active.
    LnFloor(Var, f64),
    Sqrt(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MulRows(Var, Var),
    SubRows(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// One-hot sample per row; gradient follows the softmax probabilities.
    StraightThrough { logits: Var, probs: Tensor },
    Detach(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { input: Var, start: usize, len: usize },
    Reshape(Var),
    Transpose(Var),
    Im2Col(Var, PatchGeom),
    Col2Im(Var, PatchGeom),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Accumulated parameter gradients, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn new(params: &ParamSet) -> Self {
        GradStore { grads: vec![None; params.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn accumulate(&mut self, id: ParamId, shape: &[usize], grad: &[f64]) {
        let slot = &mut self.grads[id.index()];
        match slot {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                *slot = Some(Tensor::new(shape.to_vec(), grad.to_vec()).expect("grad shape"));
            }
        }
    }

    /// L2 norm over every stored gradient.
    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for g in self.grads.iter().flatten() {
            for v in g.data() {
                sq += v * v;
            }
        }
        sq.sqrt()
    }

    /// Scale every stored gradient in place.
    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}

/// Eager autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("rank >= 1");
    let rows: usize = shape[..shape.len() - 1].iter().product();
    (rows, cols)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, t, false)
    }

    /// Insert a trainable parameter leaf; its gradient is routed to `id`.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        self.push(Op::Leaf { param: Some(id) }, set.get(id).clone(), true)
    }

    /// Leaf that participates in autodiff without being a parameter
    /// (used by gradient checks on inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, t, true)
    }

    // ── Elementwise and arithmetic ───────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), t, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "sub: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), t, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), t, rg)
    }

    /// Elementwise minimum; gradient follows the smaller input (ties go to `a`).
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "min: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x.min(*y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MinElem(a, b), t, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| c * x).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), t, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| c + x).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::AddScalar(a, c), t, rg)
    }

    /// `[R,C] + [C]` broadcast along rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (rows, cols) = rows_cols(ta.shape());
        assert_eq!(tb.shape(), [cols], "add_bias: bias shape mismatch");
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            for (j, bv) in tb.data().iter().enumerate() {
                data[r * cols + j] += bv;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::AddBias(a, b), t, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, ka) = ta.dims2().expect("matmul lhs must be 2-d");
        let (kb, n) = tb.dims2().expect("matmul rhs must be 2-d");
        assert_eq!(ka, kb, "matmul: inner dims {ka} vs {kb}");
        let data = tensor::matmul_nn(ta.data(), tb.data(), m, ka, n);
        let t = Tensor::new(vec![m, n], data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), t, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Relu(a), t, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Tanh(a), t, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), t, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.exp()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Exp(a), t, rg)
    }

    /// Natural log with a lower floor inside: `ln(max(x, floor))`.
    pub fn ln_floor(&mut self, a: Var, floor: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.max(floor).ln()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::LnFloor(a, floor), t, rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.sqrt()).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Sqrt(a), t, rg)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| 1.0 / x).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Recip(a), t, rg)
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Clamp(a, lo, hi), t, rg)
    }

    // ── Reductions and row ops ───────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let s: f64 = ta.data().iter().sum::<f64>() / ta.len() as f64;
        let rg = self.rg(a);
        self.push(Op::Mean(a), Tensor::scalar(s), rg)
    }

    /// Sum along the last axis: `[.., C] -> [..]` (flattened to `[R]`).
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = rows_cols(ta.shape());
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = ta.data()[r * cols..(r + 1) * cols].iter().sum();
        }
        let rg = self.rg(a);
        self.push(Op::SumCols(a), Tensor::from_vec(data), rg)
    }

    /// Multiply row `r` of `a` by `s[r]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        let (rows, cols) = rows_cols(ta.shape());
        assert_eq!(ts.len(), rows, "mul_rows: scale length mismatch");
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let sv = ts.data()[r];
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v *= sv;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(s);
        self.push(Op::MulRows(a, s), t, rg)
    }

    /// Subtract `s[r]` from every entry in row `r` of `a`.
    pub fn sub_rows(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        let (rows, cols) = rows_cols(ta.shape());
        assert_eq!(ts.len(), rows, "sub_rows: length mismatch");
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let sv = ts.data()[r];
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v -= sv;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(s);
        self.push(Op::SubRows(a, s), t, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = rows_cols(ta.shape());
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), t, rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = rows_cols(ta.shape());
        let mut data = ta.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::LogSoftmaxRows(a), t, rg)
    }

    /// Sample an exact one-hot row from `softmax(logits)` per row; the
    /// backward pass routes the output gradient through the softmax
    /// probabilities unchanged.
    pub fn straight_through(&mut self, logits: Var, rng: &mut impl Rng) -> Var {
        let ta = &self.nodes[logits.0].value;
        assert!(ta.is_finite(), "straight_through: non-finite logits");
        let (rows, cols) = rows_cols(ta.shape());
        let mut probs = ta.data().to_vec();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &mut probs[r * cols..(r + 1) * cols];
            softmax_in_place(row);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = cols - 1;
            for (j, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            out[r * cols + pick] = 1.0;
        }
        let probs = Tensor::new(ta.shape().to_vec(), probs).unwrap();
        let value = Tensor::new(ta.shape().to_vec(), out).unwrap();
        let rg = self.rg(logits);
        self.push(Op::StraightThrough { logits, probs }, value, rg)
    }

    /// Identity forward, zero gradient backward.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.clone();
        self.push(Op::Detach(a), t, false)
    }

    // ── Shape ops ────────────────────────────────────────────────────

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = rows_cols(self.nodes[parts[0].0].value.shape()).0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = rows_cols(self.nodes[p.0].value.shape());
            assert_eq!(r, rows, "concat_cols: row mismatch");
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![rows, total], data).unwrap();
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::ConcatCols(parts.to_vec()), t, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = rows_cols(self.nodes[parts[0].0].value.shape()).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = rows_cols(self.nodes[p.0].value.shape());
            assert_eq!(c, cols, "concat_rows: col mismatch");
            data.extend_from_slice(self.nodes[p.0].value.data());
            rows += r;
        }
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::ConcatRows(parts.to_vec()), t, rg)
    }

    /// Columns `[start, start+len)` of a 2-d (or row-flattened) tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = rows_cols(ta.shape());
        assert!(start + len <= cols, "slice_cols: out of range");
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&ta.data()[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], data).unwrap();
        let rg = self.rg(a);
        self.push(Op::SliceCols { input: a, start, len }, t, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.nodes[a.0].value.reshape(shape).expect("reshape numel");
        let rg = self.rg(a);
        self.push(Op::Reshape(a), t, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = ta.dims2().expect("transpose needs 2-d");
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = ta.data()[r * cols + c];
            }
        }
        let t = Tensor::new(vec![cols, rows], data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), t, rg)
    }

    /// Sliding-patch extraction over an NHWC batch; `a` must have shape
    /// `[B, H, W, C]` matching `geom`.
    pub fn im2col(&mut self, a: Var, geom: PatchGeom) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(
            ta.shape(),
            [geom.batch, geom.height, geom.width, geom.channels],
            "im2col: geometry mismatch"
        );
        let data = tensor::im2col(ta.data(), geom);
        let t = Tensor::new(vec![geom.rows(), geom.cols()], data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Im2Col(a, geom), t, rg)
    }

    /// Adjoint patch scatter: `a` has shape `[geom.rows(), geom.cols()]`
    /// and the output is the NHWC batch `[B, H, W, C]` of `geom`.
    pub fn col2im(&mut self, a: Var, geom: PatchGeom) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape(), [geom.rows(), geom.cols()], "col2im: geometry mismatch");
        let data = tensor::col2im(ta.data(), geom);
        let t =
            Tensor::new(vec![geom.batch, geom.height, geom.width, geom.channels], data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Col2Im(a, geom), t, rg)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar `loss`; parameter gradients are
    /// accumulated into `store` (repeated calls keep accumulating).
    pub fn backward(&mut self, loss: Var, store: &mut GradStore) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads, store);
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to a single `input` leaf (for
    /// gradient checks on non-parameter inputs).
    pub fn backward_input(&mut self, loss: Var, input: Var) -> Result<Tensor> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract("backward requires a scalar loss"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut dummy = GradStore { grads: Vec::new() };
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            if id == input.0 {
                continue; // keep its accumulated slot
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads, &mut dummy);
        }
        let shape = self.nodes[input.0].value.shape().to_vec();
        let data = grads[input.0].take().unwrap_or_else(|| vec![0.0; self.nodes[input.0].value.len()]);
        Ok(Tensor::new(shape, data).unwrap())
    }

    fn propagate(
        &self,
        id: usize,
        g: &[f64],
        grads: &mut Vec<Option<Vec<f64>>>,
        store: &mut GradStore,
    ) {
        let add_to = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, contrib: &[f64]| {
            let slot = &mut grads[v.0];
            match slot {
                Some(buf) => {
                    for (a, b) in buf.iter_mut().zip(contrib) {
                        *a += b;
                    }
                }
                None => *slot = Some(contrib.to_vec()),
            }
        };
        // Like add_to but skips nodes that do not require grad.
        macro_rules! send {
            ($v:expr, $contrib:expr) => {
                if self.nodes[$v.0].requires_grad {
                    add_to(grads, $v, $contrib);
                }
            };
        }

        match &self.nodes[id].op {
            Op::Leaf { param } => {
                if let Some(pid) = param {
                    store.accumulate(*pid, self.nodes[id].value.shape(), g);
                }
            }
            Op::Add(a, b) => {
                send!(*a, g);
                send!(*b, g);
            }
            Op::Sub(a, b) => {
                send!(*a, g);
                if self.nodes[b.0].requires_grad {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_to(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let vb = self.nodes[b.0].value.data();
                    let contrib: Vec<f64> = g.iter().zip(vb).map(|(gv, bv)| gv * bv).collect();
                    add_to(grads, *a, &contrib);
                }
                if self.nodes[b.0].requires_grad {
                    let va = self.nodes[a.0].value.data();
                    let contrib: Vec<f64> = g.iter().zip(va).map(|(gv, av)| gv * av).collect();
                    add_to(grads, *b, &contrib);
                }
            }
            Op::MinElem(a, b) => {
                let va = self.nodes[a.0].value.data();
                let vb = self.nodes[b.0].value.data();
                if self.nodes[a.0].requires_grad {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(gv, (x, y))| if x <= y { *gv } else { 0.0 })
                        .collect();
                    add_to(grads, *a, &contrib);
                }
                if self.nodes[b.0].requires_grad {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(gv, (x, y))| if x <= y { 0.0 } else { *gv })
                        .collect();
                    add_to(grads, *b, &contrib);
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[a.0].requires_grad {
                    let contrib: Vec<f64> = g.iter().map(|v| c * v).collect();
                    add_to(grads, *a, &contrib);
                }
            }
            Op::AddScalar(a, _) => send!(*a, g),
            Op::AddBias(a, b) => {
                send!(*a, g);
                if self.nodes[b.0].requires_grad {
                    let cols = self.nodes[b.0].value.len();
                    let rows = g.len() / cols;
                    let mut contrib = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            contrib[j] += g[r * cols + j];
                        }
                    }
                    add_to(grads, *b, &contrib);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().1;
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ
                    let da = tensor::matmul_nt(g, self.nodes[b.0].value.data(), m, n, k);
                    add_to(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB[k,n] = A[m,k]ᵀ · dC[m,n]
                    let db = tensor::matmul_tn(self.nodes[a.0].value.data(), g, k, m, n);
                    add_to(grads, *b, &db);
                }
            }
            Op::Relu(a) => {
                if self.nodes[a.0].requires_grad {
                    let va = self.nodes[a.0].value.data();
                    // Subgradient at 0 is 0 by convention.
                    let contrib: Vec<f64> =
                        g.iter().zip(va).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect();
                    add_to(grads, *a, &contrib);
                }
            }
            Op::Tanh(a) => {
                if self.nodes[a.0].requires_grad {
                    let y = self.nodes[id].value.data();
                    let contrib: Vec<f64> =
                        g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                    add_to(grads, *a, &contrib);
                }
            }
            Op::Sigmoid(a) => {
                if self.nodes[a.0].requires_grad {
                    let y = self.nodes[id].value.data();
                    let contrib: Vec<f64> =
                        g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                    add_to(grads, *a, &contrib);
                }
            }
            Op::Exp(a) => {
                if self.nodes[a.0].requires_grad {
                    let y = self.nodes[id].value.data();
                    let contrib: Vec<f64> = g.iter().zip(y).map(|(gv, yv)| gv * yv).collect();
                    add_to(grads, *a, &contrib);
                }
            }
            Op::LnFloor(a, floor) => {
                if self.nodes[a.0].requires_grad {
                    let va = self.nodes[a.0].value.data();
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(va)
                        .map(|(gv, x)| if *x >= *floor { gv / x } else { 0.0 })
                        .collect();
                    add_to(grads, *a, &contrib);
                }
            }
            Op::Sqrt(a) => {
                if self.nodes[a.0].requires_grad {
                    let y = self.nodes[id].value.data();
                    let contrib: Vec<f64> =
                        g.iter().zip(y).map(|(gv, yv)| gv * 0.5 / yv).collect();
                    add_to(grads, *a, &contrib);
                }
            }
            Op::Recip(a) => {
                if self.nodes[a.0].requires_grad {
                    let va = self.nodes[a.0].value.data();
                    let contrib: Vec<f64> =
                        g.iter().zip(va).map(|(gv, x)| -gv / (x * x)).collect();
                    add_to(grads, *a, &contrib);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.nodes[a.0].requires_grad {
                    let va = self.nodes[a.0].value.data();
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(va)
                        .map(|(gv, x)| if *x >= *lo && *x <= *hi { *gv } else { 0.0 })
                        .collect();
                    add_to(grads, *a, &contrib);
                }
            }
            Op::Sum(a) => {
                if self.nodes[a.0].requires_grad {
                    let contrib = vec![g[0]; self.nodes[a.0].value.len()];
                    add_to(grads, *a, &contrib);
                }
            }
            Op::Mean(a) => {
                if self.nodes[a.0].requires_grad {
                    let n = self.nodes[a.0].value.len() as f64;
                    let contrib = vec![g[0] / n; self.nodes[a.0].value.len()];
                    add_to(grads, *a, &contrib);
                }
            }
            Op::SumCols(a) => {
                if self.nodes[a.0].requires_grad {
                    let (rows, cols) = rows_cols(self.nodes[a.0].value.shape());
                    let mut contrib = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            contrib[r * cols + j] = g[r];
                        }
                    }
                    add_to(grads, *a, &contrib);
                }
            }
            Op::MulRows(a, s) => {
                let (rows, cols) = rows_cols(self.nodes[a.0].value.shape());
                if self.nodes[a.0].requires_grad {
                    let sv = self.nodes[s.0].value.data();
                    let mut contrib = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            contrib[r * cols + j] = g[r * cols + j] * sv[r];
                        }
                    }
                    add_to(grads, *a, &contrib);
                }
                if self.nodes[s.0].requires_grad {
                    let va = self.nodes[a.0].value.data();
                    let mut contrib = vec![0.0; rows];
                    for r in 0..rows {
                        for j in 0..cols {
                            contrib[r] += g[r * cols + j] * va[r * cols + j];
                        }
                    }
                    add_to(grads, *s, &contrib);
                }
            }
            Op::SubRows(a, s) => {
                let (rows, cols) = rows_cols(self.nodes[a.0].value.shape());
                send!(*a, g);
                if self.nodes[s.0].requires_grad {
                    let mut contrib = vec![0.0; rows];
                    for r in 0..rows {
                        for j in 0..cols {
                            contrib[r] -= g[r * cols + j];
                        }
                    }
                    add_to(grads, *s, &contrib);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.nodes[a.0].requires_grad {
                    let y = self.nodes[id].value.data();
                    let (rows, cols) = rows_cols(self.nodes[id].value.shape());
                    let contrib = softmax_backward(y, g, rows, cols);
                    add_to(grads, *a, &contrib);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.nodes[a.0].requires_grad {
                    let y = self.nodes[id].value.data();
                    let (rows, cols) = rows_cols(self.nodes[id].value.shape());
                    let mut contrib = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gsum: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                        for j in 0..cols {
                            let p = y[r * cols + j].exp();
                            contrib[r * cols + j] = g[r * cols + j] - p * gsum;
                        }
                    }
                    add_to(grads, *a, &contrib);
                }
            }
            Op::StraightThrough { logits, probs } => {
                if self.nodes[logits.0].requires_grad {
                    let (rows, cols) = rows_cols(probs.shape());
                    let contrib = softmax_backward(probs.data(), g, rows, cols);
                    add_to(grads, *logits, &contrib);
                }
            }
            Op::Detach(_) => {}
            Op::ConcatCols(parts) => {
                let total: usize =
                    parts.iter().map(|p| rows_cols(self.nodes[p.0].value.shape()).1).sum();
                let rows = rows_cols(self.nodes[id].value.shape()).0;
                let mut off = 0;
                for p in parts {
                    let w = rows_cols(self.nodes[p.0].value.shape()).1;
                    if self.nodes[p.0].requires_grad {
                        let mut contrib = vec![0.0; rows * w];
                        for r in 0..rows {
                            contrib[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        add_to(grads, *p, &contrib);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if self.nodes[p.0].requires_grad {
                        add_to(grads, *p, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceCols { input, start, len } => {
                if self.nodes[input.0].requires_grad {
                    let (rows, cols) = rows_cols(self.nodes[input.0].value.shape());
                    let mut contrib = vec![0.0; rows * cols];
                    for r in 0..rows {
                        contrib[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    add_to(grads, *input, &contrib);
                }
            }
            Op::Reshape(a) => send!(*a, g),
            Op::Transpose(a) => {
                if self.nodes[a.0].requires_grad {
                    let (rows, cols) = self.nodes[a.0].value.dims2().unwrap();
                    // g has shape [cols, rows]; transpose it back.
                    let mut contrib = vec![0.0; rows * cols];
                    for c in 0..cols {
                        for r in 0..rows {
                            contrib[r * cols + c] = g[c * rows + r];
                        }
                    }
                    add_to(grads, *a, &contrib);
                }
            }
            Op::Im2Col(a, geom) => {
                if self.nodes[a.0].requires_grad {
                    let contrib = tensor::col2im(g, *geom);
                    add_to(grads, *a, &contrib);
                }
            }
            Op::Col2Im(a, geom) => {
                if self.nodes[a.0].requires_grad {
                    let contrib = tensor::im2col(g, *geom);
                    add_to(grads, *a, &contrib);
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn softmax_backward(probs: &[f64], g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let p = &probs[r * cols..(r + 1) * cols];
        let gr = &g[r * cols..(r + 1) * cols];
        let dot: f64 = p.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
        for j in 0..cols {
            out[r * cols + j] = p[j] * (gr[j] - dot);
        }
    }
    out
}
