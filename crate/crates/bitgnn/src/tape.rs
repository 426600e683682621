//! Minimal reverse-mode automatic differentiation over dense 2-D
//! tensors.
//!
//! The tape is define-by-run: every forward pass records its own
//! operations in topological order and [`Tape::backward`] replays them
//! in reverse. Shape violations are programming errors and panic;
//! only `backward` on a non-scalar loss is a recoverable error.
//!
//! Neighborhood aggregation and the diffused log-sum-exp aggregator
//! are fused ops so their stabilized forward and exact backward live
//! next to the rest of the gradient rules.

use std::cell::RefCell;
use std::sync::Arc;

use thiserror::Error;

use crate::aggregators::AggregatorKind;
use crate::graph::Adjacency;
use crate::matrix::Matrix;
use crate::{cast, Scalar};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TapeError {
    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    LossNotScalar { rows: usize, cols: usize },
}

/// Recording tape. One tape per forward pass; single-threaded.
pub struct Tape<F: Scalar> {
    inner: RefCell<TapeInner<F>>,
}

struct TapeInner<F: Scalar> {
    values: Vec<Matrix<F>>,
    ops: Vec<Op<F>>,
}

struct Op<F: Scalar> {
    out: usize,
    kind: OpKind<F>,
}

enum OpKind<F: Scalar> {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    ScalarMul { a: usize, k: F },
    AddScalar { a: usize },
    AddBias { a: usize, bias: usize },
    MulCol { a: usize, col: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    Relu { a: usize },
    Abs { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sigmoid { a: usize },
    SignSte { a: usize },
    Softmax { a: usize, inv_tau: F },
    LogSoftmax { a: usize },
    SqrtGuarded { a: usize },
    SumRows { a: usize },
    MeanRows { a: usize },
    MaxRows { a: usize, argmax: Vec<usize> },
    SumAll { a: usize },
    MeanAll { a: usize },
    GatherCols { a: usize, idx: Arc<Vec<usize>> },
    SegmentMean { a: usize, segments: Arc<Vec<usize>>, counts: Vec<usize> },
    Aggregate { kind: AggregatorKind, a: usize, adj: Arc<Adjacency>, mean: Option<Matrix<F>>, arg: Option<Vec<usize>> },
    Ana { feats: usize, beta: usize, adj: Arc<Adjacency> },
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

/// Gradients produced by one backward pass, indexed by tape id.
#[derive(Debug)]
pub struct Gradients<F: Scalar> {
    grads: Vec<Matrix<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> &Matrix<F> {
        &self.grads[var.id]
    }

    pub fn get_id(&self, id: usize) -> &Matrix<F> {
        &self.grads[id]
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { inner: RefCell::new(TapeInner { values: Vec::new(), ops: Vec::new() }) }
    }

    /// Records a leaf tensor. Inputs, parameters and constants all
    /// enter this way; gradients are available for every leaf.
    pub fn leaf(&self, value: Matrix<F>) -> Var<'_, F> {
        self.push(value, OpKind::Leaf)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix<F>, kind: OpKind<F>) -> Var<'_, F> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(value);
        inner.ops.push(Op { out: id, kind });
        Var { tape: self, id }
    }

    fn with<R>(&self, f: impl FnOnce(&TapeInner<F>) -> R) -> R {
        f(&self.inner.borrow())
    }

    /// Reverse traversal from a 1x1 loss. Untouched tensors keep a
    /// zero gradient.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>, TapeError> {
        let inner = self.inner.borrow();
        let (lr, lc) = inner.values[loss.id].shape();
        if (lr, lc) != (1, 1) {
            return Err(TapeError::LossNotScalar { rows: lr, cols: lc });
        }
        let mut grads: Vec<Matrix<F>> = inner
            .values
            .iter()
            .map(|v| Matrix::zeros(v.rows(), v.cols()))
            .collect();
        grads[loss.id].set(0, 0, F::one());

        for op in inner.ops.iter().rev() {
            let g = std::mem::replace(&mut grads[op.out], Matrix::zeros(0, 0));
            backward_op(op, &inner.values, &g, &mut grads);
            grads[op.out] = g;
        }
        Ok(Gradients { grads })
    }
}

fn backward_op<F: Scalar>(
    op: &Op<F>,
    values: &[Matrix<F>],
    g: &Matrix<F>,
    grads: &mut [Matrix<F>],
) {
    match &op.kind {
        OpKind::Leaf => {}
        OpKind::MatMul { a, b } => {
            let ga = g.matmul(&values[*b].transpose());
            let gb = values[*a].transpose().matmul(g);
            add_into(&mut grads[*a], &ga);
            add_into(&mut grads[*b], &gb);
        }
        OpKind::Add { a, b } => {
            add_into(&mut grads[*a], g);
            add_into(&mut grads[*b], g);
        }
        OpKind::Sub { a, b } => {
            add_into(&mut grads[*a], g);
            sub_into(&mut grads[*b], g);
        }
        OpKind::MulElem { a, b } => {
            let (av, bv) = (&values[*a], &values[*b]);
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let gv = g.get(i, j);
                    let ga = grads[*a].get(i, j) + gv * bv.get(i, j);
                    grads[*a].set(i, j, ga);
                    let gb = grads[*b].get(i, j) + gv * av.get(i, j);
                    grads[*b].set(i, j, gb);
                }
            }
        }
        OpKind::ScalarMul { a, k } => {
            for (ga, &gv) in grads[*a].data_mut().iter_mut().zip(g.data()) {
                *ga += gv * *k;
            }
        }
        OpKind::AddScalar { a } => add_into(&mut grads[*a], g),
        OpKind::AddBias { a, bias } => {
            add_into(&mut grads[*a], g);
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let gb = grads[*bias].get(0, j) + g.get(i, j);
                    grads[*bias].set(0, j, gb);
                }
            }
        }
        OpKind::MulCol { a, col } => {
            let (av, cv) = (&values[*a], &values[*col]);
            for i in 0..g.rows() {
                let c = cv.get(i, 0);
                let mut acc = F::zero();
                for j in 0..g.cols() {
                    let gv = g.get(i, j);
                    let ga = grads[*a].get(i, j) + gv * c;
                    grads[*a].set(i, j, ga);
                    acc += gv * av.get(i, j);
                }
                let gc = grads[*col].get(i, 0) + acc;
                grads[*col].set(i, 0, gc);
            }
        }
        OpKind::ConcatCols { parts } => {
            let mut start = 0;
            for &p in parts {
                let w = values[p].cols();
                for i in 0..g.rows() {
                    for j in 0..w {
                        let gp = grads[p].get(i, j) + g.get(i, start + j);
                        grads[p].set(i, j, gp);
                    }
                }
                start += w;
            }
        }
        OpKind::SliceCols { a, start } => {
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let ga = grads[*a].get(i, start + j) + g.get(i, j);
                    grads[*a].set(i, start + j, ga);
                }
            }
        }
        OpKind::Relu { a } => {
            let av = &values[*a];
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    if av.get(i, j) > F::zero() {
                        let ga = grads[*a].get(i, j) + g.get(i, j);
                        grads[*a].set(i, j, ga);
                    }
                }
            }
        }
        OpKind::Abs { a } => {
            let av = &values[*a];
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let x = av.get(i, j);
                    let s = if x > F::zero() {
                        F::one()
                    } else if x < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                    let ga = grads[*a].get(i, j) + g.get(i, j) * s;
                    grads[*a].set(i, j, ga);
                }
            }
        }
        OpKind::Exp { a } => {
            let out = &values[op.out];
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let ga = grads[*a].get(i, j) + g.get(i, j) * out.get(i, j);
                    grads[*a].set(i, j, ga);
                }
            }
        }
        OpKind::Log { a } => {
            let av = &values[*a];
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let ga = grads[*a].get(i, j) + g.get(i, j) / av.get(i, j);
                    grads[*a].set(i, j, ga);
                }
            }
        }
        OpKind::Sigmoid { a } => {
            let out = &values[op.out];
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let s = out.get(i, j);
                    let ga = grads[*a].get(i, j) + g.get(i, j) * s * (F::one() - s);
                    grads[*a].set(i, j, ga);
                }
            }
        }
        OpKind::SignSte { a } => {
            // Straight-through rule: pass the gradient where the
            // latent lies in the open interval (-1, 1), zero elsewhere.
            let av = &values[*a];
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let x = av.get(i, j);
                    if x > -F::one() && x < F::one() {
                        let ga = grads[*a].get(i, j) + g.get(i, j);
                        grads[*a].set(i, j, ga);
                    }
                }
            }
        }
        OpKind::Softmax { a, inv_tau } => {
            let out = &values[op.out];
            for i in 0..g.rows() {
                let mut dot = F::zero();
                for j in 0..g.cols() {
                    dot += g.get(i, j) * out.get(i, j);
                }
                for j in 0..g.cols() {
                    let ga = grads[*a].get(i, j)
                        + *inv_tau * out.get(i, j) * (g.get(i, j) - dot);
                    grads[*a].set(i, j, ga);
                }
            }
        }
        OpKind::SqrtGuarded { a } => {
            // Subgradient 0 at the clamp boundary.
            let av = &values[*a];
            let out = &values[op.out];
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let o = out.get(i, j);
                    if av.get(i, j) > F::zero() && o > F::zero() {
                        let ga = grads[*a].get(i, j) + g.get(i, j) / (o + o);
                        grads[*a].set(i, j, ga);
                    }
                }
            }
        }
        OpKind::LogSoftmax { a } => {
            let out = &values[op.out];
            for i in 0..g.rows() {
                let gsum: F = g.row(i).iter().copied().sum();
                for j in 0..g.cols() {
                    let ga = grads[*a].get(i, j) + g.get(i, j)
                        - out.get(i, j).exp() * gsum;
                    grads[*a].set(i, j, ga);
                }
            }
        }
        OpKind::SumRows { a } => {
            for i in 0..values[*a].rows() {
                let gv = g.get(i, 0);
                for j in 0..values[*a].cols() {
                    let ga = grads[*a].get(i, j) + gv;
                    grads[*a].set(i, j, ga);
                }
            }
        }
        OpKind::MeanRows { a } => {
            let inv = F::one() / cast::<F>(values[*a].cols() as f64);
            for i in 0..values[*a].rows() {
                let gv = g.get(i, 0) * inv;
                for j in 0..values[*a].cols() {
                    let ga = grads[*a].get(i, j) + gv;
                    grads[*a].set(i, j, ga);
                }
            }
        }
        OpKind::MaxRows { a, argmax } => {
            for (i, &j) in argmax.iter().enumerate() {
                let ga = grads[*a].get(i, j) + g.get(i, 0);
                grads[*a].set(i, j, ga);
            }
        }
        OpKind::SumAll { a } => {
            let gv = g.get(0, 0);
            for ga in grads[*a].data_mut() {
                *ga += gv;
            }
        }
        OpKind::MeanAll { a } => {
            let n = values[*a].rows() * values[*a].cols();
            let gv = g.get(0, 0) / cast::<F>(n as f64);
            for ga in grads[*a].data_mut() {
                *ga += gv;
            }
        }
        OpKind::GatherCols { a, idx } => {
            for (i, &j) in idx.iter().enumerate() {
                let ga = grads[*a].get(i, j) + g.get(i, 0);
                grads[*a].set(i, j, ga);
            }
        }
        OpKind::SegmentMean { a, segments, counts } => {
            for (i, &s) in segments.iter().enumerate() {
                let inv = F::one() / cast::<F>(counts[s] as f64);
                for j in 0..values[*a].cols() {
                    let ga = grads[*a].get(i, j) + g.get(s, j) * inv;
                    grads[*a].set(i, j, ga);
                }
            }
        }
        OpKind::Aggregate { kind, a, adj, mean, arg } => {
            backward_aggregate(*kind, *a, adj, mean.as_ref(), arg.as_deref(), values, op.out, g, grads);
        }
        OpKind::Ana { feats, beta, adj } => {
            backward_ana(*feats, *beta, adj, values, op.out, g, grads);
        }
    }
}

fn add_into<F: Scalar>(acc: &mut Matrix<F>, delta: &Matrix<F>) {
    for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

fn sub_into<F: Scalar>(acc: &mut Matrix<F>, delta: &Matrix<F>) {
    for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a -= d;
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_aggregate<F: Scalar>(
    kind: AggregatorKind,
    a: usize,
    adj: &Adjacency,
    mean: Option<&Matrix<F>>,
    arg: Option<&[usize]>,
    values: &[Matrix<F>],
    out: usize,
    g: &Matrix<F>,
    grads: &mut [Matrix<F>],
) {
    let x = &values[a];
    let d = x.cols();
    match kind {
        AggregatorKind::Mean => {
            for i in 0..adj.num_nodes() {
                let inv = F::one() / cast::<F>(adj.in_degree(i) as f64);
                for &j in adj.in_neighbors(i) {
                    for c in 0..d {
                        let ga = grads[a].get(j, c) + g.get(i, c) * inv;
                        grads[a].set(j, c, ga);
                    }
                }
            }
        }
        AggregatorKind::Sum => {
            for i in 0..adj.num_nodes() {
                for &j in adj.in_neighbors(i) {
                    for c in 0..d {
                        let ga = grads[a].get(j, c) + g.get(i, c);
                        grads[a].set(j, c, ga);
                    }
                }
            }
        }
        AggregatorKind::Max | AggregatorKind::Min => {
            let arg = arg.expect("extremum aggregate records arg indices");
            for i in 0..adj.num_nodes() {
                for c in 0..d {
                    let j = arg[i * d + c];
                    let ga = grads[a].get(j, c) + g.get(i, c);
                    grads[a].set(j, c, ga);
                }
            }
        }
        AggregatorKind::Var => {
            let m = mean.expect("var aggregate records the neighborhood mean");
            for i in 0..adj.num_nodes() {
                let inv = F::one() / cast::<F>(adj.in_degree(i) as f64);
                let two = cast::<F>(2.0);
                for &j in adj.in_neighbors(i) {
                    for c in 0..d {
                        let delta = two * (x.get(j, c) - m.get(i, c)) * inv;
                        let ga = grads[a].get(j, c) + g.get(i, c) * delta;
                        grads[a].set(j, c, ga);
                    }
                }
            }
        }
        AggregatorKind::Std => {
            // d std / dx_j = (x_j - mean) / (deg * std); zero at zero
            // variance (subgradient choice).
            let m = mean.expect("std aggregate records the neighborhood mean");
            let s = &values[out];
            for i in 0..adj.num_nodes() {
                let inv = F::one() / cast::<F>(adj.in_degree(i) as f64);
                for &j in adj.in_neighbors(i) {
                    for c in 0..d {
                        let sv = s.get(i, c);
                        if sv > F::zero() {
                            let delta = (x.get(j, c) - m.get(i, c)) * inv / sv;
                            let ga = grads[a].get(j, c) + g.get(i, c) * delta;
                            grads[a].set(j, c, ga);
                        }
                    }
                }
            }
        }
    }
}

fn backward_ana<F: Scalar>(
    feats: usize,
    beta: usize,
    adj: &Adjacency,
    values: &[Matrix<F>],
    out: usize,
    g: &Matrix<F>,
    grads: &mut [Matrix<F>],
) {
    let x = &values[feats];
    let b = &values[beta];
    let o = &values[out];
    let d = x.cols();
    let mut w = Vec::new();
    for i in 0..adj.num_nodes() {
        let bi = b.get(i, 0);
        let nb = adj.in_neighbors(i);
        let mut gb = F::zero();
        for c in 0..d {
            // Recompute the stabilized softmax weights of the forward.
            let mut m = F::neg_infinity();
            for &j in nb {
                m = m.max(bi * x.get(j, c));
            }
            w.clear();
            let mut s = F::zero();
            for &j in nb {
                let e = (bi * x.get(j, c) - m).exp();
                w.push(e);
                s += e;
            }
            let gv = g.get(i, c);
            let mut ew_x = F::zero();
            for (&j, wj) in nb.iter().zip(&w) {
                let wj = *wj / s;
                ew_x += wj * x.get(j, c);
                let gx = grads[feats].get(j, c) + gv * wj;
                grads[feats].set(j, c, gx);
            }
            gb += gv * (ew_x - o.get(i, c)) / bi;
        }
        let gbv = grads[beta].get(i, 0) + gb;
        grads[beta].set(i, 0, gbv);
    }
}

#[allow(clippy::should_implement_trait)] // method-call style is the tape API
impl<'t, F: Scalar> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Clones the current value out of the tape.
    pub fn value(&self) -> Matrix<F> {
        self.tape.with(|t| t.values[self.id].clone())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.with(|t| t.values[self.id].shape())
    }

    fn unary(self, kind: impl FnOnce(usize) -> OpKind<F>, value: Matrix<F>) -> Var<'t, F> {
        self.tape.push(value, kind(self.id))
    }

    pub fn matmul(self, other: Var<'t, F>) -> Var<'t, F> {
        let value = self
            .tape
            .with(|t| t.values[self.id].matmul(&t.values[other.id]));
        self.tape.push(value, OpKind::MatMul { a: self.id, b: other.id })
    }

    /// Records a matmul-shaped op whose forward value was produced by
    /// an equivalent external kernel (the packed XNOR path).
    pub(crate) fn matmul_with_value(self, other: Var<'t, F>, value: Matrix<F>) -> Var<'t, F> {
        let (ar, ac) = self.shape();
        let (br, bc) = other.shape();
        assert_eq!(ac, br, "matmul shape mismatch");
        assert_eq!(value.shape(), (ar, bc), "kernel value shape mismatch");
        self.tape.push(value, OpKind::MatMul { a: self.id, b: other.id })
    }

    pub fn add(self, other: Var<'t, F>) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let (a, b) = (&t.values[self.id], &t.values[other.id]);
            assert_eq!(a.shape(), b.shape(), "add shape mismatch");
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + b.get(i, j))
        });
        self.tape.push(value, OpKind::Add { a: self.id, b: other.id })
    }

    pub fn sub(self, other: Var<'t, F>) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let (a, b) = (&t.values[self.id], &t.values[other.id]);
            assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) - b.get(i, j))
        });
        self.tape.push(value, OpKind::Sub { a: self.id, b: other.id })
    }

    pub fn mul_elem(self, other: Var<'t, F>) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let (a, b) = (&t.values[self.id], &t.values[other.id]);
            assert_eq!(a.shape(), b.shape(), "mul_elem shape mismatch");
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * b.get(i, j))
        });
        self.tape.push(value, OpKind::MulElem { a: self.id, b: other.id })
    }

    pub fn scalar_mul(self, k: F) -> Var<'t, F> {
        let value = self.tape.with(|t| t.values[self.id].map(|v| v * k));
        self.unary(move |a| OpKind::ScalarMul { a, k }, value)
    }

    pub fn add_scalar(self, k: F) -> Var<'t, F> {
        let value = self.tape.with(|t| t.values[self.id].map(|v| v + k));
        self.unary(|a| OpKind::AddScalar { a }, value)
    }

    pub fn neg(self) -> Var<'t, F> {
        self.scalar_mul(-F::one())
    }

    /// Broadcast-adds a `[1 x c]` bias row to every row.
    pub fn add_bias(self, bias: Var<'t, F>) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let (a, b) = (&t.values[self.id], &t.values[bias.id]);
            assert_eq!(b.rows(), 1, "bias must be a row vector");
            assert_eq!(a.cols(), b.cols(), "bias width mismatch");
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + b.get(0, j))
        });
        self.tape.push(value, OpKind::AddBias { a: self.id, bias: bias.id })
    }

    /// Scales row `i` by `col[i, 0]`.
    pub fn mul_col(self, col: Var<'t, F>) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let (a, c) = (&t.values[self.id], &t.values[col.id]);
            assert_eq!(c.cols(), 1, "column scale must be [n x 1]");
            assert_eq!(a.rows(), c.rows(), "column scale height mismatch");
            Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * c.get(i, 0))
        });
        self.tape.push(value, OpKind::MulCol { a: self.id, col: col.id })
    }

    pub fn concat_cols(parts: &[Var<'t, F>]) -> Var<'t, F> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let tape = parts[0].tape;
        let value = tape.with(|t| {
            let rows = t.values[parts[0].id].rows();
            let total: usize = parts.iter().map(|p| t.values[p.id].cols()).sum();
            let mut out = Matrix::zeros(rows, total);
            let mut start = 0;
            for p in parts {
                let m = &t.values[p.id];
                assert_eq!(m.rows(), rows, "concat row mismatch");
                for i in 0..rows {
                    out.row_mut(i)[start..start + m.cols()].copy_from_slice(m.row(i));
                }
                start += m.cols();
            }
            out
        });
        tape.push(value, OpKind::ConcatCols { parts: parts.iter().map(|p| p.id).collect() })
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let a = &t.values[self.id];
            assert!(start + width <= a.cols(), "slice out of range");
            Matrix::from_fn(a.rows(), width, |i, j| a.get(i, start + j))
        });
        self.unary(move |a| OpKind::SliceCols { a, start }, value)
    }

    pub fn relu(self) -> Var<'t, F> {
        let value = self.tape.with(|t| t.values[self.id].map(|v| v.max(F::zero())));
        self.unary(|a| OpKind::Relu { a }, value)
    }

    pub fn abs(self) -> Var<'t, F> {
        let value = self.tape.with(|t| t.values[self.id].map(|v| v.abs()));
        self.unary(|a| OpKind::Abs { a }, value)
    }

    pub fn exp(self) -> Var<'t, F> {
        let value = self.tape.with(|t| t.values[self.id].map(|v| v.exp()));
        self.unary(|a| OpKind::Exp { a }, value)
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(self) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let a = &t.values[self.id];
            assert!(
                a.iter().all(|&v| v > F::zero()),
                "log requires strictly positive inputs"
            );
            a.map(|v| v.ln())
        });
        self.unary(|a| OpKind::Log { a }, value)
    }

    pub fn sigmoid(self) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            t.values[self.id].map(|v| {
                if v >= F::zero() {
                    F::one() / (F::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (F::one() + e)
                }
            })
        });
        self.unary(|a| OpKind::Sigmoid { a }, value)
    }

    /// Sign binarization with the straight-through backward rule.
    /// `sign(0) = +1`.
    pub fn sign_ste(self) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            t.values[self.id].map(|v| if v >= F::zero() { F::one() } else { -F::one() })
        });
        self.unary(|a| OpKind::SignSte { a }, value)
    }

    /// Row-wise `softmax(x / temperature)` with max-subtraction.
    pub fn softmax(self, temperature: F) -> Var<'t, F> {
        assert!(temperature > F::zero(), "softmax temperature must be positive");
        let inv_tau = F::one() / temperature;
        let value = self.tape.with(|t| {
            let a = &t.values[self.id];
            let mut out = Matrix::zeros(a.rows(), a.cols());
            for i in 0..a.rows() {
                let m = a.row(i).iter().copied().fold(F::neg_infinity(), F::max) * inv_tau;
                let mut s = F::zero();
                for j in 0..a.cols() {
                    let e = (a.get(i, j) * inv_tau - m).exp();
                    out.set(i, j, e);
                    s += e;
                }
                for j in 0..a.cols() {
                    out.set(i, j, out.get(i, j) / s);
                }
            }
            out
        });
        self.unary(move |a| OpKind::Softmax { a, inv_tau }, value)
    }

    /// Elementwise `sqrt(max(x, 0))` with subgradient 0 at zero.
    pub fn sqrt_guarded(self) -> Var<'t, F> {
        let value = self
            .tape
            .with(|t| t.values[self.id].map(|v| v.max(F::zero()).sqrt()));
        self.unary(|a| OpKind::SqrtGuarded { a }, value)
    }

    /// Row-wise log-softmax with max-subtraction.
    pub fn log_softmax(self) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let a = &t.values[self.id];
            let mut out = Matrix::zeros(a.rows(), a.cols());
            for i in 0..a.rows() {
                let m = a.row(i).iter().copied().fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for j in 0..a.cols() {
                    s += (a.get(i, j) - m).exp();
                }
                let lse = m + s.ln();
                for j in 0..a.cols() {
                    out.set(i, j, a.get(i, j) - lse);
                }
            }
            out
        });
        self.unary(|a| OpKind::LogSoftmax { a }, value)
    }

    /// Reduces each row to its sum, producing `[r x 1]`.
    pub fn sum_rows(self) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let a = &t.values[self.id];
            Matrix::from_fn(a.rows(), 1, |i, _| a.row(i).iter().copied().sum())
        });
        self.unary(|a| OpKind::SumRows { a }, value)
    }

    /// Reduces each row to its mean, producing `[r x 1]`.
    pub fn mean_rows(self) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let a = &t.values[self.id];
            let cols = cast::<F>(a.cols() as f64);
            Matrix::from_fn(a.rows(), 1, |i, _| {
                a.row(i).iter().copied().sum::<F>() / cols
            })
        });
        self.unary(|a| OpKind::MeanRows { a }, value)
    }

    /// Reduces each row to its maximum; gradient routes to the first
    /// argmax entry.
    pub fn max_rows(self) -> Var<'t, F> {
        let (value, argmax) = self.tape.with(|t| {
            let a = &t.values[self.id];
            let mut arg = Vec::with_capacity(a.rows());
            let value = Matrix::from_fn(a.rows(), 1, |i, _| {
                let row = a.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                arg.push(best);
                row[best]
            });
            (value, arg)
        });
        self.unary(move |a| OpKind::MaxRows { a, argmax }, value)
    }

    pub fn sum_all(self) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            Matrix::from_vec(1, 1, vec![t.values[self.id].iter().copied().sum()])
        });
        self.unary(|a| OpKind::SumAll { a }, value)
    }

    pub fn mean_all(self) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let a = &t.values[self.id];
            let n = cast::<F>((a.rows() * a.cols()) as f64);
            Matrix::from_vec(1, 1, vec![a.iter().copied().sum::<F>() / n])
        });
        self.unary(|a| OpKind::MeanAll { a }, value)
    }

    /// Picks entry `idx[i]` from row `i`, producing `[r x 1]`.
    pub fn gather_cols(self, idx: Arc<Vec<usize>>) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let a = &t.values[self.id];
            assert_eq!(idx.len(), a.rows(), "gather index length mismatch");
            Matrix::from_fn(a.rows(), 1, |i, _| {
                assert!(idx[i] < a.cols(), "gather index out of range");
                a.get(i, idx[i])
            })
        });
        self.unary(move |a| OpKind::GatherCols { a, idx }, value)
    }

    /// Mean-pools rows by segment id, producing `[num_segments x c]`.
    /// Segment ids must be sorted and cover `0..num_segments`.
    pub fn segment_mean(self, segments: Arc<Vec<usize>>, num_segments: usize) -> Var<'t, F> {
        let (value, counts) = self.tape.with(|t| {
            let a = &t.values[self.id];
            assert_eq!(segments.len(), a.rows(), "segment map length mismatch");
            let mut counts = vec![0usize; num_segments];
            for &s in segments.iter() {
                counts[s] += 1;
            }
            assert!(counts.iter().all(|&c| c > 0), "every segment must be non-empty");
            let mut out = Matrix::zeros(num_segments, a.cols());
            for (i, &s) in segments.iter().enumerate() {
                for j in 0..a.cols() {
                    out.set(s, j, out.get(s, j) + a.get(i, j));
                }
            }
            for (s, &count) in counts.iter().enumerate() {
                let deg = cast::<F>(count as f64);
                for j in 0..a.cols() {
                    out.set(s, j, out.get(s, j) / deg);
                }
            }
            (out, counts)
        });
        self.unary(move |a| OpKind::SegmentMean { a, segments, counts }, value)
    }

    /// Neighborhood aggregation over the CSR rows of `adj`. Row `i` of
    /// the output is the statistic over `{x[j] : j in in_neighbors(i)}`
    /// per feature channel.
    pub fn aggregate(self, kind: AggregatorKind, adj: &Arc<Adjacency>) -> Var<'t, F> {
        let (value, mean, arg) = self.tape.with(|t| {
            let x = &t.values[self.id];
            assert_eq!(
                x.rows(),
                adj.num_nodes(),
                "feature rows must equal node count"
            );
            aggregate_forward(kind, x, adj)
        });
        self.tape.push(
            value,
            OpKind::Aggregate { kind, a: self.id, adj: Arc::clone(adj), mean, arg },
        )
    }

    /// Diffused aggregation: row `i`, channel `c` is
    /// `(1/beta_i) * (log sum_j exp(beta_i * x[j][c]) - log deg_i)`,
    /// evaluated with max-subtraction.
    pub fn ana(self, beta: Var<'t, F>, adj: &Arc<Adjacency>) -> Var<'t, F> {
        let value = self.tape.with(|t| {
            let x = &t.values[self.id];
            let b = &t.values[beta.id];
            assert_eq!(x.rows(), adj.num_nodes(), "feature rows must equal node count");
            assert_eq!(b.shape(), (adj.num_nodes(), 1), "beta must be [n x 1]");
            ana_forward(x, b, adj)
        });
        self.tape.push(
            value,
            OpKind::Ana { feats: self.id, beta: beta.id, adj: Arc::clone(adj) },
        )
    }
}

type AggForward<F> = (Matrix<F>, Option<Matrix<F>>, Option<Vec<usize>>);

fn aggregate_forward<F: Scalar>(
    kind: AggregatorKind,
    x: &Matrix<F>,
    adj: &Adjacency,
) -> AggForward<F> {
    let n = adj.num_nodes();
    let d = x.cols();
    let mut out = Matrix::zeros(n, d);
    match kind {
        AggregatorKind::Mean | AggregatorKind::Sum => {
            for i in 0..n {
                let nb = adj.in_neighbors(i);
                let deg = cast::<F>(nb.len() as f64);
                for c in 0..d {
                    let mut acc = F::zero();
                    for &j in nb {
                        acc += x.get(j, c);
                    }
                    if kind == AggregatorKind::Mean {
                        acc /= deg;
                    }
                    out.set(i, c, acc);
                }
            }
            (out, None, None)
        }
        AggregatorKind::Max | AggregatorKind::Min => {
            let want_max = kind == AggregatorKind::Max;
            let mut arg = vec![0usize; n * d];
            for i in 0..n {
                let nb = adj.in_neighbors(i);
                for c in 0..d {
                    let mut best_j = nb[0];
                    let mut best = x.get(best_j, c);
                    for &j in &nb[1..] {
                        let v = x.get(j, c);
                        if (want_max && v > best) || (!want_max && v < best) {
                            best = v;
                            best_j = j;
                        }
                    }
                    out.set(i, c, best);
                    arg[i * d + c] = best_j;
                }
            }
            (out, None, Some(arg))
        }
        AggregatorKind::Var | AggregatorKind::Std => {
            let mut mean = Matrix::zeros(n, d);
            for i in 0..n {
                let nb = adj.in_neighbors(i);
                let deg = cast::<F>(nb.len() as f64);
                for c in 0..d {
                    let mut s = F::zero();
                    let mut sq = F::zero();
                    for &j in nb {
                        let v = x.get(j, c);
                        s += v;
                        sq += v * v;
                    }
                    let m = s / deg;
                    mean.set(i, c, m);
                    // Population variance, clamped against float dips
                    // below zero.
                    let v = (sq / deg - m * m).max(F::zero());
                    out.set(i, c, if kind == AggregatorKind::Var { v } else { v.sqrt() });
                }
            }
            (out, Some(mean), None)
        }
    }
}

fn ana_forward<F: Scalar>(x: &Matrix<F>, b: &Matrix<F>, adj: &Adjacency) -> Matrix<F> {
    let n = adj.num_nodes();
    let d = x.cols();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let bi = b.get(i, 0);
        let nb = adj.in_neighbors(i);
        let log_deg = cast::<F>(nb.len() as f64).ln();
        for c in 0..d {
            let mut m = F::neg_infinity();
            for &j in nb {
                m = m.max(bi * x.get(j, c));
            }
            let mut s = F::zero();
            for &j in nb {
                s += (bi * x.get(j, c) - m).exp();
            }
            out.set(i, c, (m + s.ln() - log_deg) / bi);
        }
    }
    out
}
