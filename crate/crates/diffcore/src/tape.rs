//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! Every operation is evaluated eagerly when it is recorded, so the tape
//! doubles as the forward pass. Nodes that do not depend on any parameter
//! are marked as constants and skipped by [`Tape::backward`].

use crate::array::{gemm, Array};
use crate::{DiffError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Silu(Var),
    Elu(Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    Clip { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    BroadcastRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Shape errors inside individual operations are programming errors and
/// panic; user-facing entry points (e.g. [`crate::Mlp::forward_tape`]) check
/// shapes up front and return [`DiffError`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Array {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Array::zeros(&self.shapes[v.0]),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (m, k) = (xv.rows(), xv.cols());
        assert_eq!(wv.shape().len(), 2, "affine weight must be 2-D");
        assert_eq!(wv.shape()[0], k, "affine inner dimension");
        let n = wv.shape()[1];
        assert_eq!(bv.len(), n, "affine bias length");
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm(m, k, n, xv.data(), false, wv.data(), false, &mut out, true);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Array::matrix(m, n, out), Op::Affine { x, w, b }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.shape(),
            bv.shape(),
            "elementwise op on mismatched shapes"
        );
        let value = av.zip_map(bv, f);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; the gradient follows the selected operand
    /// (the first one on ties).
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Minimum(a, b), f64::min)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Clamps into `[lo, hi]`. The gradient passes through unchanged inside
    /// the closed band and is exactly zero where the clamp is active.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clip bounds out of order");
        self.unary(a, Op::Clip { x: a, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Array::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.sum() / av.len() as f64;
        let ng = self.ng(a);
        self.push(Array::scalar(m), Op::Mean(a), ng)
    }

    /// Sums over the last axis: `[.., n] -> [rows, 1]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let out: Vec<f64> = av.data().chunks(c).map(|row| row.iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Array::matrix(r, 1, out), Op::SumLast(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .reshaped(shape)
            .expect("reshape must preserve element count");
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    /// Repeats a single row `[1, n]` (or `[n]`) into `[rows, n]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        let n = av.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(av.data());
        }
        let ng = self.ng(a);
        self.push(Array::matrix(rows, n, out), Op::BroadcastRows(a), ng)
    }

    /// Replays the tape backward from a scalar `loss`.
    ///
    /// A tape can be replayed once; parameters that do not reach the loss
    /// receive zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Array>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array::filled(&loss_shape, 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep their gradients; intermediate buffers are dropped.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, delta: Array, nodes: &[Node]| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let nodes = &self.nodes;
        match node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (m, k, nn) = (xv.rows(), xv.cols(), wv.shape()[1]);
                if nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; k * nn];
                    gemm(k, m, nn, xv.data(), true, g.data(), false, &mut dw, false);
                    acc(w, Array::new(wv.shape().to_vec(), dw).unwrap(), nodes);
                }
                if nodes[b.0].needs_grad {
                    let mut db = vec![0.0; nn];
                    for row in g.data().chunks(nn) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    let shape = nodes[b.0].value.shape().to_vec();
                    acc(b, Array::new(shape, db).unwrap(), nodes);
                }
                if nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, nn, k, g.data(), false, wv.data(), true, &mut dx, false);
                    let shape = xv.shape().to_vec();
                    acc(x, Array::new(shape, dx).unwrap(), nodes);
                }
            }
            Op::Add(a, b) => {
                acc(a, g.clone(), nodes);
                acc(b, g.clone(), nodes);
            }
            Op::Sub(a, b) => {
                acc(a, g.clone(), nodes);
                acc(b, g.map(|v| -v), nodes);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if nodes[a.0].needs_grad {
                    acc(a, g.zip_map(bv, |g, y| g * y), nodes);
                }
                if nodes[b.0].needs_grad {
                    acc(b, g.zip_map(av, |g, x| g * x), nodes);
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let pick_a: Vec<bool> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| x <= y)
                    .collect();
                let mut ga = g.clone();
                let mut gb = g.clone();
                for ((da, db), &pa) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(gb.data_mut().iter_mut())
                    .zip(&pick_a)
                {
                    if pa {
                        *db = 0.0;
                    } else {
                        *da = 0.0;
                    }
                }
                acc(a, ga, nodes);
                acc(b, gb, nodes);
            }
            Op::Scale(a, s) => acc(a, g.map(|v| v * s), nodes),
            Op::Offset(a) | Op::Reshape(a) => {
                let shape = nodes[a.0].value.shape().to_vec();
                acc(a, g.reshaped(&shape).unwrap(), nodes);
            }
            Op::Tanh(a) => acc(a, g.zip_map(out, |g, y| g * (1.0 - y * y)), nodes),
            Op::Silu(a) => {
                let xv = &nodes[a.0].value;
                acc(
                    a,
                    g.zip_map(xv, |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    }),
                    nodes,
                );
            }
            Op::Elu(a) => {
                let xv = &nodes[a.0].value;
                let d = xv.zip_map(out, |x, y| if x > 0.0 { 1.0 } else { y + 1.0 });
                acc(a, g.zip_map(&d, |g, d| g * d), nodes);
            }
            Op::Square(a) => {
                let xv = &nodes[a.0].value;
                acc(a, g.zip_map(xv, |g, x| 2.0 * g * x), nodes);
            }
            Op::Exp(a) => acc(a, g.zip_map(out, |g, y| g * y), nodes),
            Op::Log(a) => {
                let xv = &nodes[a.0].value;
                acc(a, g.zip_map(xv, |g, x| g / x), nodes);
            }
            Op::Clip { x, lo, hi } => {
                let xv = &nodes[x.0].value;
                acc(
                    x,
                    g.zip_map(xv, |g, v| if (lo..=hi).contains(&v) { g } else { 0.0 }),
                    nodes,
                );
            }
            Op::Sum(a) => {
                let shape = nodes[a.0].value.shape().to_vec();
                acc(a, Array::filled(&shape, g.item()), nodes);
            }
            Op::Mean(a) => {
                let av = &nodes[a.0].value;
                let v = g.item() / av.len() as f64;
                acc(a, Array::filled(av.shape(), v), nodes);
            }
            Op::SumLast(a) => {
                let av = &nodes[a.0].value;
                let c = av.cols();
                let mut d = Vec::with_capacity(av.len());
                for &gi in g.data() {
                    d.extend(std::iter::repeat_n(gi, c));
                }
                acc(a, Array::new(av.shape().to_vec(), d).unwrap(), nodes);
            }
            Op::BroadcastRows(a) => {
                let av = &nodes[a.0].value;
                let n = av.len();
                let mut d = vec![0.0; n];
                for row in g.data().chunks(n) {
                    d.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                }
                acc(a, Array::new(av.shape().to_vec(), d).unwrap(), nodes);
            }
        }
    }
}
