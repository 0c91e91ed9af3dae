//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar result walks the record in reverse and
//! returns [`Gradients`] for every leaf created with [`Tape::param`].
//!
//! Nodes are appended in creation order and an operation can only consume
//! nodes that already exist, so reverse index order is a reverse topological
//! order and every node is visited exactly once.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    SubRow(usize, usize),
    DivRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    ColMean(usize),
    Transpose(usize),
    Reshape(usize),
    NormalizeRows {
        x: usize,
        eps: f64,
    },
    GatherRows {
        x: usize,
        ids: Vec<usize>,
    },
    RowDot(usize, usize),
    /// Fused scalar-valued function whose local gradient was computed during
    /// the forward pass.
    ScalarFn {
        x: usize,
        local_grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar with respect to the `requires_grad` leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, or `None` if `var` is not a `requires_grad` leaf.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a scalar function of `x` whose value and gradient were computed
    /// outside the tape.
    pub fn scalar_fn<'t>(&'t self, x: Var<'t>, value: f64, local_grad: Vec<f64>) -> Result<Var<'t>> {
        self.check_same_tape(x)?;
        let numel = x.numel();
        if local_grad.len() != numel {
            return Err(Error::shape(format!("local gradient has {} entries for input of {numel}", local_grad.len())));
        }
        let rg = x.requires_grad();
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x: x.id, local_grad }, rg))
    }

    fn check_same_tape(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::Contract("variable belongs to a different tape".into()))
        }
    }

    /// Reverse pass from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_same_tape(loss)?;
        if self.consumed.replace(true) {
            return Err(Error::Contract("tape already consumed by a backward pass".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        if !root.value.all_finite() {
            return Err(Error::numerical(format!("loss is not finite: {}", root.value.data()[0])));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for k in (0..=loss.id).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &nodes[k];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[k] = Some(g);
                continue;
            }
            propagate(&nodes, &mut grads, node, &g);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => {
                    let shape = node.value.shape().to_vec();
                    Some(match g {
                        Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                        None => Tensor::zeros(shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Adds into the gradient buffer of node `i`, allocating it on first use.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[i].requires_grad {
        return;
    }
    let buf = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]);
    f(buf);
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let out = node.value.data();
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
            let n = nodes[*b].value.shape()[1];
            // dA = dC · Bᵀ, dB = Aᵀ · dC
            accumulate(nodes, grads, *a, |ga| gemm(m, n, k, g, false, val(*b), true, ga, 1.0));
            accumulate(nodes, grads, *b, |gb| gemm(k, m, n, val(*a), true, g, false, gb, 1.0));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| add_into(ga, g));
            accumulate(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, &d)| *o -= d));
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(g.iter().zip(val(*b))).for_each(|(o, (&d, &y))| *o += d * y)
            });
            accumulate(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(g.iter().zip(val(*a))).for_each(|(o, (&d, &x))| *o += d * x)
            });
        }
        Op::AddRow(x, b) | Op::SubRow(x, b) => {
            let sign = if matches!(node.op, Op::AddRow(..)) { 1.0 } else { -1.0 };
            let d = nodes[*b].value.numel();
            accumulate(nodes, grads, *x, |gx| add_into(gx, g));
            accumulate(nodes, grads, *b, |gb| {
                for row in g.chunks_exact(d) {
                    gb.iter_mut().zip(row).for_each(|(o, &r)| *o += sign * r);
                }
            });
        }
        Op::DivRow(x, s) => {
            let sv = val(*s);
            let d = sv.len();
            accumulate(nodes, grads, *x, |gx| {
                for (gr, row) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                    gr.iter_mut().zip(row.iter().zip(sv)).for_each(|(o, (&r, &s))| *o += r / s);
                }
            });
            accumulate(nodes, grads, *s, |gs| {
                for (row, xr) in g.chunks_exact(d).zip(val(*x).chunks_exact(d)) {
                    for j in 0..d {
                        gs[j] -= row[j] * xr[j] / (sv[j] * sv[j]);
                    }
                }
            });
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, &d)| *o += c * d)),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, |gx| add_into(gx, g)),
        Op::Relu(x) => accumulate(nodes, grads, *x, |gx| {
            gx.iter_mut().zip(g.iter().zip(val(*x))).for_each(|(o, (&d, &v))| {
                if v > 0.0 {
                    *o += d
                }
            })
        }),
        Op::Square(x) => accumulate(nodes, grads, *x, |gx| {
            gx.iter_mut().zip(g.iter().zip(val(*x))).for_each(|(o, (&d, &v))| *o += 2.0 * v * d)
        }),
        Op::Sqrt(x) => accumulate(nodes, grads, *x, |gx| {
            gx.iter_mut().zip(g.iter().zip(out)).for_each(|(o, (&d, &y))| *o += 0.5 * d / y)
        }),
        Op::Exp(x) => accumulate(nodes, grads, *x, |gx| {
            gx.iter_mut().zip(g.iter().zip(out)).for_each(|(o, (&d, &y))| *o += d * y)
        }),
        Op::Log(x) => accumulate(nodes, grads, *x, |gx| {
            gx.iter_mut().zip(g.iter().zip(val(*x))).for_each(|(o, (&d, &v))| *o += d / v)
        }),
        Op::Sum(x) => accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0])),
        Op::Mean(x) => {
            let n = nodes[*x].value.numel() as f64;
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0] / n))
        }
        Op::ColMean(x) => {
            let d = g.len();
            let n = nodes[*x].value.numel() / d.max(1);
            accumulate(nodes, grads, *x, |gx| {
                for row in gx.chunks_exact_mut(d) {
                    row.iter_mut().zip(g).for_each(|(o, &r)| *o += r / n as f64);
                }
            })
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            })
        }
        Op::NormalizeRows { x, eps } => {
            let xv = &nodes[*x].value;
            let d = xv.cols();
            accumulate(nodes, grads, *x, |gx| {
                for ((gr, dr), (xr, yr)) in gx
                    .chunks_exact_mut(d)
                    .zip(g.chunks_exact(d))
                    .zip(xv.data().chunks_exact(d).zip(out.chunks_exact(d)))
                {
                    let norm = dot(xr, xr).sqrt();
                    if norm > *eps {
                        let proj = dot(yr, dr);
                        for j in 0..d {
                            gr[j] += (dr[j] - yr[j] * proj) / norm;
                        }
                    } else {
                        gr.iter_mut().zip(dr).for_each(|(o, &r)| *o += r / eps);
                    }
                }
            })
        }
        Op::GatherRows { x, ids } => {
            let d = nodes[*x].value.cols();
            accumulate(nodes, grads, *x, |gx| {
                for (row, &id) in g.chunks_exact(d).zip(ids) {
                    add_into(&mut gx[id * d..(id + 1) * d], row);
                }
            })
        }
        Op::RowDot(a, b) => {
            let d = nodes[*a].value.cols();
            accumulate(nodes, grads, *a, |ga| {
                for ((o, br), &gi) in ga.chunks_exact_mut(d).zip(val(*b).chunks_exact(d)).zip(g) {
                    o.iter_mut().zip(br).for_each(|(o, &v)| *o += gi * v);
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((o, ar), &gi) in gb.chunks_exact_mut(d).zip(val(*a).chunks_exact(d)).zip(g) {
                    o.iter_mut().zip(ar).for_each(|(o, &v)| *o += gi * v);
                }
            });
        }
        Op::ScalarFn { x, local_grad } => {
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().zip(local_grad).for_each(|(o, &l)| *o += g[0] * l))
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the recorded value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> Result<f64> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        self.tape.check_same_tape(other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    fn zip_same(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.binary(other, op, |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, Op::MatMul(a, b), |x, y| {
            let (xs, ys) = (x.shape(), y.shape());
            if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
                return Err(Error::shape(format!("matmul {xs:?} · {ys:?}")));
            }
            let (m, k, n) = (xs[0], xs[1], ys[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, x.data(), false, y.data(), false, &mut out, 0.0);
            Tensor::new(vec![m, n], out)
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    fn row_broadcast(self, row: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.binary(row, op, |x, r| {
            let d = x.cols();
            if r.numel() != d || r.shape().len() > 1 {
                return Err(Error::shape(format!("row {:?} against {:?}", r.shape(), x.shape())));
            }
            let mut data = x.data().to_vec();
            for chunk in data.chunks_exact_mut(d) {
                chunk.iter_mut().zip(r.data()).for_each(|(v, &b)| *v = f(*v, b));
            }
            Tensor::new(x.shape().to_vec(), data)
        })
    }

    /// Adds a length-`d` vector to every row (bias broadcast).
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(row, Op::AddRow(self.id, row.id), |x, b| x + b)
    }

    pub fn sub_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(row, Op::SubRow(self.id, row.id), |x, b| x - b)
    }

    pub fn div_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.row_broadcast(row, Op::DivRow(self.id, row.id), |x, b| x / b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|v| c * v))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |t| t.map(|v| v + c))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |t| t.map(|v| v.max(0.0)))
    }

    /// `max(0, x)`; identical to [`relu`](Self::relu), named for hinge losses.
    pub fn hinge(self) -> Var<'t> {
        self.relu()
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |t| t.map(|v| v * v))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary(Op::Sqrt(self.id), |t| t.map(f64::sqrt)))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(Op::Log(self.id), |t| t.map(f64::ln)))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.data().iter().sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |t| Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64))
    }

    /// Mean over rows: `[n×d] -> [d]`.
    pub fn col_mean(self) -> Var<'t> {
        self.unary(Op::ColMean(self.id), |t| {
            let d = t.cols();
            let mut acc = vec![0.0; d];
            for row in t.data().chunks_exact(d) {
                add_into(&mut acc, row);
            }
            let n = t.rows() as f64;
            Tensor::vector(acc.into_iter().map(|v| v / n).collect())
        })
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!("transpose needs a matrix, got {shape:?}")));
        }
        Ok(self.unary(Op::Transpose(self.id), |t| {
            let (r, c) = (shape[0], shape[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = t.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], data).expect("transpose shape")
        }))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Scales every row (last dimension) to unit L2 norm; rows with norm at
    /// most `eps` are divided by `eps` instead.
    pub fn l2_normalize_rows(self, eps: f64) -> Var<'t> {
        self.unary(Op::NormalizeRows { x: self.id, eps }, |t| {
            let d = t.cols();
            let mut data = t.data().to_vec();
            for row in data.chunks_exact_mut(d) {
                let norm = dot(row, row).sqrt().max(eps);
                row.iter_mut().for_each(|v| *v /= norm);
            }
            Tensor::new(t.shape().to_vec(), data).expect("normalize shape")
        })
    }

    /// Selects rows by index (duplicates allowed): output `[ids.len() × d]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            let (n, d) = (t.rows(), t.cols());
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= n {
                    return Err(Error::Index { index: id, len: n });
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::GatherRows { x: self.id, ids: ids.to_vec() }, rg))
    }

    /// Per-row inner product of two equally shaped tensors: `[n×d] -> [n]`.
    pub fn row_dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::RowDot(self.id, other.id), |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!("row_dot {:?} vs {:?}", a.shape(), b.shape())));
            }
            let d = a.cols();
            let data = a.data().chunks_exact(d).zip(b.data().chunks_exact(d)).map(|(x, y)| dot(x, y)).collect();
            Ok(Tensor::vector(data))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` at every entry of `inputs[which]`.
    fn numeric_grad(inputs: &[Tensor], which: usize, f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> Vec<f64> {
        let h = 1e-5;
        let eval = |inputs: &[Tensor]| {
            let tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            f(&tape, &vars).item().unwrap()
        };
        (0..inputs[which].numel())
            .map(|j| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[j] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn check_grads(inputs: Vec<Tensor>, f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (which, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v).unwrap();
            let numeric = numeric_grad(&inputs, which, f);
            for (a, n) in analytic.data().iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
                assert!(rel < 1e-5, "input {which}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = tape.constant(m.clone());
        assert_eq!(eye.matmul(b).unwrap().value(), m);

        let r = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let c = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random(vec![3, 3], &mut rng), random(vec![3, 3], &mut rng)];
        check_grads(inputs, &|_, v| v[0].matmul(v[1]).unwrap().sum());
        let inputs = vec![random(vec![2, 4], &mut rng), random(vec![4, 3], &mut rng)];
        check_grads(inputs, &|_, v| v[0].matmul(v[1]).unwrap().square().mean());
    }

    #[test]
    fn normalize_rows_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let y = x.l2_normalize_rows(1e-12).value();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);

        let z = tape.constant(Tensor::zeros(vec![1, 2])).l2_normalize_rows(1e-12).value();
        assert_eq!(z.data(), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = tape.constant(random(vec![8, 5], &mut rng)).l2_normalize_rows(1e-12).value();
        for i in 0..8 {
            assert!((dot(r.row(i), r.row(i)).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_rows_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(vec![4, 3], &mut rng);
        check_grads(vec![random(vec![4, 3], &mut rng)], &move |t, v| {
            let w = t.constant(w.clone());
            v[0].l2_normalize_rows(1e-12).mul(w).unwrap().sum()
        });
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let y = tape.constant(Tensor::vector(vec![2.0, 4.0, 6.0]));
        assert_eq!(y.mean().item().unwrap(), 4.0);
        assert!(matches!(x.log(), Err(Error::Domain(_))));
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(vec![3, 4], &mut rng);
        let b = random(vec![3, 4], &mut rng);
        let row = random(vec![4], &mut rng);
        let pos = a.map(|v| v.abs() + 0.5);

        check_grads(vec![a.clone(), b.clone()], &|_, v| v[0].add(v[1]).unwrap().square().sum());
        check_grads(vec![a.clone(), b.clone()], &|_, v| v[0].sub(v[1]).unwrap().square().mean());
        check_grads(vec![a.clone(), b.clone()], &|_, v| v[0].mul(v[1]).unwrap().sum());
        check_grads(vec![a.clone()], &|_, v| v[0].scale(-2.5).add_scalar(1.0).square().sum());
        check_grads(vec![a.clone()], &|_, v| v[0].relu().square().sum());
        check_grads(vec![a.clone()], &|_, v| v[0].hinge().sum());
        check_grads(vec![a.clone()], &|_, v| v[0].exp().mean());
        check_grads(vec![pos.clone()], &|_, v| v[0].log().unwrap().sum());
        check_grads(vec![pos.clone()], &|_, v| v[0].sqrt().unwrap().sum());
        check_grads(vec![a.clone()], &|_, v| v[0].transpose().unwrap().square().col_mean().sum());
        check_grads(vec![a.clone(), row.clone()], &|_, v| v[0].add_row(v[1]).unwrap().square().sum());
        check_grads(vec![a.clone(), row.clone()], &|_, v| v[0].sub_row(v[1]).unwrap().square().sum());
        check_grads(vec![a.clone(), row.map(|v| v.abs() + 0.5)], &|_, v| v[0].div_row(v[1]).unwrap().square().sum());
        check_grads(vec![a.clone(), b.clone()], &|_, v| v[0].row_dot(v[1]).unwrap().square().sum());
        check_grads(vec![a.clone()], &|_, v| {
            v[0].gather_rows(&[2, 0, 2]).unwrap().reshape(vec![4, 3]).unwrap().square().sum()
        });
    }

    #[test]
    fn backward_simple_cases() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let g = tape.backward(x.square().sum()).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_contracts() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_without_params_is_noop() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let g = tape.backward(x.square().sum()).unwrap();
        assert!(g.is_empty());
        assert!(g.wrt(x).is_none());
    }

    #[test]
    fn duplicate_gather_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let loss = x.gather_rows(&[1, 1, 1]).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 3.0, 3.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0]));
        let y = tape.param(Tensor::vector(vec![5.0, 6.0]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1000.0]));
        let loss = x.exp().exp().sum();
        assert!(matches!(tape.backward(loss), Err(Error::Numerical(_))));
    }
}
