//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive as a node in creation order, so parent
//! ids always precede their children and a single reverse sweep in
//! [`Tape::backward`] visits nodes in reverse topological order. Leaves are
//! either parameters (gradients wanted) or constants (no gradient, and no
//! backward work is spent on subgraphs that only depend on constants).
//!
//! The pure forward kernels ([`matmul`], [`conv2d`], [`softmax_with_temperature`]
//! and friends) are public so they can be used without a tape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How a loss reduces over the rows of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// The attack goal encoded by [`Tape::margin`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MarginGoal {
    /// Push the true class below the best other class.
    Untargeted(Vec<usize>),
    /// Push the given target class above every other class.
    Targeted(Vec<usize>),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
    },
    Relu(Var),
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
    Softmax {
        logits: Var,
        temperature: f64,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
        reduction: Reduction,
    },
    KlDivergence {
        target: Tensor,
        probs: Var,
        reduction: Reduction,
    },
    Margin {
        logits: Var,
        goal: MarginGoal,
        kappa: f64,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => vec![*input, *kernels, *bias],
            Op::Relu(x) | Op::Reshape(x) | Op::Scale(x, _) | Op::Sum(x) | Op::SumSquares(x) => {
                vec![*x]
            }
            Op::Softmax { logits, .. } | Op::Margin { logits, .. } => vec![*logits],
            Op::CrossEntropy { probs, .. } | Op::KlDivergence { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if `var` was reachable
    /// and depends on a parameter.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// A single-use record of forward computations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf treated as a fixed input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(op, value, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(Op::MatMul(a, b), value))
    }

    /// Adds a `[n]` bias to every row of a `[m×n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = add_bias(self.value(x), self.value(bias))?;
        Ok(self.push_op(Op::AddBias(x, bias), value))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let value = conv2d(self.value(input), self.value(kernels), self.value(bias), stride)?;
        Ok(self.push_op(
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
            },
            value,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = relu(self.value(x));
        self.push_op(Op::Relu(x), value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push_op(Op::Reshape(x), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(Op::Add(a, b), value))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push_op(Op::Scale(x, factor), value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push_op(Op::Sum(x), value)
    }

    /// Squared L2 norm of all elements.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        self.push_op(Op::SumSquares(x), value)
    }

    pub fn softmax(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        let value = softmax_with_temperature(self.value(logits), temperature)?;
        Ok(self.push_op(
            Op::Softmax {
                logits,
                temperature,
            },
            value,
        ))
    }

    /// Cross-entropy of probability rows against class labels.
    pub fn cross_entropy(
        &mut self,
        probs: Var,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let loss = batched_cross_entropy(self.value(probs), labels, reduction)?;
        Ok(self.push_op(
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                reduction,
            },
            Tensor::scalar(loss),
        ))
    }

    /// `KL(target ‖ probs)` with a fixed target distribution, reduced over rows.
    pub fn kl_divergence(
        &mut self,
        target: &Tensor,
        probs: Var,
        reduction: Reduction,
    ) -> Result<Var> {
        let q = self.value(probs);
        if target.shape() != q.shape() {
            return Err(Error::shape(
                "kl_divergence",
                format!("{:?} vs {:?}", target.shape(), q.shape()),
            ));
        }
        let rows = row_count(q);
        let k = q.len() / rows;
        let mut total = 0.0;
        for r in 0..rows {
            total += kl_row(&target.data()[r * k..(r + 1) * k], &q.data()[r * k..(r + 1) * k]);
        }
        let value = reduce(total, rows, reduction);
        Ok(self.push_op(
            Op::KlDivergence {
                target: target.clone(),
                probs,
                reduction,
            },
            Tensor::scalar(value),
        ))
    }

    /// Sum over rows of the clipped logit margin
    /// `max(Z_y − max_{i≠y} Z_i, −κ)` (untargeted) or
    /// `max(max_{i≠t} Z_i − Z_t, −κ)` (targeted).
    pub fn margin(&mut self, logits: Var, goal: MarginGoal, kappa: f64) -> Result<Var> {
        let z = self.value(logits);
        let rows = row_count(z);
        let classes = goal_classes(&goal);
        if classes.len() != rows {
            return Err(Error::shape(
                "margin",
                format!("{} labels for {rows} rows", classes.len()),
            ));
        }
        let k = z.len() / rows;
        let mut total = 0.0;
        for (r, &c) in classes.iter().enumerate() {
            let row = &z.data()[r * k..(r + 1) * k];
            let m = margin_terms(row, c, matches!(goal, MarginGoal::Targeted(_)))?;
            total += m.value.max(-kappa);
        }
        Ok(self.push_op(
            Op::Margin {
                logits,
                goal,
                kappa,
            },
            Tensor::scalar(total),
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            for (parent, contribution) in self.local_grads(node, &upstream)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut v = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    v.push((*a, matmul_transposed_rhs(g, tb)));
                }
                if self.nodes[b.0].requires_grad {
                    v.push((*b, matmul_transposed_lhs(ta, g)));
                }
                v
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![
                    (*x, g.clone()),
                    (*bias, Tensor::new(vec![n], db)?),
                ]
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
            } => {
                let (di, dk, db) = conv2d_backward(
                    self.value(*input),
                    self.value(*kernels),
                    g,
                    *stride,
                    self.nodes[input.0].requires_grad,
                    self.nodes[kernels.0].requires_grad,
                );
                let mut v = vec![(*bias, db)];
                if let Some(dk) = dk {
                    v.push((*kernels, dk));
                }
                if let Some(di) = di {
                    v.push((*input, di));
                }
                v
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::new(xv.shape().to_vec(), data)?)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(self.value(*x).shape())?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale(x, f) => vec![(*x, g.map(|v| v * f))],
            Op::Sum(x) => {
                let s = g.item();
                vec![(*x, Tensor::full(self.value(*x).shape(), s))]
            }
            Op::SumSquares(x) => {
                let s = g.item();
                vec![(*x, self.value(*x).map(|v| 2.0 * v * s))]
            }
            Op::Softmax {
                logits,
                temperature,
            } => {
                let p = &node.value;
                let rows = row_count(p);
                let k = p.len() / rows;
                let mut dz = vec![0.0; p.len()];
                for r in 0..rows {
                    let pr = &p.data()[r * k..(r + 1) * k];
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..k {
                        dz[r * k + i] = pr[i] * (gr[i] - dot) / temperature;
                    }
                }
                vec![(*logits, Tensor::new(p.shape().to_vec(), dz)?)]
            }
            Op::CrossEntropy {
                probs,
                labels,
                reduction,
            } => {
                let p = self.value(*probs);
                let rows = row_count(p);
                let k = p.len() / rows;
                let scale = g.item() * reduce(1.0, rows, *reduction);
                let mut dp = vec![0.0; p.len()];
                for (r, &y) in labels.iter().enumerate() {
                    let v = p.data()[r * k + y];
                    if v >= PROB_FLOOR {
                        dp[r * k + y] = -scale / v;
                    }
                }
                vec![(*probs, Tensor::new(p.shape().to_vec(), dp)?)]
            }
            Op::KlDivergence {
                target,
                probs,
                reduction,
            } => {
                let q = self.value(*probs);
                let rows = row_count(q);
                let scale = g.item() * reduce(1.0, rows, *reduction);
                let dq = target
                    .data()
                    .iter()
                    .zip(q.data())
                    .map(|(&t, &v)| {
                        if t > 0.0 && v >= PROB_FLOOR {
                            -scale * t / v
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*probs, Tensor::new(q.shape().to_vec(), dq)?)]
            }
            Op::Margin {
                logits,
                goal,
                kappa,
            } => {
                let z = self.value(*logits);
                let rows = row_count(z);
                let k = z.len() / rows;
                let s = g.item();
                let targeted = matches!(goal, MarginGoal::Targeted(_));
                let mut dz = vec![0.0; z.len()];
                for (r, &c) in goal_classes(goal).iter().enumerate() {
                    let m = margin_terms(&z.data()[r * k..(r + 1) * k], c, targeted)?;
                    if m.value > -kappa {
                        dz[r * k + m.plus] += s;
                        dz[r * k + m.minus] -= s;
                    }
                }
                vec![(*logits, Tensor::new(z.shape().to_vec(), dz)?)]
            }
        };
        Ok(out)
    }
}

fn goal_classes(goal: &MarginGoal) -> &[usize] {
    match goal {
        MarginGoal::Untargeted(c) | MarginGoal::Targeted(c) => c,
    }
}

struct MarginTerms {
    value: f64,
    plus: usize,
    minus: usize,
}

/// Margin of one logit row; `plus`/`minus` are the indices whose logits enter
/// with sign +1/−1.
fn margin_terms(row: &[f64], class: usize, targeted: bool) -> Result<MarginTerms> {
    if class >= row.len() {
        return Err(Error::IndexOutOfRange {
            index: class,
            classes: row.len(),
        });
    }
    let (best_other, best_value) = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != class)
        .fold((usize::MAX, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    Ok(if targeted {
        MarginTerms {
            value: best_value - row[class],
            plus: best_other,
            minus: class,
        }
    } else {
        MarginTerms {
            value: row[class] - best_value,
            plus: class,
            minus: best_other,
        }
    })
}

fn row_count(t: &Tensor) -> usize {
    if t.rank() == 1 {
        1
    } else {
        t.rows()
    }
}

fn reduce(total: f64, rows: usize, reduction: Reduction) -> f64 {
    match reduction {
        Reduction::Mean => total / rows as f64,
        Reduction::Sum => total,
    }
}

/// Standard matrix product of `[m×k]` and `[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

// g·Bᵀ for g [m×n], B [k×n] → [m×k]
fn matmul_transposed_rhs(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g.data()[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b.data()[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_vec(&[m, k], out)
}

// Aᵀ·g for A [m×k], g [m×n] → [k×n]
fn matmul_transposed_lhs(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g.data()[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor::from_vec(&[k, n], out)
}

pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = bias.len();
    if x.rank() != 2 || x.shape()[1] != n || bias.rank() != 1 {
        return Err(Error::shape(
            "add_bias",
            format!("{:?} + {:?}", x.shape(), bias.shape()),
        ));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    oh: usize,
    ow: usize,
    batched: bool,
}

fn conv_geometry(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<ConvGeometry> {
    let (batch, c_in, h, w, batched) = match *input.shape() {
        [c, h, w] => (1, c, h, w, false),
        [b, c, h, w] => (b, c, h, w, true),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [C×H×W] or [B×C×H×W], got {:?}", input.shape()),
            ))
        }
    };
    let [c_out, kc, k, k2] = *kernels.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernels must be [O×C×k×k], got {:?}", kernels.shape()),
        ));
    };
    if kc != c_in || k != k2 || bias.shape() != [c_out] || stride == 0 {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {:?}, kernels {:?}, bias {:?}, stride {stride}",
                input.shape(),
                kernels.shape(),
                bias.shape()
            ),
        ));
    }
    if k > h || k > w {
        return Err(Error::KernelTooLarge {
            kernel: k,
            height: h,
            width: w,
        });
    }
    Ok(ConvGeometry {
        batch,
        c_in,
        h,
        w,
        c_out,
        k,
        oh: (h - k) / stride + 1,
        ow: (w - k) / stride + 1,
        batched,
    })
}

/// Valid (unpadded) 2-D cross-correlation plus per-channel bias.
///
/// Accepts a single image `[C×H×W]` or a batch `[B×C×H×W]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, bias, stride)?;
    let (x, kd) = (input.data(), kernels.data());
    let mut out = vec![0.0; g.batch * g.c_out * g.oh * g.ow];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        for o in 0..g.c_out {
            let base = (b * g.c_out + o) * g.oh * g.ow;
            let plane = &mut out[base..base + g.oh * g.ow];
            plane.iter_mut().for_each(|v| *v = bias.data()[o]);
            for c in 0..g.c_in {
                let xc = &xb[c * g.h * g.w..(c + 1) * g.h * g.w];
                let kern = &kd[(o * g.c_in + c) * g.k * g.k..(o * g.c_in + c + 1) * g.k * g.k];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ky in 0..g.k {
                            let xrow = &xc[(oy * stride + ky) * g.w + ox * stride..];
                            let krow = &kern[ky * g.k..(ky + 1) * g.k];
                            for (kv, xv) in krow.iter().zip(xrow) {
                                acc += kv * xv;
                            }
                        }
                        plane[oy * g.ow + ox] += acc;
                    }
                }
            }
        }
    }
    let shape = if g.batched {
        vec![g.batch, g.c_out, g.oh, g.ow]
    } else {
        vec![g.c_out, g.oh, g.ow]
    };
    Tensor::new(shape, out)
}

fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    want_input: bool,
    want_kernels: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let bias = Tensor::zeros(&[kernels.shape()[0]]);
    let g = conv_geometry(input, kernels, &bias, stride).expect("validated in forward");
    let (x, kd, go) = (input.data(), kernels.data(), grad_out.data());
    let mut dx = if want_input {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut dk = if want_kernels {
        vec![0.0; kd.len()]
    } else {
        Vec::new()
    };
    let mut db = vec![0.0; g.c_out];
    let plane_in = g.h * g.w;
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let gbase = (b * g.c_out + o) * g.oh * g.ow;
            let gplane = &go[gbase..gbase + g.oh * g.ow];
            db[o] += gplane.iter().sum::<f64>();
            for c in 0..g.c_in {
                let xoff = (b * g.c_in + c) * plane_in;
                let koff = (o * g.c_in + c) * g.k * g.k;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let gv = gplane[oy * g.ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..g.k {
                            let row = xoff + (oy * stride + ky) * g.w + ox * stride;
                            let kidx = koff + ky * g.k;
                            if want_kernels {
                                for kx in 0..g.k {
                                    dk[kidx + kx] += gv * x[row + kx];
                                }
                            }
                            if want_input {
                                for kx in 0..g.k {
                                    dx[row + kx] += gv * kd[kidx + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        want_input.then(|| Tensor::from_vec(input.shape(), dx)),
        want_kernels.then(|| Tensor::from_vec(kernels.shape(), dk)),
        Tensor::from_vec(&[g.c_out], db),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise `exp(z_i/T) / Σ_j exp(z_j/T)` over the last axis of a `[K]` or
/// `[B×K]` tensor, computed after subtracting the row maximum.
pub fn softmax_with_temperature(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if logits.rank() > 2 {
        return Err(Error::shape(
            "softmax",
            format!("expected [K] or [B×K], got {:?}", logits.shape()),
        ));
    }
    let rows = row_count(logits);
    let k = logits.len() / rows;
    if k < 2 {
        return Err(Error::shape("softmax", "need at least two classes"));
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &z in row {
            let e = ((z - max) / temperature).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// `−ln(max(probs[true_class], 1e-12))` for a single probability vector.
pub fn cross_entropy(probs: &Tensor, true_class: usize) -> Result<f64> {
    batched_cross_entropy(probs, &[true_class], Reduction::Sum)
}

fn batched_cross_entropy(probs: &Tensor, labels: &[usize], reduction: Reduction) -> Result<f64> {
    let rows = row_count(probs);
    if labels.len() != rows || probs.rank() > 2 {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for probabilities {:?}", labels.len(), probs.shape()),
        ));
    }
    let k = probs.len() / rows;
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::IndexOutOfRange {
                index: y,
                classes: k,
            });
        }
        total -= probs.data()[r * k + y].max(PROB_FLOOR).ln();
    }
    Ok(reduce(total, rows, reduction))
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum()
}

/// `Σ p_i ln(p_i / q_i)` with `0·ln 0 = 0` and `q` clamped at 1e-12.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(
            "kl_divergence",
            format!("lengths {} and {}", p.len(), q.len()),
        ));
    }
    Ok(kl_row(p.data(), q.data()))
}

/// Index-ordered sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
