use std::collections::HashMap;
use std::fmt;

use super::Tensor;
use crate::error::{precondition, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fused operation whose forward pass is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input, each the length of that input.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Concat(Var, Var),
    RowNorm(Var),
    SqDist(Var, Var),
    SelectRows(Var, Vec<usize>),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Tape of executed ops. Nodes are appended in execution order, so parents
/// always precede children and a single reverse sweep is a valid backward
/// pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<usize, Var>,
}

fn rc(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn key(t: &Tensor) -> usize {
    t as *const Tensor as usize
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Enters a tensor. Tensors with `requires_grad` become tracked leaves and
    /// are deduplicated, so a parameter used twice in one step accumulates
    /// both contributions on the same leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if t.requires_grad() {
            if let Some(&v) = self.params.get(&key(t)) {
                return v;
            }
            let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
            self.params.insert(key(t), v);
            v
        } else {
            self.constant(t)
        }
    }

    /// Enters a tensor as a constant regardless of `requires_grad`.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    /// A tracked leaf not tied to any parameter tensor (used by gradient checks).
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), n, k, m);
        let t = self.tracked(&[a, b]);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), t))
    }

    /// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let t = self.tracked(&[a, b]);
        if sa == sb {
            let out = zip(self.value(a), self.value(b), |x, y| x + y);
            return Ok(self.push(sa, out, Op::Add(a, b), t));
        }
        let (n, c) = rc(&sa);
        let (nb, cb) = rc(&sb);
        if sa.len() == 2 && nb == 1 && cb == c {
            let (av, bv) = (self.value(a), self.value(b));
            let mut out = av.to_vec();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(bv).for_each(|(o, y)| *o += y);
            }
            debug_assert_eq!(out.len(), n * c);
            return Ok(self.push(sa, out, Op::AddRow(a, b), t));
        }
        Err(Error::ShapeMismatch {
            op: "add",
            left: sa,
            right: sb,
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        let t = self.tracked(&[a, b]);
        Ok(self.push(s, out, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        let t = self.tracked(&[a, b]);
        Ok(self.push(s, out, Op::Mul(a, b), t))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let s = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let t = self.tracked(&[a]);
        self.push(s, out, op, t)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    /// Row-wise softmax (a vector is one row).
    pub fn softmax(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (_, c) = rc(&s);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let t = self.tracked(&[a]);
        self.push(s, out, Op::Softmax(a), t)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (_, c) = rc(&s);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = self.tracked(&[a]);
        self.push(s, out, Op::LogSoftmax(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        let t = self.tracked(&[a]);
        self.push(vec![], vec![v], Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let vals = self.value(a);
        if vals.is_empty() {
            return Err(precondition("mean of empty tensor"));
        }
        let v = vals.iter().sum::<f64>() / vals.len() as f64;
        let t = self.tracked(&[a]);
        Ok(self.push(vec![], vec![v], Op::Mean(a), t))
    }

    /// Concatenation along the last axis; both operands need the same row count.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ((na, ca), (nb, cb)) = (rc(&sa), rc(&sb));
        if sa.len() != sb.len() || na != nb || sa.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: sa,
                right: sb,
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(na * (ca + cb));
        for i in 0..na {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let shape = if sa.len() == 1 {
            vec![ca + cb]
        } else {
            vec![na, ca + cb]
        };
        let t = self.tracked(&[a, b]);
        Ok(self.push(shape, out, Op::Concat(a, b), t))
    }

    /// Euclidean norm of every row; output shape `[rows]`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (n, c) = rc(self.shape(a));
        let v = self.value(a);
        let out = (0..n)
            .map(|i| v[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let t = self.tracked(&[a]);
        self.push(vec![n], out, Op::RowNorm(a), t)
    }

    /// `out[i, j] = ||a_i - b_j||²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "sq_dist",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let out = sq_dist_raw(self.value(a), self.value(b), n, m, d);
        let t = self.tracked(&[a, b]);
        Ok(self.push(vec![n, m], out, Op::SqDist(a, b), t))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(precondition(format!("select_rows needs a matrix, got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(precondition(format!("select_rows: row {bad} out of {n}")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let t = self.tracked(&[a]);
        Ok(self.push(vec![idx.len(), c], out, Op::SelectRows(a, idx.to_vec()), t))
    }

    /// Records a fused op whose output the caller has already computed.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
        shape: Vec<usize>,
        value: Vec<f64>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::ShapeMismatch {
                op: "custom",
                left: shape,
                right: vec![value.len()],
            });
        }
        let t = self.tracked(&inputs);
        Ok(self.push(shape, value, Op::Custom(op, inputs), t))
    }

    /// Reverse sweep from a scalar loss. Gradients of tracked leaves are then
    /// available through [`Graph::grad`] and [`Graph::param_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].tracked {
                    // dA = G Bᵀ
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for kk in 0..k {
                            let brow = &bv[kk * m..(kk + 1) * m];
                            da[r * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, da);
                }
                if self.nodes[b.0].tracked {
                    // dB = Aᵀ G
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for kk in 0..k {
                            let x = av[r * k + kk];
                            if x == 0.0 {
                                continue;
                            }
                            let drow = &mut db[kk * m..(kk + 1) * m];
                            drow.iter_mut().zip(grow).for_each(|(d, gg)| *d += x * gg);
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddRow(a, b) => {
                send(*a, g.to_vec());
                let c = self.value(*b).len();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
                send(*b, db);
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, zip(g, bv, |x, y| x * y));
                send(*b, zip(g, av, |x, y| x * y));
            }
            Op::Neg(a) => send(*a, g.iter().map(|x| -x).collect()),
            Op::Scale(a, c) => send(*a, g.iter().map(|x| c * x).collect()),
            Op::Relu(a) => {
                let av = self.value(*a);
                send(*a, zip(g, av, |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::Exp(a) => send(*a, zip(g, &node.value, |x, y| x * y)),
            Op::Log(a) => send(*a, zip(g, self.value(*a), |x, y| x / y)),
            Op::Sqrt(a) => send(
                *a,
                zip(g, &node.value, |x, y| if y > 0.0 { x / (2.0 * y) } else { 0.0 }),
            ),
            Op::Softmax(a) => {
                let (_, c) = rc(&node.shape);
                let mut da = vec![0.0; g.len()];
                for ((drow, grow), yrow) in da
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(node.value.chunks(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                send(*a, da);
            }
            Op::LogSoftmax(a) => {
                let (_, c) = rc(&node.shape);
                let mut da = vec![0.0; g.len()];
                for ((drow, grow), yrow) in da
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(node.value.chunks(c))
                {
                    let gs: f64 = grow.iter().sum();
                    for j in 0..c {
                        drow[j] = grow[j] - yrow[j].exp() * gs;
                    }
                }
                send(*a, da);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::Concat(a, b) => {
                let (_, ca) = rc(self.shape(*a));
                let (_, cb) = rc(self.shape(*b));
                let n = self.value(*a).len() / ca.max(1);
                let mut da = Vec::with_capacity(n * ca);
                let mut db = Vec::with_capacity(n * cb);
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::RowNorm(a) => {
                let (_, c) = rc(self.shape(*a));
                let av = self.value(*a);
                let mut da = vec![0.0; av.len()];
                for (r, (&norm, &gr)) in node.value.iter().zip(g).enumerate() {
                    if norm > 0.0 {
                        for j in 0..c {
                            da[r * c + j] = gr * av[r * c + j] / norm;
                        }
                    }
                }
                send(*a, da);
            }
            Op::SqDist(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, m, d) = (sa[0], sb[0], sa[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = 2.0 * g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = gij * (av[i * d + k] - bv[j * d + k]);
                            da[i * d + k] += diff;
                            db[j * d + k] -= diff;
                        }
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::SelectRows(a, idx) => {
                let (_, c) = rc(self.shape(*a));
                let mut da = vec![0.0; self.value(*a).len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[src * c + j] += g[r * c + j];
                    }
                }
                send(*a, da);
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&[f64]> = inputs.iter().map(|v| self.value(*v)).collect();
                let outs = op.backward(&ins, &node.value, g);
                debug_assert_eq!(outs.len(), inputs.len(), "{} arity", op.name());
                for (v, gv) in inputs.iter().zip(outs) {
                    debug_assert_eq!(gv.len(), self.value(*v).len(), "{} grad len", op.name());
                    send(*v, gv);
                }
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter tensor entered through [`Graph::leaf`].
    pub fn param_grad(&self, t: &Tensor) -> Option<&[f64]> {
        self.params.get(&key(t)).and_then(|v| self.grad(*v))
    }

    /// Accumulates gradients into each parameter's buffer. Parameters that did
    /// not take part in the step receive zeros.
    pub fn write_grads<'a>(&self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        for p in params {
            match self.param_grad(p) {
                Some(g) => {
                    let g = g.to_vec();
                    p.accumulate_grad(&g)?;
                }
                None => {
                    let z = vec![0.0; p.len()];
                    p.accumulate_grad(&z)?;
                }
            }
        }
        Ok(())
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let x = a[i * k + kk];
            if x == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
        }
    }
    out
}

pub(crate) fn sq_dist_raw(a: &[f64], b: &[f64], n: usize, m: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = &a[i * d..(i + 1) * d];
        for j in 0..m {
            let br = &b[j * d..(j + 1) * d];
            out[i * m + j] = ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    out
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}
