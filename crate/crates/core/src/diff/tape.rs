use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::{matmul, Tensor};
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

/// Position on a tape that [`Tape::truncate`] can rewind to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Checkpoint(usize);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Const,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    /// `n×m` matrix plus a length-`m` row vector on every row.
    AddRow { a: usize, row: usize },
    /// Column sums: `n×m -> [m]`.
    SumRows(usize),
    /// `[m] -> rows×m`.
    TileRows { a: usize, rows: usize },
    /// Row sums: `n×k -> n×1`.
    RowSum(usize),
    /// `n×1 -> n×cols`.
    TileCols { a: usize, cols: usize },
    /// Scalar node times tensor.
    Scale { s: usize, a: usize },
    ScaleConst { a: usize, c: f64 },
    AddConst { a: usize, c: f64 },
    /// One-element tensor broadcast to `shape`.
    Expand { a: usize, shape: Vec<usize> },
    Reshape { a: usize, shape: Vec<usize> },
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Recip(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    NormSq(usize),
    /// Row-wise softmax of a matrix.
    Softmax(usize),
    /// Mean binary cross-entropy of logits against fixed 0/1 labels.
    BceWithLogits { logits: usize, labels: Arc<Vec<f64>> },
    /// Mean categorical cross-entropy of row logits against fixed target rows.
    SoftmaxXent { logits: usize, targets: Arc<Tensor> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::AddRow { .. } => "add_row",
            Op::SumRows(_) => "sum_rows",
            Op::TileRows { .. } => "tile_rows",
            Op::RowSum(_) => "row_sum",
            Op::TileCols { .. } => "tile_cols",
            Op::Scale { .. } => "scale",
            Op::ScaleConst { .. } => "scale_const",
            Op::AddConst { .. } => "add_const",
            Op::Expand { .. } => "expand",
            Op::Reshape { .. } => "reshape",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Recip(_) => "recip",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::NormSq(_) => "norm_sq",
            Op::Softmax(_) => "softmax",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Inputs {
        use Op::*;
        match *self {
            Leaf | Const => Inputs::None,
            MatMul { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) => Inputs::Two(a, b),
            AddRow { a, row } => Inputs::Two(a, row),
            Scale { s, a } => Inputs::Two(s, a),
            Neg(a) | SumRows(a) | RowSum(a) | Relu(a) | Sigmoid(a) | Log(a) | Exp(a) | Recip(a)
            | Square(a) | Sum(a) | Mean(a) | NormSq(a) | Softmax(a) => Inputs::One(a),
            TileRows { a, .. } | TileCols { a, .. } | ScaleConst { a, .. } | AddConst { a, .. } => {
                Inputs::One(a)
            }
            Expand { a, .. } | Reshape { a, .. } => Inputs::One(a),
            BceWithLogits { logits, .. } | SoftmaxXent { logits, .. } => Inputs::One(logits),
        }
    }
}

#[derive(Clone, Copy)]
enum Inputs {
    None,
    One(usize),
    Two(usize, usize),
}

impl Inputs {
    fn any(self, f: impl Fn(usize) -> bool) -> bool {
        match self {
            Inputs::None => false,
            Inputs::One(a) => f(a),
            Inputs::Two(a, b) => f(a) || f(b),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of primitive operations over [`Tensor`]s.
///
/// Gradients are computed by walking the tape backwards and recording every
/// backward rule as ordinary tape operations, so a gradient obtained with
/// [`Tape::grad_graph`] can itself be differentiated.
///
/// Relu's derivative at exactly 0 is taken to be 0.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn eval_op<'a>(op: &Op, val: &dyn Fn(usize) -> &'a Tensor) -> Result<Tensor> {
    fn un(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        a.map(f)
    }
    Ok(match op {
        Op::Leaf | Op::Const => unreachable!("leaves carry their own value"),
        Op::MatMul { a, b, ta, tb } => matmul(val(*a), val(*b), *ta, *tb)?,
        Op::Add(a, b) => val(*a).zip_map(val(*b), |x, y| x + y)?,
        Op::Sub(a, b) => val(*a).zip_map(val(*b), |x, y| x - y)?,
        Op::Mul(a, b) => val(*a).zip_map(val(*b), |x, y| x * y)?,
        Op::Neg(a) => un(val(*a), |x| -x),
        Op::AddRow { a, row } => {
            let (a, row) = (val(*a), val(*row));
            let (n, m) = a.dims2()?;
            if row.shape() != [m] {
                return Err(shape_err(format!("add_row: {:?} + row {:?}", a.shape(), row.shape())));
            }
            let mut data = a.data().to_vec();
            for r in 0..n {
                for (o, b) in data[r * m..(r + 1) * m].iter_mut().zip(row.data()) {
                    *o += b;
                }
            }
            Tensor::from_parts(vec![n, m], data)
        }
        Op::SumRows(a) => {
            let a = val(*a);
            let (n, m) = a.dims2()?;
            let mut out = vec![0.0; m];
            for r in 0..n {
                for (o, v) in out.iter_mut().zip(&a.data()[r * m..(r + 1) * m]) {
                    *o += v;
                }
            }
            Tensor::vector(out)
        }
        Op::TileRows { a, rows } => {
            let a = val(*a);
            if a.ndim() != 1 {
                return Err(shape_err(format!("tile_rows of {:?}", a.shape())));
            }
            let mut data = Vec::with_capacity(rows * a.len());
            for _ in 0..*rows {
                data.extend_from_slice(a.data());
            }
            Tensor::from_parts(vec![*rows, a.len()], data)
        }
        Op::RowSum(a) => {
            let a = val(*a);
            let (n, k) = a.dims2()?;
            let data = (0..n).map(|r| a.data()[r * k..(r + 1) * k].iter().sum()).collect();
            Tensor::from_parts(vec![n, 1], data)
        }
        Op::TileCols { a, cols } => {
            let a = val(*a);
            let (n, one) = a.dims2()?;
            if one != 1 {
                return Err(shape_err(format!("tile_cols of {:?}", a.shape())));
            }
            let data = a.data().iter().flat_map(|&v| std::iter::repeat_n(v, *cols)).collect();
            Tensor::from_parts(vec![n, *cols], data)
        }
        Op::Scale { s, a } => {
            let s = val(*s);
            if s.len() != 1 {
                return Err(shape_err(format!("scale by non-scalar {:?}", s.shape())));
            }
            let s = s.data()[0];
            un(val(*a), |x| s * x)
        }
        Op::ScaleConst { a, c } => un(val(*a), |x| c * x),
        Op::AddConst { a, c } => un(val(*a), |x| x + c),
        Op::Expand { a, shape } => {
            let a = val(*a);
            if a.len() != 1 {
                return Err(shape_err(format!("expand of non-scalar {:?}", a.shape())));
            }
            Tensor::full(shape, a.data()[0])
        }
        Op::Reshape { a, shape } => {
            let a = val(*a);
            Tensor::new(shape.clone(), a.data().to_vec())?
        }
        Op::Relu(a) => un(val(*a), |x| if x > 0.0 { x } else { 0.0 }),
        Op::Sigmoid(a) => un(val(*a), sigmoid),
        Op::Log(a) => un(val(*a), f64::ln),
        Op::Exp(a) => un(val(*a), f64::exp),
        Op::Recip(a) => un(val(*a), |x| 1.0 / x),
        Op::Square(a) => un(val(*a), |x| x * x),
        Op::Sum(a) => Tensor::scalar(val(*a).data().iter().sum()),
        Op::Mean(a) => {
            let a = val(*a);
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        Op::NormSq(a) => Tensor::scalar(val(*a).norm_sq()),
        Op::Softmax(a) => {
            let a = val(*a);
            let (n, k) = a.dims2()?;
            let mut data = a.data().to_vec();
            for r in 0..n {
                let row = &mut data[r * k..(r + 1) * k];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::from_parts(vec![n, k], data)
        }
        Op::BceWithLogits { logits, labels } => {
            let z = val(*logits);
            if z.len() != labels.len() {
                return Err(shape_err(format!(
                    "bce_with_logits: {} logits vs {} labels",
                    z.len(),
                    labels.len()
                )));
            }
            let total: f64 = z
                .data()
                .iter()
                .zip(labels.iter())
                .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                .sum();
            Tensor::scalar(total / z.len() as f64)
        }
        Op::SoftmaxXent { logits, targets } => {
            let z = val(*logits);
            let (n, k) = z.dims2()?;
            if targets.shape() != z.shape() {
                return Err(shape_err(format!(
                    "softmax_cross_entropy: logits {:?} vs targets {:?}",
                    z.shape(),
                    targets.shape()
                )));
            }
            let mut total = 0.0;
            for r in 0..n {
                let row = &z.data()[r * k..(r + 1) * k];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                let t = &targets.data()[r * k..(r + 1) * k];
                total -= row.iter().zip(t).map(|(v, t)| t * (v - lse)).sum::<f64>();
            }
            Tensor::scalar(total / n as f64)
        }
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint(self.nodes.len())
    }

    /// Drops every node recorded after `cp`. Vars pointing past it become invalid.
    pub fn truncate(&mut self, cp: Checkpoint) {
        self.nodes.truncate(cp.0);
    }

    fn var(&self, idx: usize) -> Var {
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotALeaf { node: v.idx });
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        v.tape == self.id && v.idx < self.nodes.len() && matches!(self.nodes[v.idx].op, Op::Leaf)
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.idx].op.name()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<usize> {
        let idx = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::FiniteViolation { node: idx });
        }
        self.nodes.push(Node { op, value });
        Ok(idx)
    }

    fn record(&mut self, op: Op) -> Result<usize> {
        let nodes = &self.nodes;
        let value = eval_op(&op, &|i| &nodes[i].value)?;
        self.push(op, value)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        let i = self.push(Op::Leaf, value)?;
        Ok(self.var(i))
    }

    /// Input that never receives a gradient (data, labels, masks).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        let i = self.push(Op::Const, value)?;
        Ok(self.var(i))
    }

    fn op1(&mut self, a: Var, f: impl FnOnce(usize) -> Op) -> Result<Var> {
        let a = self.check(a)?;
        let i = self.record(f(a))?;
        Ok(self.var(i))
    }

    fn op2(&mut self, a: Var, b: Var, f: impl FnOnce(usize, usize) -> Op) -> Result<Var> {
        let a = self.check(a)?;
        let b = self.check(b)?;
        let i = self.record(f(a, b))?;
        Ok(self.var(i))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.op2(a, b, |a, b| Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op2(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op2(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.op2(a, b, Op::Mul)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::Neg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.op2(a, row, |a, row| Op::AddRow { a, row })
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::SumRows)
    }

    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.op1(a, |a| Op::TileRows { a, rows })
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::RowSum)
    }

    pub fn tile_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        self.op1(a, |a| Op::TileCols { a, cols })
    }

    /// Scalar node `s` times `a`.
    pub fn scale(&mut self, s: Var, a: Var) -> Result<Var> {
        self.op2(s, a, |s, a| Op::Scale { s, a })
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.op1(a, |a| Op::ScaleConst { a, c })
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.op1(a, |a| Op::AddConst { a, c })
    }

    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let shape = shape.to_vec();
        self.op1(a, |a| Op::Expand { a, shape })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let shape = shape.to_vec();
        self.op1(a, |a| Op::Reshape { a, shape })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::Sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::Exp)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::Recip)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::Square)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::Mean)
    }

    /// Squared Euclidean norm, `Σ aᵢ²`.
    pub fn norm_sq(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::NormSq)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.op1(a, Op::Softmax)
    }

    /// Mean binary cross-entropy of `logits` (any shape, `n` values) against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Arc<Vec<f64>>) -> Result<Var> {
        self.op1(logits, |logits| Op::BceWithLogits { logits, labels })
    }

    /// Mean cross-entropy of row-wise softmax of `logits` (`n×k`) against target rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Arc<Tensor>) -> Result<Var> {
        self.op1(logits, |logits| Op::SoftmaxXent { logits, targets })
    }

    /// Sum of a non-empty list of same-shaped nodes, folded left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| shape_err("add_all of empty list"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Arithmetic mean of a non-empty list of same-shaped nodes.
    pub fn mean_all(&mut self, xs: &[Var]) -> Result<Var> {
        let s = self.add_all(xs)?;
        self.scale_const(s, 1.0 / xs.len() as f64)
    }

    /// Gradients of scalar `output` with respect to `wrt`, as plain tensors.
    ///
    /// Everything recorded while differentiating is discarded afterwards.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let cp = self.checkpoint();
        let res = self.backward(output, wrt).map(|gs| {
            gs.iter().map(|g| self.nodes[g.idx].value.clone()).collect::<Vec<_>>()
        });
        self.truncate(cp);
        res
    }

    /// Gradients recorded as tape nodes, so they can be differentiated again.
    ///
    /// `wrt` may name any recorded node; the result is the partial derivative
    /// of `output` treating that node as an independent input.
    pub fn grad_graph(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.backward(output, wrt)
    }

    /// Combined entry point: plain gradients when `create_graph` is false,
    /// otherwise gradients that stay on the tape.
    pub fn grad_with(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Grad>> {
        if create_graph {
            Ok(self.grad_graph(output, wrt)?.into_iter().map(Grad::Var).collect())
        } else {
            Ok(self.grad(output, wrt)?.into_iter().map(Grad::Tensor).collect())
        }
    }

    fn backward(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out = self.check(output)?;
        if self.nodes[out].value.len() != 1 {
            return Err(shape_err(format!(
                "gradient of non-scalar output with shape {:?}",
                self.nodes[out].value.shape()
            )));
        }
        let wrt_idx = wrt.iter().map(|&w| self.check(w)).collect::<Result<Vec<_>>>()?;
        let lo = wrt_idx.iter().copied().filter(|&w| w <= out).min().unwrap_or(out + 1);

        // Nodes on some path from a wrt node to the output.
        let span = (out + 1).saturating_sub(lo);
        let mut needed = vec![false; span];
        for &w in &wrt_idx {
            if w <= out {
                needed[w - lo] = true;
            }
        }
        for i in lo..=out {
            if !needed[i - lo] {
                needed[i - lo] = self.nodes[i].op.inputs().any(|j| j >= lo && needed[j - lo]);
            }
        }

        let mut adj: Vec<Option<usize>> = vec![None; span];
        if span > 0 && needed[out - lo] {
            let seed = Tensor::full(self.nodes[out].value.shape(), 1.0);
            adj[out - lo] = Some(self.push(Op::Const, seed)?);
            for i in (lo..=out).rev() {
                let Some(g) = adj[i - lo] else { continue };
                if !needed[i - lo] {
                    continue;
                }
                let op = self.nodes[i].op.clone();
                let need = |j: usize| j >= lo && needed[j - lo];
                for (input, contrib) in self.vjp(&op, i, g, &need)? {
                    let slot = &mut adj[input - lo];
                    *slot = Some(match *slot {
                        None => contrib,
                        Some(prev) => self.record(Op::Add(prev, contrib))?,
                    });
                }
            }
        }

        let mut grads = Vec::with_capacity(wrt_idx.len());
        for &w in &wrt_idx {
            let g = match (w >= lo && w <= out).then(|| adj[w - lo]).flatten() {
                Some(g) => g,
                None => self.push(Op::Const, Tensor::zeros(self.nodes[w].value.shape()))?,
            };
            grads.push(self.var(g));
        }
        Ok(grads)
    }

    /// Contributions `(input, adjoint)` of node `out` with adjoint `g`, recorded on the tape.
    fn vjp(
        &mut self,
        op: &Op,
        out: usize,
        g: usize,
        need: &dyn Fn(usize) -> bool,
    ) -> Result<Vec<(usize, usize)>> {
        let mut res = Vec::with_capacity(2);
        if !op.inputs().any(need) {
            return Ok(res);
        }
        match *op {
            Op::Leaf | Op::Const => {}
            Op::MatMul { a, b, ta, tb } => {
                if need(a) {
                    let ga = match (ta, tb) {
                        (false, false) => Op::MatMul { a: g, b, ta: false, tb: true },
                        (false, true) => Op::MatMul { a: g, b, ta: false, tb: false },
                        (true, false) => Op::MatMul { a: b, b: g, ta: false, tb: true },
                        (true, true) => Op::MatMul { a: b, b: g, ta: true, tb: true },
                    };
                    res.push((a, self.record(ga)?));
                }
                if need(b) {
                    let gb = match (ta, tb) {
                        (false, false) => Op::MatMul { a, b: g, ta: true, tb: false },
                        (false, true) => Op::MatMul { a: g, b: a, ta: true, tb: false },
                        (true, false) => Op::MatMul { a, b: g, ta: false, tb: false },
                        (true, true) => Op::MatMul { a: g, b: a, ta: true, tb: true },
                    };
                    res.push((b, self.record(gb)?));
                }
            }
            Op::Add(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    res.push((a, g));
                }
                if need(b) {
                    res.push((b, self.record(Op::Neg(g))?));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    res.push((a, self.record(Op::Mul(g, b))?));
                }
                if need(b) {
                    res.push((b, self.record(Op::Mul(g, a))?));
                }
            }
            Op::Neg(a) => res.push((a, self.record(Op::Neg(g))?)),
            Op::AddRow { a, row } => {
                if need(a) {
                    res.push((a, g));
                }
                if need(row) {
                    res.push((row, self.record(Op::SumRows(g))?));
                }
            }
            Op::SumRows(a) => {
                let rows = self.nodes[a].value.shape()[0];
                res.push((a, self.record(Op::TileRows { a: g, rows })?));
            }
            Op::TileRows { a, .. } => res.push((a, self.record(Op::SumRows(g))?)),
            Op::RowSum(a) => {
                let cols = self.nodes[a].value.shape()[1];
                res.push((a, self.record(Op::TileCols { a: g, cols })?));
            }
            Op::TileCols { a, .. } => res.push((a, self.record(Op::RowSum(g))?)),
            Op::Scale { s, a } => {
                if need(a) {
                    res.push((a, self.record(Op::Scale { s, a: g })?));
                }
                if need(s) {
                    let ga = self.record(Op::Mul(g, a))?;
                    let mut gs = self.record(Op::Sum(ga))?;
                    let s_shape = self.nodes[s].value.shape().to_vec();
                    if !s_shape.is_empty() {
                        gs = self.record(Op::Reshape { a: gs, shape: s_shape })?;
                    }
                    res.push((s, gs));
                }
            }
            Op::ScaleConst { a, c } => res.push((a, self.record(Op::ScaleConst { a: g, c })?)),
            Op::AddConst { a, .. } => res.push((a, g)),
            Op::Expand { a, .. } => {
                let mut ga = self.record(Op::Sum(g))?;
                let shape = self.nodes[a].value.shape().to_vec();
                if !shape.is_empty() {
                    ga = self.record(Op::Reshape { a: ga, shape })?;
                }
                res.push((a, ga));
            }
            Op::Reshape { a, .. } => {
                let shape = self.nodes[a].value.shape().to_vec();
                res.push((a, self.record(Op::Reshape { a: g, shape })?));
            }
            Op::Relu(a) => {
                let mask = self.nodes[a].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.push(Op::Const, mask)?;
                res.push((a, self.record(Op::Mul(g, m))?));
            }
            Op::Sigmoid(a) => {
                // σ' = y - y²
                let y2 = self.record(Op::Square(out))?;
                let d = self.record(Op::Sub(out, y2))?;
                res.push((a, self.record(Op::Mul(g, d))?));
            }
            Op::Log(a) => {
                let r = self.record(Op::Recip(a))?;
                res.push((a, self.record(Op::Mul(g, r))?));
            }
            Op::Exp(a) => res.push((a, self.record(Op::Mul(g, out))?)),
            Op::Recip(a) => {
                let y2 = self.record(Op::Square(out))?;
                let m = self.record(Op::Mul(g, y2))?;
                res.push((a, self.record(Op::Neg(m))?));
            }
            Op::Square(a) => {
                let two_a = self.record(Op::ScaleConst { a, c: 2.0 })?;
                res.push((a, self.record(Op::Mul(g, two_a))?));
            }
            Op::Sum(a) => {
                let shape = self.nodes[a].value.shape().to_vec();
                res.push((a, self.record(Op::Expand { a: g, shape })?));
            }
            Op::Mean(a) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let n = self.nodes[a].value.len() as f64;
                let e = self.record(Op::Expand { a: g, shape })?;
                res.push((a, self.record(Op::ScaleConst { a: e, c: 1.0 / n })?));
            }
            Op::NormSq(a) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let e = self.record(Op::Expand { a: g, shape })?;
                let two_a = self.record(Op::ScaleConst { a, c: 2.0 })?;
                res.push((a, self.record(Op::Mul(e, two_a))?));
            }
            Op::Softmax(a) => {
                // y ⊙ (g − rowsum(g ⊙ y))
                let cols = self.nodes[a].value.shape()[1];
                let gy = self.record(Op::Mul(g, out))?;
                let s = self.record(Op::RowSum(gy))?;
                let st = self.record(Op::TileCols { a: s, cols })?;
                let d = self.record(Op::Sub(g, st))?;
                res.push((a, self.record(Op::Mul(out, d))?));
            }
            Op::BceWithLogits { logits, ref labels } => {
                let shape = self.nodes[logits].value.shape().to_vec();
                let n = labels.len() as f64;
                let y = self.push(Op::Const, Tensor::from_parts(shape.clone(), labels.to_vec()))?;
                let s = self.record(Op::Sigmoid(logits))?;
                let d = self.record(Op::Sub(s, y))?;
                let e = self.record(Op::Expand { a: g, shape })?;
                let m = self.record(Op::Mul(e, d))?;
                res.push((logits, self.record(Op::ScaleConst { a: m, c: 1.0 / n })?));
            }
            Op::SoftmaxXent { logits, ref targets } => {
                let shape = self.nodes[logits].value.shape().to_vec();
                let n = shape[0] as f64;
                let t = self.push(Op::Const, (**targets).clone())?;
                let p = self.record(Op::Softmax(logits))?;
                let d = self.record(Op::Sub(p, t))?;
                let e = self.record(Op::Expand { a: g, shape })?;
                let m = self.record(Op::Mul(e, d))?;
                res.push((logits, self.record(Op::ScaleConst { a: m, c: 1.0 / n })?));
            }
        }
        Ok(res)
    }

    /// Recomputes every node from its recorded inputs.
    ///
    /// Leaves and constants keep their stored values; the result can be compared
    /// against the recorded values to confirm the tape is self-consistent.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Const => node.value.clone(),
                ref op => eval_op(op, &|i| &out[i])?,
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Values recorded for every node, in tape order.
    pub fn recorded_values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// True when every node's inputs precede it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| !n.op.inputs().any(|j| j >= i))
    }
}

/// Gradient returned by [`Tape::grad_with`].
#[derive(Clone, Debug)]
pub enum Grad {
    Tensor(Tensor),
    Var(Var),
}

/// Records `graph_fn` on a fresh tape with `inputs` as leaves.
///
/// Returns the scalar output, the tape, and the leaf handles in input order.
pub fn forward<F>(inputs: &[Tensor], graph_fn: F) -> Result<(Var, Tape, Vec<Var>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = graph_fn(&mut tape, &leaves)?;
    if tape.value(out).len() != 1 {
        return Err(shape_err(format!("forward output has shape {:?}", tape.value(out).shape())));
    }
    Ok((out, tape, leaves))
}
