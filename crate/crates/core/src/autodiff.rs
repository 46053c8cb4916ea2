//! Reverse-mode differentiation over row-major matrices.
//!
//! The tape is eager: every recording call computes its value immediately,
//! so building the graph is the forward pass. Parameters enter as leaves
//! tagged with a group and a flat offset; custom operations (hash lookups,
//! surface blending, compositing) scatter into group gradients directly.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self::from_vec(data.len(), 1, data)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::from_vec(rows, cols, vec![v; rows * cols])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor::from_vec(self.rows, self.cols, self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
    }

    fn add_assign(&mut self, other: &Tensor) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// Matrix product kernel shared by the tape and by untaped evaluation, so
/// both produce bit-identical rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols);
    let mut c = Tensor::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, (a.cols, 1), &b.data, (b.cols, 1), &mut c.data, 1.0);
    c
}

/// `c = beta c + a b` with explicit row/column strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the slices cover every index reachable with the given
    // dimensions and strides (checked by the callers' shapes), and `c` does
    // not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adds a 1xN bias to every row.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Tensor {
    assert_eq!(bias.rows, 1);
    assert_eq!(bias.cols, a.cols);
    let mut out = a.clone();
    for r in 0..out.rows {
        out.row_mut(r).iter_mut().zip(&bias.data).for_each(|(v, b)| *v += b);
    }
    out
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Trainable parameter groups, each updated with its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Mlp,
    Vertices,
    Grid,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Mlp, Group::Vertices, Group::Grid];

    pub fn name(self) -> &'static str {
        match self {
            Group::Mlp => "mlp",
            Group::Vertices => "vertices",
            Group::Grid => "grid",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Flat gradient vectors, one per group.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    groups: [Vec<f64>; 3],
}

impl Gradients {
    pub fn zeros(mlp: usize, vertices: usize, grid: usize) -> Self {
        Self {
            groups: [vec![0.0; mlp], vec![0.0; vertices], vec![0.0; grid]],
        }
    }

    pub fn get(&self, g: Group) -> &[f64] {
        &self.groups[g.index()]
    }

    pub fn get_mut(&mut self, g: Group) -> &mut [f64] {
        &mut self.groups[g.index()]
    }

    pub fn clear(&mut self) {
        self.groups.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
    }

    /// First group holding a non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        for g in Group::ALL {
            if self.get(g).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(g.name()));
            }
        }
        Ok(())
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// User-defined operation. The forward value is computed by the caller and
/// handed to [`Tape::custom`].
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Accumulates input gradients into `grad_inputs` (pre-shaped zeros, one
    /// per input) and parameter gradients into `params`.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor, grad_inputs: &mut [Tensor], params: &mut Gradients);
}

enum Op<'a> {
    Const,
    Param { group: Group, offset: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    Custom(Box<dyn CustomOp + 'a>, Vec<Var>),
}

impl Op<'_> {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param { .. } => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SumCols(..) => "sum_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node<'a> {
    op: Op<'a>,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            first_non_finite: None,
        }
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<'a>, value: Tensor, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node { op, value, needs_grad });
        Var(id)
    }

    /// Fails with the first node whose value was not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some((node, op)) => Err(Error::NonFiniteNode { node, op }),
            None => Ok(()),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value, false)
    }

    /// Leaf whose gradient lands in `group` at `offset..offset + len`.
    pub fn param(&mut self, value: Tensor, group: Group, offset: usize) -> Var {
        self.push(Op::Param { group, offset }, value, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "add shape mismatch");
        let v = x.zip(y, |p, q| p + q);
        let n = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, n)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "sub shape mismatch");
        let v = x.zip(y, |p, q| p - q);
        let n = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, n)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.same_shape(y), "mul shape mismatch");
        let v = x.zip(y, |p, q| p * q);
        let n = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, n)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|p| p * s);
        let n = self.needs(a);
        self.push(Op::Scale(a, s), v, n)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|p| p + s);
        let n = self.needs(a);
        self.push(Op::AddScalar(a), v, n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        let n = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), v, n)
    }

    /// `a + bias` with a 1xN bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = add_row(self.value(a), self.value(bias));
        let n = self.needs(a) || self.needs(bias);
        self.push(Op::AddRow(a, bias), v, n)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(relu);
        let n = self.needs(a);
        self.push(Op::Relu(a), v, n)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let n = self.needs(a);
        self.push(Op::Sigmoid(a), v, n)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let n = self.needs(a);
        self.push(Op::Exp(a), v, n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        assert!(parts.iter().all(|&p| self.value(p).rows == rows), "concat row mismatch");
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.data[r * cols + at..r * cols + at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        let n = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, n)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start < end && end <= x.cols);
        let mut out = Tensor::zeros(x.rows, end - start);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        let n = self.needs(a);
        self.push(Op::SliceCols(a, start), out, n)
    }

    /// Row sums as an Nx1 column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::column((0..x.rows).map(|r| x.row(r).iter().sum()).collect());
        let n = self.needs(a);
        self.push(Op::SumCols(a), v, n)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        let n = self.needs(a);
        self.push(Op::Sum(a), v, n)
    }

    /// Mean over all entries; 0 for an empty tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let len = x.data.len();
        let m = if len == 0 { 0.0 } else { x.data.iter().sum::<f64>() / len as f64 };
        let n = self.needs(a);
        self.push(Op::Mean(a), Tensor::scalar(m), n)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp + 'a>, inputs: &[Var], output: Tensor) -> Var {
        // custom ops may own parameters, so they always take part in backward
        self.push(Op::Custom(op, inputs.to_vec()), output, true)
    }

    /// Backpropagates from a scalar output, adding into `grads`.
    pub fn backward(&self, output: Var, grads: &mut Gradients) -> Result<()> {
        let seed = match self.nodes.get(output.0) {
            Some(n) => Tensor::filled(n.value.rows, n.value.cols, 1.0),
            None => return Err(Error::BackwardBeforeForward(format!("node {} was never recorded", output.0))),
        };
        self.backward_with(output, seed, grads)
    }

    /// Backpropagates an explicit upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor, grads: &mut Gradients) -> Result<()> {
        let Some(out_node) = self.nodes.get(output.0) else {
            return Err(Error::BackwardBeforeForward(format!("node {} was never recorded", output.0)));
        };
        if !seed.same_shape(&out_node.value) {
            return Err(Error::LengthMismatch("seed gradient does not match the output shape".into()));
        }
        self.check_finite()?;
        let mut g: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        g[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let Some(go) = g[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, t: Tensor, g: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut g[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param { group, offset } => {
                    let dst = &mut grads.get_mut(*group)[*offset..*offset + go.data.len()];
                    dst.iter_mut().zip(&go.data).for_each(|(d, s)| *d += s);
                }
                Op::Add(a, b) => {
                    send(*a, go.clone(), &mut g);
                    send(*b, go, &mut g);
                }
                Op::Sub(a, b) => {
                    send(*b, go.map(|v| -v), &mut g);
                    send(*a, go, &mut g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    send(*a, go.zip(y, |p, q| p * q), &mut g);
                    send(*b, go.zip(x, |p, q| p * q), &mut g);
                }
                Op::Scale(a, s) => send(*a, go.map(|v| v * s), &mut g),
                Op::AddScalar(a) => send(*a, go, &mut g),
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        // dA = dC B^T
                        let mut da = Tensor::zeros(x.rows, x.cols);
                        gemm(go.rows, go.cols, y.rows, &go.data, (go.cols, 1), &y.data, (1, y.cols), &mut da.data, 0.0);
                        send(*a, da, &mut g);
                    }
                    if self.needs(*b) {
                        // dB = A^T dC
                        let mut db = Tensor::zeros(y.rows, y.cols);
                        gemm(x.cols, x.rows, go.cols, &x.data, (1, x.cols), &go.data, (go.cols, 1), &mut db.data, 0.0);
                        send(*b, db, &mut g);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*bias) {
                        let mut db = Tensor::zeros(1, go.cols);
                        for r in 0..go.rows {
                            db.data.iter_mut().zip(go.row(r)).for_each(|(d, s)| *d += s);
                        }
                        send(*bias, db, &mut g);
                    }
                    send(*a, go, &mut g);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    send(*a, go.zip(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }), &mut g);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, go.zip(y, |gv, s| gv * s * (1.0 - s)), &mut g);
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    send(*a, go.zip(y, |gv, e| gv * e), &mut g);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        if self.needs(p) {
                            let mut t = Tensor::zeros(go.rows, cols);
                            for r in 0..go.rows {
                                t.row_mut(r).copy_from_slice(&go.row(r)[at..at + cols]);
                            }
                            send(p, t, &mut g);
                        }
                        at += cols;
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut t = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        t.row_mut(r)[*start..*start + go.cols].copy_from_slice(go.row(r));
                    }
                    send(*a, t, &mut g);
                }
                Op::SumCols(a) => {
                    let x = self.value(*a);
                    let mut t = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let gv = go.data[r];
                        t.row_mut(r).iter_mut().for_each(|v| *v = gv);
                    }
                    send(*a, t, &mut g);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    send(*a, Tensor::filled(x.rows, x.cols, go.item()), &mut g);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let len = x.data.len().max(1) as f64;
                    send(*a, Tensor::filled(x.rows, x.cols, go.item() / len), &mut g);
                }
                Op::Custom(op, inputs) => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                    let mut gin: Vec<Tensor> = vals.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
                    op.backward(&vals, &node.value, &go, &mut gin, grads);
                    for (&i, t) in inputs.iter().zip(gin) {
                        send(i, t, &mut g);
                    }
                }
            }
        }
        Ok(())
    }
}
