//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`] handle.
//! Tensors have rank 0, 1 or 2. Elementwise binary operations broadcast
//! NumPy-style after left-padding shapes to rank 2, so `[d]` broadcasts
//! against `[n, d]` (row-wise bias) and `[]` against anything.
//!
//! A tape is meant to live for a single training step: build the graph,
//! call [`Tape::backward`] on a scalar, read gradients, drop the tape.

use std::fmt;

use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise binary kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise unary kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Tanh,
    Exp,
    Ln,
    Square,
    Sqrt,
    Sin,
    Cos,
    Relu,
    Sigmoid,
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Neg => "neg",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Exp => "exp",
            UnaryKind::Ln => "ln",
            UnaryKind::Square => "square",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Sin => "sin",
            UnaryKind::Cos => "cos",
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Square => x * x,
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Sin => x.sin(),
            UnaryKind::Cos => x.cos(),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Exp => y,
            UnaryKind::Ln => 1.0 / x,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Sqrt => 0.5 / y,
            UnaryKind::Sin => x.cos(),
            UnaryKind::Cos => -x.sin(),
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Sigmoid => y * (1.0 - y),
        }
    }
}

/// The operation kinds accepted by [`Tape::forward_op`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardOp {
    MatMul,
    Add,
    Mul,
    Tanh,
    Exp,
    Ln,
    Square,
    Sin,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    Neg,
    Sub,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Scale(Var, f64),
    Offset(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLast { x: Var, start: usize, len: usize },
    SliceRows { x: Var, start: usize, len: usize },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(BinaryKind::Add, ..) => "add",
            Op::Binary(BinaryKind::Sub, ..) => "sub",
            Op::Binary(BinaryKind::Mul, ..) => "mul",
            Op::Binary(BinaryKind::Div, ..) => "div",
            Op::Unary(k, _) => k.name(),
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::ConcatLast(_) => "concat",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceLast { .. } => "slice",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Ordered list of recorded nodes. Inputs always precede the nodes that use them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Left-pads a rank ≤ 2 shape to (rows, cols).
fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1]),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (ar, ac) = as_matrix(a);
    let (br, bc) = as_matrix(b);
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    let r = dim(ar, br)?;
    let c = dim(ac, bc)?;
    Some(match a.len().max(b.len()) {
        0 => vec![],
        1 => vec![c],
        _ => vec![r, c],
    })
}

#[inline]
fn bidx(rows: usize, cols: usize, i: usize, j: usize) -> usize {
    (if rows == 1 { 0 } else { i }) * cols + if cols == 1 { 0 } else { j }
}

fn shape_error(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// `c (m×n) += a (m×k) · b (k×n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides (checked by the callers' shape validation).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if shape.len() > 2 {
            return Err(AutodiffError::InvalidTensor(format!(
                "rank {} tensors are not supported",
                shape.len()
            )));
        }
        if numel(shape) != values.len() {
            return Err(AutodiffError::InvalidTensor(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), values, requires_grad))
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, true)
    }

    /// A leaf that is excluded from differentiation.
    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a single-element tensor.
    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Gradient of the last backward root with respect to `v`; zeros if none.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; self.node(v).value.len()],
        }
    }

    pub fn grad_ref(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Generic dispatch over the named forward operations.
    pub fn forward_op(&mut self, op: ForwardOp, inputs: &[Var]) -> Result<Var> {
        let want = match op {
            ForwardOp::MatMul
            | ForwardOp::Add
            | ForwardOp::Mul
            | ForwardOp::Sub
            | ForwardOp::Div => 2,
            _ => 1,
        };
        if inputs.len() != want {
            return Err(AutodiffError::Arity {
                op: format!("{op:?}"),
                expected: want,
                got: inputs.len(),
            });
        }
        let a = inputs[0];
        match op {
            ForwardOp::MatMul => self.matmul(a, inputs[1]),
            ForwardOp::Add => self.add(a, inputs[1]),
            ForwardOp::Sub => self.sub(a, inputs[1]),
            ForwardOp::Mul => self.mul(a, inputs[1]),
            ForwardOp::Div => self.div(a, inputs[1]),
            ForwardOp::Tanh => Ok(self.tanh(a)),
            ForwardOp::Exp => Ok(self.exp(a)),
            ForwardOp::Ln => self.ln(a),
            ForwardOp::Square => Ok(self.square(a)),
            ForwardOp::Sin => Ok(self.sin(a)),
            ForwardOp::Clamp { lo, hi } => Ok(self.clamp(a, lo, hi)),
            ForwardOp::Sum => Ok(self.sum(a)),
            ForwardOp::Mean => Ok(self.mean(a)),
            ForwardOp::Neg => Ok(self.neg(a)),
        }
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix product. Rank-1 operands act as a row (left) or column (right) vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => return Err(shape_error("matmul", &[&sa, &sb])),
        };
        let (k2, n) = match sb.len() {
            1 => (sb[0], 1),
            2 => (sb[0], sb[1]),
            _ => return Err(shape_error("matmul", &[&sa, &sb])),
        };
        if k != k2 {
            return Err(shape_error("matmul", &[&sa, &sb]));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let shape = match (sa.len(), sb.len()) {
            (2, 2) => vec![m, n],
            (2, 1) => vec![m],
            (1, 2) => vec![n],
            _ => vec![],
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), shape, out, rg))
    }

    // ---- elementwise binary -------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let name = Op::Binary(kind, a, b).name();
        let shape = broadcast_shape(sa, sb).ok_or_else(|| shape_error(name, &[sa, sb]))?;
        let (ar, ac) = as_matrix(sa);
        let (br, bc) = as_matrix(sb);
        let (r, c) = as_matrix(&shape);
        let av = self.value(a);
        let bv = self.value(b);
        if kind == BinaryKind::Div {
            if let Some(pos) = bv.iter().position(|&x| x == 0.0) {
                return Err(AutodiffError::Domain {
                    op: "div",
                    detail: format!("division by zero at element {pos}"),
                });
            }
        }
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    out.push(f(av[bidx(ar, ac, i, j)], bv[bidx(br, bc, i, j)]));
                }
            }
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Binary(kind, a, b), shape, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    // ---- elementwise unary --------------------------------------------

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| kind.eval(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Op::Unary(kind, x), shape, out, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(pos) = self.value(x).iter().position(|&v| v <= 0.0 || v.is_nan()) {
            return Err(AutodiffError::Domain {
                op: "ln",
                detail: format!(
                    "argument {} at element {pos} is not positive",
                    self.value(x)[pos]
                ),
            });
        }
        Ok(self.unary(UnaryKind::Ln, x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(pos) = self.value(x).iter().position(|&v| v <= 0.0 || v.is_nan()) {
            return Err(AutodiffError::Domain {
                op: "sqrt",
                detail: format!(
                    "argument {} at element {pos} is not positive",
                    self.value(x)[pos]
                ),
            });
        }
        Ok(self.unary(UnaryKind::Sqrt, x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Cos, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// Saturates to `[lo, hi]`. The gradient passes through on the closed
    /// interval and is zero outside it.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Op::Clamp { x, lo, hi }, shape, out, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Op::Scale(x, c), shape, out, rg)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Op::Offset(x), shape, out, rg)
    }

    // ---- reductions ---------------------------------------------------

    /// Sum of all elements (scalar result).
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), vec![], vec![s], rg)
    }

    /// Mean of all elements (scalar result).
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Op::Mean(x), vec![], vec![m], rg)
    }

    /// Sums over the last axis: `[n, d] → [n]`, `[d] → []`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (r, c) = as_matrix(&shape);
        let v = self.value(x);
        let out: Vec<f64> = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        let out_shape = match shape.len() {
            2 => vec![r],
            _ => vec![],
        };
        let rg = self.rg(x);
        self.push(Op::SumLast(x), out_shape, out, rg)
    }

    // ---- structural ---------------------------------------------------

    /// Concatenates along the last axis. All parts must share rank and leading dim.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_error("concat", &[]));
        }
        let rank = self.shape(parts[0]).len();
        let rows = as_matrix(self.shape(parts[0])).0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || rank == 0 || as_matrix(s).0 != rows {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(shape_error("concat", &shapes));
            }
        }
        let cols: Vec<usize> = parts.iter().map(|&p| as_matrix(self.shape(p)).1).collect();
        let total: usize = cols.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &c) in parts.iter().zip(&cols) {
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatLast(parts.to_vec()), shape, out, rg))
    }

    /// Stacks rank-2 tensors along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_error("concat_rows", &[]));
        }
        let cols = self.shape(parts[0]).get(1).copied().unwrap_or(0);
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(shape_error("concat_rows", &shapes));
            }
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p));
            rows += self.shape(p)[0];
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![rows, cols], out, rg))
    }

    /// Takes `len` entries starting at `start` along the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (r, c) = as_matrix(&shape);
        if shape.is_empty() || start + len > c {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                shapes: vec![shape, vec![start, len]],
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let out_shape = if shape.len() == 1 { vec![len] } else { vec![r, len] };
        let rg = self.rg(x);
        Ok(self.push(Op::SliceLast { x, start, len }, out_shape, out, rg))
    }

    /// Takes rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || start + len > shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_rows",
                shapes: vec![shape, vec![start, len]],
            });
        }
        let c = shape[1];
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRows { x, start, len }, vec![len, c], out, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x).to_vec();
        if numel(&old) != numel(shape) || shape.len() > 2 {
            return Err(shape_error("reshape", &[&old, shape]));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), out, rg))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass from a scalar root. Replaces gradients from any earlier pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if !shape.is_empty() {
            return Err(AutodiffError::NonScalarRoot {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => self.back_matmul(*a, *b, g, grads),
            Op::Binary(kind, a, b) => self.back_binary(*kind, *a, *b, &node.shape, g, grads),
            Op::Unary(kind, x) => {
                if let Some(buf) = self.slot(*x, grads) {
                    let xv = &self.nodes[x.0].value;
                    for (((o, &gi), &xi), &yi) in buf.iter_mut().zip(g).zip(xv).zip(&node.value) {
                        *o += gi * kind.deriv(xi, yi);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if let Some(buf) = self.slot(*x, grads) {
                    let xv = &self.nodes[x.0].value;
                    for ((o, &gi), &xi) in buf.iter_mut().zip(g).zip(xv) {
                        if xi >= *lo && xi <= *hi {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = self.slot(*x, grads) {
                    buf.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(buf) = self.slot(*x, grads) {
                    let s = g[0] / buf.len().max(1) as f64;
                    buf.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::SumLast(x) => {
                let (_, c) = as_matrix(&self.nodes[x.0].shape);
                if let Some(buf) = self.slot(*x, grads) {
                    for (i, row) in buf.chunks_mut(c.max(1)).enumerate() {
                        row.iter_mut().for_each(|o| *o += g[i]);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(buf) = self.slot(*x, grads) {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += c * gi;
                    }
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if let Some(buf) = self.slot(*x, grads) {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let (rows, total) = as_matrix(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let c = as_matrix(&self.nodes[p.0].shape).1;
                    if let Some(buf) = self.slot(p, grads) {
                        for i in 0..rows {
                            for j in 0..c {
                                buf[i * c + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(buf) = self.slot(p, grads) {
                        for (o, &gi) in buf.iter_mut().zip(&g[off..off + n]) {
                            *o += gi;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceLast { x, start, len } => {
                let (r, c) = as_matrix(&self.nodes[x.0].shape);
                if let Some(buf) = self.slot(*x, grads) {
                    for i in 0..r {
                        for j in 0..*len {
                            buf[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::SliceRows { x, start, len } => {
                let c = self.nodes[x.0].shape[1];
                if let Some(buf) = self.slot(*x, grads) {
                    for (o, &gi) in buf[start * c..(start + len) * c].iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` if `v` is constant.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn back_matmul(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let (m, k) = if sa.len() == 1 { (1, sa[0]) } else { (sa[0], sa[1]) };
        let n = if sb.len() == 1 { 1 } else { sb[1] };
        if self.nodes[a.0].requires_grad {
            let bv = &self.nodes[b.0].value;
            let buf = self.slot(a, grads).expect("requires grad");
            // dA (m×k) += dC (m×n) · Bᵀ (n×k)
            gemm_acc(m, n, k, g, (n as isize, 1), bv, (1, n as isize), buf, 1.0);
        }
        if self.nodes[b.0].requires_grad {
            let av = &self.nodes[a.0].value;
            let buf = self.slot(b, grads).expect("requires grad");
            // dB (k×n) += Aᵀ (k×m) · dC (m×n)
            gemm_acc(k, m, n, av, (1, k as isize), g, (n as isize, 1), buf, 1.0);
        }
    }

    fn back_binary(
        &self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (r, c) = as_matrix(out_shape);
        let (ar, ac) = as_matrix(&self.nodes[a.0].shape);
        let (br, bc) = as_matrix(&self.nodes[b.0].shape);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let local = |x: f64, y: f64| -> (f64, f64) {
            match kind {
                BinaryKind::Add => (1.0, 1.0),
                BinaryKind::Sub => (1.0, -1.0),
                BinaryKind::Mul => (y, x),
                BinaryKind::Div => (1.0 / y, -x / (y * y)),
            }
        };
        if self.nodes[a.0].requires_grad {
            let buf = self.slot(a, grads).expect("requires grad");
            for i in 0..r {
                for j in 0..c {
                    let ia = bidx(ar, ac, i, j);
                    let (da, _) = local(av[ia], bv[bidx(br, bc, i, j)]);
                    buf[ia] += g[i * c + j] * da;
                }
            }
        }
        if self.nodes[b.0].requires_grad {
            let buf = self.slot(b, grads).expect("requires grad");
            for i in 0..r {
                for j in 0..c {
                    let ib = bidx(br, bc, i, j);
                    let (_, db) = local(av[bidx(ar, ac, i, j)], bv[ib]);
                    buf[ib] += g[i * c + j] * db;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tanh_of_zero_and_its_slope() {
        let mut t = Tape::new();
        let x = t.param(vec![0.0], &[]).unwrap();
        let y = t.tanh(x);
        assert_eq!(t.item(y), 0.0);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), vec![1.0]);
    }

    #[test]
    fn clamp_saturates_and_blocks_gradient_outside() {
        let mut t = Tape::new();
        let x = t.param(vec![3.0, -1.0, 2.0], &[3]).unwrap();
        let y = t.clamp(x, -2.0, 2.0);
        assert_eq!(t.value(y), &[2.0, -1.0, 2.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        // boundary counts as inside
        assert_eq!(t.grad(x), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn exp_inverts_ln() {
        let mut t = Tape::new();
        let x = t.constant(vec![5.0], &[]).unwrap();
        let l = t.ln(x).unwrap();
        let e = t.exp(l);
        assert!(close(t.item(e), 5.0, 1e-12));
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(vec![3.0], &[]).unwrap();
        let y = t.square(x);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), vec![6.0]);
    }

    #[test]
    fn sum_of_matvec_gives_broadcast_rows() {
        // root = Σ_i Σ_j W_ij v_j  ⇒  ∂/∂W_ij = v_j
        let mut t = Tape::new();
        let w = t.param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let v = t.constant(vec![5.0, -7.0], &[2]).unwrap();
        let y = t.matmul(w, v).unwrap();
        assert_eq!(t.value(y), &[1.0 * 5.0 - 2.0 * 7.0, 3.0 * 5.0 - 4.0 * 7.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w), vec![5.0, -7.0, 5.0, -7.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_chain_rule() {
        // C = A B, L = Σ C ⊙ G  ⇒  dA = G Bᵀ, dB = Aᵀ G
        let mut t = Tape::new();
        let a = t.param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = t.param(vec![1.0, -1.0, 0.5, 2.0, -2.0, 1.0], &[3, 2]).unwrap();
        let gm = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let c = t.matmul(a, b).unwrap();
        let p = t.mul(c, gm).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        let av = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let bv = [[1.0, -1.0], [0.5, 2.0], [-2.0, 1.0]];
        let g = [[1.0, 2.0], [3.0, 4.0]];
        let mut da = vec![];
        for i in 0..2 {
            for k in 0..3 {
                da.push((0..2).map(|j| g[i][j] * bv[k][j]).sum::<f64>());
            }
        }
        let mut db = vec![];
        for k in 0..3 {
            for j in 0..2 {
                db.push((0..2).map(|i| av[i][k] * g[i][j]).sum::<f64>());
            }
        }
        assert_eq!(t.grad(a), da);
        assert_eq!(t.grad(b), db);
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let b = t.param(vec![0.5, -0.5], &[2]).unwrap();
        let y = t.add(x, b).unwrap();
        assert_eq!(t.shape(y), &[3, 2]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(b), vec![3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = t.constant(vec![0.0; 4], &[2, 2]).unwrap();
        match t.add(a, b) {
            Err(AutodiffError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 2]]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(matches!(t.matmul(a, b), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn ln_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 0.0], &[2]).unwrap();
        assert!(matches!(t.ln(x), Err(AutodiffError::Domain { op: "ln", .. })));
        let y = t.constant(vec![1.0, -3.0], &[2]).unwrap();
        assert!(matches!(t.ln(y), Err(AutodiffError::Domain { .. })));
        assert!(matches!(t.div(x, x), Err(AutodiffError::Domain { op: "div", .. })));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(t.backward(x), Err(AutodiffError::NonScalarRoot { .. })));
    }

    #[test]
    fn grad_is_zero_before_backward() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0], &[2]).unwrap();
        let _ = t.square(x);
        assert_eq!(t.grad(x), vec![0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x·x + 3x  ⇒  dy/dx = 2x + 3
        let mut t = Tape::new();
        let x = t.param(vec![2.0], &[]).unwrap();
        let xx = t.mul(x, x).unwrap();
        let x3 = t.scale(x, 3.0);
        let y = t.add(xx, x3).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), vec![7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(vec![2.0], &[]).unwrap();
        let x = t.param(vec![3.0], &[]).unwrap();
        let y = t.mul(c, x).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad_ref(c).is_none());
        assert_eq!(t.grad(x), vec![2.0]);
    }

    #[test]
    fn structural_ops_route_gradients() {
        let mut t = Tape::new();
        let a = t.param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = t.param(vec![5.0, 6.0], &[2, 1]).unwrap();
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = t.slice(c, 1, 2).unwrap();
        assert_eq!(t.value(s), &[2.0, 5.0, 4.0, 6.0]);
        let r = t.concat_rows(&[s, s]).unwrap();
        assert_eq!(t.shape(r), &[4, 2]);
        let top = t.slice_rows(r, 1, 2).unwrap();
        assert_eq!(t.value(top), &[4.0, 6.0, 2.0, 5.0]);
        let w = t.constant(vec![1.0, 10.0, 100.0, 1000.0], &[2, 2]).unwrap();
        let p = t.mul(top, w).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        // a[0][1] appears in row 1 of top (weight 100); a[1][1] in row 0 (weight 1)
        assert_eq!(t.grad(a), vec![0.0, 100.0, 0.0, 1.0]);
        assert_eq!(t.grad(b), vec![1000.0, 10.0]);
    }

    #[test]
    fn sum_last_reduces_rows() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let s = t.sum_last(x);
        assert_eq!(t.value(s), &[6.0, 15.0]);
        let w = t.constant(vec![1.0, -1.0], &[2]).unwrap();
        let p = t.mul(s, w).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x), vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn forward_op_dispatch() {
        let mut t = Tape::new();
        let x = t.constant(vec![3.0], &[]).unwrap();
        let y = t.forward_op(ForwardOp::Clamp { lo: -2.0, hi: 2.0 }, &[x]).unwrap();
        assert_eq!(t.item(y), 2.0);
        assert!(matches!(
            t.forward_op(ForwardOp::Add, &[x]),
            Err(AutodiffError::Arity { expected: 2, got: 1, .. })
        ));
    }
}
