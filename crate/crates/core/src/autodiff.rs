//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated; [`Var`] is a cheap
//! handle into the tape. The primitive set is fixed: matmul, transpose,
//! elementwise add/sub/mul/div (with scalar and trailing-axis row
//! broadcasting), exp, log, square, sqrt, negation, tanh, clamp-min,
//! sum/mean reduction, slice/concat along an axis, Cholesky (lower),
//! lower/upper triangular solves (left), diagonal extraction and trace.
//! Cholesky and triangular-solve adjoints are analytic.
//!
//! Tapes are rebuilt for every training step and are not shareable across
//! threads during a pass; tensors themselves are immutable and freely
//! transferable.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{
    cholesky_raw, phi_lower, solve_lower_raw, solve_upper_raw, symmetrize, Tensor,
};

/// Ordered name -> tensor map used for parameters and gradients.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
    /// rhs is a vector broadcast across the rows of the lhs matrix
    RhsRow,
    /// lhs is a vector broadcast across the rows of the rhs matrix
    LhsRow,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Neg(usize),
    Tanh(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Cholesky(usize),
    SolveLower {
        t: usize,
        b: usize,
    },
    SolveUpper {
        t: usize,
        b: usize,
    },
    Diag(usize),
    Trace(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Neg(..) => "neg",
            Op::Tanh(..) => "tanh",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Cholesky(..) => "cholesky",
            Op::SolveLower { .. } => "solve_lower",
            Op::SolveUpper { .. } => "solve_upper",
            Op::Diag(..) => "diag",
            Op::Trace(..) => "trace",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    name: Option<String>,
}

/// Recording tape. Single-threaded; values of every node are cached so a
/// subsequent [`Tape::backward`] never recomputes the forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaves: RefCell<BTreeMap<String, usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(node {}, shape {:?})", self.idx, self.shape())
    }
}

/// Gradients of a scalar root with respect to every named leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_name: ParamMap,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn into_map(self) -> ParamMap {
        self.by_name
    }

    pub fn map(&self) -> &ParamMap {
        &self.by_name
    }
}

fn bcast_kind(a: &[usize], b: &[usize]) -> Option<(Bcast, Vec<usize>)> {
    if a == b {
        Some((Bcast::Same, a.to_vec()))
    } else if a.is_empty() {
        Some((Bcast::LhsScalar, b.to_vec()))
    } else if b.is_empty() {
        Some((Bcast::RhsScalar, a.to_vec()))
    } else if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        Some((Bcast::RhsRow, a.to_vec()))
    } else if a.len() == 1 && b.len() == 2 && b[1] == a[0] {
        Some((Bcast::LhsRow, b.to_vec()))
    } else {
        None
    }
}

/// Materialises `t` at `shape` according to the broadcast that was applied.
fn expand(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    if t.is_scalar() {
        return Tensor::filled(shape, t.data()[0]);
    }
    // row vector tiled across the rows of a matrix
    let (n, d) = (shape[0], shape[1]);
    debug_assert_eq!(t.shape(), &[d]);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape.to_vec(), data).expect("expand")
}

/// Reduces a gradient at the output shape back to an operand's shape.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    if shape.is_empty() {
        return Tensor::scalar(g.sum());
    }
    debug_assert_eq!(shape.len(), 1);
    g.sum_axis0()
}

fn tril(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i.min(n - 1) {
            out.set2(i, j, a.get2(i, j));
        }
    }
    out
}

fn triu(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            out.set2(i, j, a.get2(i, j));
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, name: Option<String>) -> Result<Var<'_>> {
        let idx = self.nodes.borrow().len();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: idx,
            });
        }
        self.nodes.borrow_mut().push(Node { op, value, name });
        Ok(Var { tape: self, idx })
    }

    /// Binds a named differentiable leaf.
    pub fn var(&self, name: &str, value: Tensor) -> Result<Var<'_>> {
        if self.leaves.borrow().contains_key(name) {
            return Err(Error::DuplicateLeaf {
                name: name.to_string(),
            });
        }
        let v = self.push(Op::Leaf, value, Some(name.to_string()))?;
        self.leaves.borrow_mut().insert(name.to_string(), v.idx);
        Ok(v)
    }

    /// Records a non-differentiable constant.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(Op::Constant, value, None)
    }

    /// Scalar constant; `c` must be finite.
    pub fn scalar(&self, c: f64) -> Var<'_> {
        assert!(c.is_finite(), "scalar constant must be finite");
        self.push(Op::Constant, Tensor::scalar(c), None)
            .expect("finite scalar")
    }

    fn value_of(&self, idx: usize) -> Tensor {
        self.nodes.borrow()[idx].value.clone()
    }

    fn shape_of(&self, idx: usize) -> Vec<usize> {
        self.nodes.borrow()[idx].value.shape().to_vec()
    }

    /// Concatenates along `axis` (0 or 1; rank-1 tensors only along 0).
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        for p in parts {
            if !std::ptr::eq(p.tape, self) {
                return Err(Error::InvalidArgument(
                    "concat of vars from a different tape".into(),
                ));
            }
        }
        let nodes = self.nodes.borrow();
        let first = nodes[parts[0].idx].value.shape().to_vec();
        let rank = first.len();
        if rank == 0 || axis >= rank {
            return Err(Error::Shape {
                op: "concat",
                node: Some(nodes.len()),
                detail: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = nodes[p.idx].value.shape();
            if s.len() != rank {
                return Err(Error::Shape {
                    op: "concat",
                    node: Some(nodes.len()),
                    detail: format!("rank mismatch: {first:?} vs {s:?}"),
                });
            }
            for (ax, (&a, &b)) in out_shape.iter().zip(s.iter()).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::Shape {
                        op: "concat",
                        node: Some(nodes.len()),
                        detail: format!("extent mismatch off axis {axis}: {first:?} vs {s:?}"),
                    });
                }
            }
            out_shape[axis] += s[axis];
        }
        let value = if rank == 1 || axis == 0 {
            let mut data = Vec::new();
            for p in parts {
                data.extend_from_slice(nodes[p.idx].value.data());
            }
            Tensor::new(out_shape, data)?
        } else {
            // axis == 1, rank 2
            let n = first[0];
            let total: usize = out_shape[1];
            let mut data = Vec::with_capacity(n * total);
            for i in 0..n {
                for p in parts {
                    let t = &nodes[p.idx].value;
                    data.extend_from_slice(t.row(i));
                }
            }
            Tensor::new(out_shape, data)?
        };
        let inputs = parts.iter().map(|p| p.idx).collect();
        drop(nodes);
        self.push(Op::Concat { inputs, axis }, value, None)
    }

    /// Reverse pass from a scalar `root`; returns gradients for every bound
    /// leaf (zeros for leaves the root does not depend on). Adjoints are
    /// freshly zero-initialised, so repeated calls do not accumulate.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::InvalidArgument(
                "backward root from a different tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.idx].value.shape();
        if !root_shape.is_empty() {
            return Err(Error::NonScalarRoot {
                shape: root_shape.to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.idx + 1];
        adj[root.idx] = Some(Tensor::scalar(1.0));

        fn acc(adj: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
            match &mut adj[idx] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        }

        let mut grads: ParamMap = BTreeMap::new();
        for i in (0..=root.idx).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.name {
                        grads.insert(name.clone(), g);
                    }
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(&mut adj, *a, g.matmul(&bv.t()));
                    acc(&mut adj, *b, av.t().matmul(&g));
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.t()),
                Op::Add(a, b) => {
                    acc(&mut adj, *a, reduce_to(&g, &nodes[*a].value.shape().to_vec()));
                    acc(&mut adj, *b, reduce_to(&g, &nodes[*b].value.shape().to_vec()));
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, reduce_to(&g, &nodes[*a].value.shape().to_vec()));
                    acc(
                        &mut adj,
                        *b,
                        reduce_to(&g.scale(-1.0), &nodes[*b].value.shape().to_vec()),
                    );
                }
                Op::Mul(a, b) => {
                    let out_shape = node.value.shape().to_vec();
                    let ae = expand(&nodes[*a].value, &out_shape);
                    let be = expand(&nodes[*b].value, &out_shape);
                    acc(
                        &mut adj,
                        *a,
                        reduce_to(&g.hadamard(&be), nodes[*a].value.shape()),
                    );
                    acc(
                        &mut adj,
                        *b,
                        reduce_to(&g.hadamard(&ae), nodes[*b].value.shape()),
                    );
                }
                Op::Div(a, b) => {
                    let out_shape = node.value.shape().to_vec();
                    let be = expand(&nodes[*b].value, &out_shape);
                    let ga = g.zip(&be, |gi, bi| gi / bi);
                    // d/db (a/b) = -out / b
                    let gb = g
                        .hadamard(&node.value)
                        .zip(&be, |num, bi| -num / bi);
                    acc(&mut adj, *a, reduce_to(&ga, nodes[*a].value.shape()));
                    acc(&mut adj, *b, reduce_to(&gb, nodes[*b].value.shape()));
                }
                Op::Exp(a) => acc(&mut adj, *a, g.hadamard(&node.value)),
                Op::Log(a) => acc(&mut adj, *a, g.zip(&nodes[*a].value, |gi, xi| gi / xi)),
                Op::Square(a) => acc(
                    &mut adj,
                    *a,
                    g.zip(&nodes[*a].value, |gi, xi| 2.0 * xi * gi),
                ),
                Op::Sqrt(a) => acc(
                    &mut adj,
                    *a,
                    g.zip(&node.value, |gi, oi| gi / (2.0 * oi)),
                ),
                Op::Neg(a) => acc(&mut adj, *a, g.scale(-1.0)),
                Op::Tanh(a) => acc(
                    &mut adj,
                    *a,
                    g.zip(&node.value, |gi, oi| gi * (1.0 - oi * oi)),
                ),
                Op::ClampMin(a, c) => {
                    let c = *c;
                    acc(
                        &mut adj,
                        *a,
                        g.zip(&nodes[*a].value, |gi, xi| if xi > c { gi } else { 0.0 }),
                    );
                }
                Op::Sum(a) => {
                    let gs = g.as_scalar().expect("sum adjoint is scalar");
                    acc(&mut adj, *a, Tensor::filled(nodes[*a].value.shape(), gs));
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel() as f64;
                    let gs = g.as_scalar().expect("mean adjoint is scalar") / n;
                    acc(&mut adj, *a, Tensor::filled(nodes[*a].value.shape(), gs));
                }
                Op::Slice {
                    input,
                    axis,
                    start,
                    len,
                } => {
                    let src = &nodes[*input].value;
                    let mut full = Tensor::zeros(src.shape());
                    scatter_slice(&mut full, &g, *axis, *start, *len);
                    acc(&mut adj, *input, full);
                }
                Op::Concat { inputs, axis } => {
                    let mut offset = 0usize;
                    for &inp in inputs {
                        let s = nodes[inp].value.shape().to_vec();
                        let len = s[*axis];
                        let piece = take_slice(&g, *axis, offset, len);
                        acc(&mut adj, inp, piece);
                        offset += len;
                    }
                }
                Op::Cholesky(a) => {
                    // Murray-style adjoint via two triangular solves:
                    //   X = L^{-T} . Phi(L^T Lbar) . L^{-1},  Abar = 0.5 (X + X^T)
                    let l = &node.value;
                    let lbar = tril(&g);
                    let mid = phi_lower(&l.t().matmul(&lbar));
                    let y = solve_upper_raw(&l.t(), &mid);
                    let x = solve_upper_raw(&l.t(), &y.t()).t();
                    acc(&mut adj, *a, symmetrize(&x));
                }
                Op::SolveLower { t, b } => {
                    let tv = &nodes[*t].value;
                    let x = &node.value;
                    let bbar = solve_upper_raw(&tv.t(), &g);
                    let tbar = tril(&bbar.matmul(&x.t()).scale(-1.0));
                    acc(&mut adj, *b, bbar);
                    acc(&mut adj, *t, tbar);
                }
                Op::SolveUpper { t, b } => {
                    let tv = &nodes[*t].value;
                    let x = &node.value;
                    let bbar = solve_lower_raw(&tv.t(), &g);
                    let tbar = triu(&bbar.matmul(&x.t()).scale(-1.0));
                    acc(&mut adj, *b, bbar);
                    acc(&mut adj, *t, tbar);
                }
                Op::Diag(a) => {
                    acc(&mut adj, *a, Tensor::diag_embed(g.data()));
                }
                Op::Trace(a) => {
                    let n = nodes[*a].value.rows();
                    let gs = g.as_scalar().expect("trace adjoint is scalar");
                    acc(&mut adj, *a, Tensor::eye(n).scale(gs));
                }
            }
        }

        // every bound leaf gets an entry, zero when unreached
        for (name, &idx) in self.leaves.borrow().iter() {
            grads
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(nodes[idx].value.shape()));
        }
        Ok(Gradients { by_name: grads })
    }
}

fn take_slice(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    match t.rank() {
        1 => Tensor::vector(t.data()[start..start + len].to_vec()),
        2 => {
            let (n, d) = (t.shape()[0], t.shape()[1]);
            if axis == 0 {
                Tensor::new(vec![len, d], t.data()[start * d..(start + len) * d].to_vec())
                    .expect("slice rows")
            } else {
                let mut data = Vec::with_capacity(n * len);
                for i in 0..n {
                    data.extend_from_slice(&t.row(i)[start..start + len]);
                }
                Tensor::new(vec![n, len], data).expect("slice cols")
            }
        }
        r => panic!("slice on rank-{r} tensor"),
    }
}

fn scatter_slice(dst: &mut Tensor, piece: &Tensor, axis: usize, start: usize, len: usize) {
    match dst.rank() {
        1 => {
            dst.data_mut()[start..start + len].copy_from_slice(piece.data());
        }
        2 => {
            let d = dst.shape()[1];
            if axis == 0 {
                dst.data_mut()[start * d..(start + len) * d].copy_from_slice(piece.data());
            } else {
                let n = dst.shape()[0];
                for i in 0..n {
                    let row = &mut dst.data_mut()[i * d + start..i * d + start + len];
                    row.copy_from_slice(piece.row(i));
                }
            }
        }
        r => panic!("scatter on rank-{r} tensor"),
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.idx)
    }

    pub fn node_id(&self) -> usize {
        self.idx
    }

    fn same_tape(&self, rhs: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, rhs.tape) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "operands recorded on different tapes".into(),
            ))
        }
    }

    fn binary(
        self,
        rhs: Var<'t>,
        make: impl Fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let op = make(self.idx, rhs.idx);
        let (_, out_shape) = bcast_kind(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
            op: op.name(),
            node: Some(self.tape.len()),
            detail: format!(
                "cannot broadcast {:?} with {:?} (nodes {}, {})",
                a.shape(),
                b.shape(),
                self.idx,
                rhs.idx
            ),
        })?;
        let ae = expand(&a, &out_shape);
        let be = expand(&b, &out_shape);
        let value = ae.zip(&be, f);
        self.tape.push(op, value, None)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Add, |x, y| x + y)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Mul, |x, y| x * y)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Op::Div, |x, y| x / y)
    }

    /// Multiplication by a compile-time-known finite scalar.
    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let s = self.tape.scalar(c);
        self.mul(s)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
            return Err(Error::Shape {
                op: "matmul",
                node: Some(self.tape.len()),
                detail: format!(
                    "{:?} x {:?} (nodes {}, {})",
                    a.shape(),
                    b.shape(),
                    self.idx,
                    rhs.idx
                ),
            });
        }
        self.tape
            .push(Op::MatMul(self.idx, rhs.idx), a.matmul(&b), None)
    }

    pub fn t(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                node: Some(self.tape.len()),
                detail: format!("rank-{} input at node {}", a.rank(), self.idx),
            });
        }
        self.tape.push(Op::Transpose(self.idx), a.t(), None)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let value = self.value().map(f);
        self.tape.push(op, value, None)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.idx), f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Op::Log(self.idx), f64::ln)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Op::Square(self.idx), |x| x * x)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Op::Sqrt(self.idx), f64::sqrt)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Op::Neg(self.idx), |x| -x)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Op::Tanh(self.idx), f64::tanh)
    }

    pub fn clamp_min(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::ClampMin(self.idx, c), |x| x.max(c))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.push(Op::Sum(self.idx), value, None)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.numel() == 0 {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(v.sum() / v.numel() as f64);
        self.tape.push(Op::Mean(self.idx), value, None)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let rank = v.rank();
        if rank == 0 || axis >= rank || start + len > v.shape()[axis] {
            return Err(Error::Shape {
                op: "slice",
                node: Some(self.tape.len()),
                detail: format!(
                    "range {start}..{} on axis {axis} of {:?} (node {})",
                    start + len,
                    v.shape(),
                    self.idx
                ),
            });
        }
        let value = take_slice(&v, axis, start, len);
        self.tape.push(
            Op::Slice {
                input: self.idx,
                axis,
                start,
                len,
            },
            value,
            None,
        )
    }

    /// Lower Cholesky factor of the symmetrised input, `L L^T = 0.5 (A + A^T)`.
    pub fn cholesky(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || a.rows() != a.cols() {
            return Err(Error::Shape {
                op: "cholesky",
                node: Some(self.tape.len()),
                detail: format!("{:?} at node {}", a.shape(), self.idx),
            });
        }
        let l = cholesky_raw(&a)?;
        self.tape.push(Op::Cholesky(self.idx), l, None)
    }

    /// Solves `self X = rhs` with `self` lower-triangular.
    pub fn solve_lower(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (t, b) = (self.value(), rhs.value());
        check_solve_shapes(&t, &b, "solve_lower", self.tape.len(), self.idx, rhs.idx)?;
        let x = solve_lower_raw(&t, &b);
        self.tape.push(
            Op::SolveLower {
                t: self.idx,
                b: rhs.idx,
            },
            x,
            None,
        )
    }

    /// Solves `self X = rhs` with `self` upper-triangular.
    pub fn solve_upper(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (t, b) = (self.value(), rhs.value());
        check_solve_shapes(&t, &b, "solve_upper", self.tape.len(), self.idx, rhs.idx)?;
        let x = solve_upper_raw(&t, &b);
        self.tape.push(
            Op::SolveUpper {
                t: self.idx,
                b: rhs.idx,
            },
            x,
            None,
        )
    }

    pub fn diag(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || a.rows() != a.cols() {
            return Err(Error::Shape {
                op: "diag",
                node: Some(self.tape.len()),
                detail: format!("{:?} at node {}", a.shape(), self.idx),
            });
        }
        let n = a.rows();
        let d: Vec<f64> = (0..n).map(|i| a.get2(i, i)).collect();
        self.tape.push(Op::Diag(self.idx), Tensor::vector(d), None)
    }

    pub fn trace(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || a.rows() != a.cols() {
            return Err(Error::Shape {
                op: "trace",
                node: Some(self.tape.len()),
                detail: format!("{:?} at node {}", a.shape(), self.idx),
            });
        }
        let n = a.rows();
        let tr: f64 = (0..n).map(|i| a.get2(i, i)).sum();
        self.tape.push(Op::Trace(self.idx), Tensor::scalar(tr), None)
    }
}

fn check_solve_shapes(
    t: &Tensor,
    b: &Tensor,
    op: &'static str,
    node: usize,
    t_idx: usize,
    b_idx: usize,
) -> Result<()> {
    if t.rank() != 2 || t.rows() != t.cols() || b.rank() != 2 || b.rows() != t.rows() {
        return Err(Error::Shape {
            op: if op == "solve_lower" {
                "solve_lower"
            } else {
                "solve_upper"
            },
            node: Some(node),
            detail: format!(
                "{:?} \\ {:?} (nodes {t_idx}, {b_idx})",
                t.shape(),
                b.shape()
            ),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

/// Per-parameter result of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_abs_err: f64,
    /// Max relative error over entries whose absolute error exceeds the
    /// check's absolute tolerance; small-magnitude noise is not held to the
    /// relative tolerance.
    pub max_rel_err: f64,
    pub worst_entry: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub atol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    pub fn max_abs_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_abs_err))
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err() < rel_tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<40} max_abs_err {:>12.4e}  max_rel_err {:>12.4e}  (entry {}: analytic {:.8e}, numeric {:.8e})",
                p.name, p.max_abs_err, p.max_rel_err, p.worst_entry, p.worst_analytic, p.worst_numeric
            )?;
        }
        write!(
            f,
            "overall: max_abs_err {:.4e}, max_rel_err {:.4e} (atol {:.1e})",
            self.max_abs_err(),
            self.max_rel_err(),
            self.atol
        )
    }
}

/// Central-difference comparison of reverse-mode gradients for a scalar
/// function, entry by entry over every parameter.
///
/// `eval` must be deterministic: two calls with the same parameters must
/// return the same value (freeze any sampling noise before checking).
pub fn check_gradients<E, G>(
    params: &ParamMap,
    eval: E,
    grad: G,
    step: f64,
    atol: f64,
) -> Result<GradCheckReport>
where
    E: Fn(&ParamMap) -> Result<f64>,
    G: Fn(&ParamMap) -> Result<ParamMap>,
{
    let analytic = grad(params)?;
    let mut out = Vec::new();
    for (name, tensor) in params {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?;
        if a.shape() != tensor.shape() {
            return Err(Error::Shape {
                op: "check_gradients",
                node: None,
                detail: format!(
                    "gradient shape {:?} != parameter shape {:?} for `{name}`",
                    a.shape(),
                    tensor.shape()
                ),
            });
        }
        let mut check = ParamCheck {
            name: name.clone(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst_entry: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for k in 0..tensor.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[k] += step;
            let f_plus = eval(&plus)?;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[k] -= step;
            let f_minus = eval(&minus)?;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let an = a.data()[k];
            let abs = (an - numeric).abs();
            let rel = if abs <= atol {
                0.0
            } else {
                abs / an.abs().max(numeric.abs())
            };
            if abs > check.max_abs_err {
                check.max_abs_err = abs;
            }
            if rel >= check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_entry = k;
                check.worst_analytic = an;
                check.worst_numeric = numeric;
            }
        }
        out.push(check);
    }
    Ok(GradCheckReport { params: out, atol })
}

/// Pins the higher-ranked signature of a tape-builder closure; wrapping a
/// closure in this identity helper lets the compiler infer the `for<'t>`
/// bound that [`check_tape_builder`] requires.
pub fn tape_builder<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &BTreeMap<String, Var<'t>>) -> Result<Var<'t>>,
{
    f
}

/// Evaluates a tape-builder closure at `params` and returns the scalar value.
pub fn eval_tape_builder<F>(builder: &F, params: &ParamMap) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &BTreeMap<String, Var<'t>>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, tensor) in params {
        vars.insert(name.clone(), tape.var(name, tensor.clone())?);
    }
    let root = builder(&tape, &vars)?;
    root.value().as_scalar()
}

/// Evaluates a tape-builder closure and returns gradients for every parameter.
pub fn grad_tape_builder<F>(builder: &F, params: &ParamMap) -> Result<ParamMap>
where
    F: for<'t> Fn(&'t Tape, &BTreeMap<String, Var<'t>>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, tensor) in params {
        vars.insert(name.clone(), tape.var(name, tensor.clone())?);
    }
    let root = builder(&tape, &vars)?;
    let grads = tape.backward(root)?;
    Ok(grads.into_map())
}

/// Gradient check for a function expressed directly as a tape builder.
pub fn check_tape_builder<F>(
    builder: F,
    params: &ParamMap,
    step: f64,
    atol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &BTreeMap<String, Var<'t>>) -> Result<Var<'t>>,
{
    check_gradients(
        params,
        |p| eval_tape_builder(&builder, p),
        |p| grad_tape_builder(&builder, p),
        step,
        atol,
    )
}
