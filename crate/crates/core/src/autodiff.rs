//! Reverse-mode automatic differentiation over dense `f64` vectors.
//!
//! A [`Tape`] records every operation in topological order. Primal values live
//! in one contiguous arena; each node stores an offset into it. Calling
//! [`Tape::backward`] on a scalar node walks the tape once in reverse and
//! returns the adjoint of every node.
//!
//! The tape is define-by-run: build a fresh one for every evaluation. Only
//! vectors (`n x 1`), scalars (`1 x 1`) and matrices used as the left operand
//! of [`Op::MatVec`] are supported. Elementwise binary ops accept a scalar on
//! either side.
//!
//! ```
//! use hiwae::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.scalar_leaf(3.0);
//! let y = tape.scalar_leaf(4.0);
//! let z = tape.mul(x, y).unwrap();
//! let grads = tape.backward(z).unwrap();
//! assert_eq!(grads.wrt(x), &[4.0]);
//! assert_eq!(grads.wrt(y), &[3.0]);
//! ```

use std::fmt;

use thiserror::Error;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Row/column dimensions of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn vector(n: usize) -> Self {
        Shape { rows: n, cols: 1 }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn is_vector(&self) -> bool {
        self.cols == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {}", fmt_shapes(.shapes))]
    Shape { op: &'static str, shapes: Vec<Shape> },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward root must be scalar, got shape {0}")]
    NonScalarRoot(Shape),
}

fn fmt_shapes(shapes: &[Shape]) -> String {
    shapes
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Differentiable operations that can be recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    /// Matrix (`r x c`) times vector (`c`).
    MatVec,
    Sum,
    Exp,
    Log,
    Neg,
    /// ELU with alpha = 1.
    Elu,
    Softplus,
    Square,
    LogSumExp,
    Softmax,
    /// Concatenates any number of vectors.
    Concat,
    Slice { start: usize, len: usize },
    /// Multiplication by a constant.
    Scale(f64),
    /// Addition of a constant.
    Shift(f64),
    /// `max(x, floor)` elementwise; the gradient is zero where clamped.
    ClampMin(f64),
    /// Diagonal normal log-density. Inputs: point, mean, scale.
    NormalLogPdf,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatVec => "matvec",
            Op::Sum => "sum",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Neg => "neg",
            Op::Elu => "elu",
            Op::Softplus => "softplus",
            Op::Square => "square",
            Op::LogSumExp => "logsumexp",
            Op::Softmax => "softmax",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::ClampMin(_) => "clamp_min",
            Op::NormalLogPdf => "normal_logpdf",
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Leaf,
    Const,
    Op(Op),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    kind: Kind,
    shape: Shape,
    off: usize,
    /// Up to three direct inputs. `Concat` stores its inputs in `extra`.
    inputs: [usize; 3],
    extra: (usize, usize),
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    data: Vec<f64>,
    extra: Vec<usize>,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Stable log-sum-exp of a slice; `-inf` for an empty or all `-inf` slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Scalar log-density of a diagonal normal.
pub fn normal_logpdf(z: &[f64], mean: &[f64], scale: &[f64]) -> f64 {
    z.iter()
        .zip(mean)
        .zip(scale)
        .map(|((z, m), s)| {
            let u = (z - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * u * u
        })
        .sum()
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.data.clear();
        self.extra.clear();
    }

    fn push(&mut self, kind: Kind, shape: Shape, inputs: [usize; 3], values: &[f64]) -> Var {
        debug_assert_eq!(values.len(), shape.len());
        let off = self.data.len();
        self.data.extend_from_slice(values);
        self.nodes.push(Node {
            kind,
            shape,
            off,
            inputs,
            extra: (0, 0),
        });
        Var(self.nodes.len() - 1)
    }

    /// Pushes a node whose values are produced by `fill` writing into the arena.
    fn push_with(
        &mut self,
        kind: Kind,
        shape: Shape,
        inputs: [usize; 3],
        fill: impl FnOnce(&[f64], &mut [f64]),
    ) -> Var {
        let off = self.data.len();
        self.data.resize(off + shape.len(), 0.0);
        let (before, out) = self.data.split_at_mut(off);
        fill(before, out);
        self.nodes.push(Node {
            kind,
            shape,
            off,
            inputs,
            extra: (0, 0),
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, values: &[f64], shape: Shape) -> Var {
        assert_eq!(values.len(), shape.len(), "leaf values do not match shape");
        self.push(Kind::Leaf, shape, [0; 3], values)
    }

    pub fn vector_leaf(&mut self, values: &[f64]) -> Var {
        self.leaf(values, Shape::vector(values.len()))
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(&[value], Shape::SCALAR)
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, values: &[f64], shape: Shape) -> Var {
        assert_eq!(values.len(), shape.len(), "constant values do not match shape");
        self.push(Kind::Const, shape, [0; 3], values)
    }

    pub fn vector_const(&mut self, values: &[f64]) -> Var {
        self.constant(values, Shape::vector(values.len()))
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(&[value], Shape::SCALAR)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.nodes[v.0];
        let off = self.data.len();
        self.data.extend_from_within(n.off..n.off + n.shape.len());
        self.nodes.push(Node {
            kind: Kind::Const,
            shape: n.shape,
            off,
            inputs: [0; 3],
            extra: (0, 0),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.data[n.off..n.off + n.shape.len()]
    }

    /// Value of a scalar node (first element otherwise).
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].kind, Kind::Leaf)
    }

    fn range(&self, id: usize) -> std::ops::Range<usize> {
        let n = &self.nodes[id];
        n.off..n.off + n.shape.len()
    }

    /// Records `op` applied to `inputs`, checking shapes and domains.
    pub fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var, AdError> {
        let name = op.name();
        let arity = |expected: usize| -> Result<(), AdError> {
            if inputs.len() != expected {
                Err(AdError::Arity {
                    op: name,
                    expected,
                    got: inputs.len(),
                })
            } else {
                Ok(())
            }
        };
        let shape_err = |tape: &Tape| AdError::Shape {
            op: name,
            shapes: inputs.iter().map(|v| tape.shape(*v)).collect(),
        };
        let kind = Kind::Op(op);
        match op {
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let out = if sa == sb || sb.is_scalar() {
                    sa
                } else if sa.is_scalar() {
                    sb
                } else {
                    return Err(shape_err(self));
                };
                if op == Op::Div && self.value(b).contains(&0.0) {
                    return Err(AdError::Domain {
                        op: name,
                        detail: "zero denominator".into(),
                    });
                }
                let (ra, rb) = (self.range(a.0), self.range(b.0));
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    Op::Mul => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                Ok(self.push_with(kind, out, [a.0, b.0, 0], |d, o| {
                    let (xa, xb) = (&d[ra], &d[rb]);
                    for (i, slot) in o.iter_mut().enumerate() {
                        let x = if xa.len() == 1 { xa[0] } else { xa[i] };
                        let y = if xb.len() == 1 { xb[0] } else { xb[i] };
                        *slot = f(x, y);
                    }
                }))
            }
            Op::MatVec => {
                arity(2)?;
                let (m, v) = (inputs[0], inputs[1]);
                let (sm, sv) = (self.shape(m), self.shape(v));
                if !sv.is_vector() || sm.cols != sv.rows {
                    return Err(shape_err(self));
                }
                let (rm, rv) = (self.range(m.0), self.range(v.0));
                let cols = sm.cols;
                Ok(
                    self.push_with(kind, Shape::vector(sm.rows), [m.0, v.0, 0], |d, o| {
                        let (mat, vec) = (&d[rm], &d[rv]);
                        for (r, slot) in o.iter_mut().enumerate() {
                            let row = &mat[r * cols..(r + 1) * cols];
                            *slot = row.iter().zip(vec).map(|(a, b)| a * b).sum();
                        }
                    }),
                )
            }
            Op::Sum | Op::LogSumExp => {
                arity(1)?;
                let a = inputs[0];
                let ra = self.range(a.0);
                if ra.is_empty() {
                    return Err(shape_err(self));
                }
                Ok(self.push_with(kind, Shape::SCALAR, [a.0, 0, 0], |d, o| {
                    o[0] = if op == Op::Sum {
                        d[ra].iter().sum()
                    } else {
                        logsumexp(&d[ra])
                    };
                }))
            }
            Op::Softmax => {
                arity(1)?;
                let a = inputs[0];
                let sa = self.shape(a);
                if !sa.is_vector() || sa.is_empty() {
                    return Err(shape_err(self));
                }
                let ra = self.range(a.0);
                Ok(self.push_with(kind, sa, [a.0, 0, 0], |d, o| {
                    let lse = logsumexp(&d[ra.clone()]);
                    for (slot, x) in o.iter_mut().zip(&d[ra]) {
                        *slot = (x - lse).exp();
                    }
                }))
            }
            Op::Exp
            | Op::Log
            | Op::Neg
            | Op::Elu
            | Op::Softplus
            | Op::Square
            | Op::Scale(_)
            | Op::Shift(_)
            | Op::ClampMin(_) => {
                arity(1)?;
                let a = inputs[0];
                if op == Op::Log {
                    if let Some(x) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                        return Err(AdError::Domain {
                            op: name,
                            detail: format!("non-positive input {x}"),
                        });
                    }
                }
                let ra = self.range(a.0);
                let sa = self.shape(a);
                Ok(self.push_with(kind, sa, [a.0, 0, 0], |d, o| {
                    for (slot, &x) in o.iter_mut().zip(&d[ra]) {
                        *slot = match op {
                            Op::Exp => x.exp(),
                            Op::Log => x.ln(),
                            Op::Neg => -x,
                            Op::Elu => elu(x),
                            Op::Softplus => softplus(x),
                            Op::Square => x * x,
                            Op::Scale(c) => c * x,
                            Op::Shift(c) => x + c,
                            Op::ClampMin(c) => x.max(c),
                            _ => unreachable!(),
                        };
                    }
                }))
            }
            Op::Concat => {
                if inputs.is_empty() {
                    return Err(AdError::Arity {
                        op: name,
                        expected: 1,
                        got: 0,
                    });
                }
                if inputs.iter().any(|v| !self.shape(*v).is_vector()) {
                    return Err(shape_err(self));
                }
                let total: usize = inputs.iter().map(|v| self.shape(*v).len()).sum();
                let off = self.data.len();
                for v in inputs {
                    let r = self.range(v.0);
                    self.data.extend_from_within(r);
                }
                let start = self.extra.len();
                self.extra.extend(inputs.iter().map(|v| v.0));
                self.nodes.push(Node {
                    kind,
                    shape: Shape::vector(total),
                    off,
                    inputs: [0; 3],
                    extra: (start, inputs.len()),
                });
                Ok(Var(self.nodes.len() - 1))
            }
            Op::Slice { start, len } => {
                arity(1)?;
                let a = inputs[0];
                let sa = self.shape(a);
                if !sa.is_vector() || start + len > sa.rows || len == 0 {
                    return Err(shape_err(self));
                }
                let base = self.nodes[a.0].off;
                Ok(
                    self.push_with(kind, Shape::vector(len), [a.0, 0, 0], |d, o| {
                        o.copy_from_slice(&d[base + start..base + start + len]);
                    }),
                )
            }
            Op::NormalLogPdf => {
                arity(3)?;
                let (z, m, s) = (inputs[0], inputs[1], inputs[2]);
                let sz = self.shape(z);
                if !sz.is_vector() || self.shape(m) != sz || self.shape(s) != sz {
                    return Err(shape_err(self));
                }
                if let Some(x) = self.value(s).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(AdError::Domain {
                        op: name,
                        detail: format!("non-positive scale {x}"),
                    });
                }
                let (rz, rm, rs) = (self.range(z.0), self.range(m.0), self.range(s.0));
                Ok(
                    self.push_with(kind, Shape::SCALAR, [z.0, m.0, s.0], |d, o| {
                        o[0] = normal_logpdf(&d[rz], &d[rm], &d[rs]);
                    }),
                )
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.record(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.record(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.record(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.record(Op::Div, &[a, b])
    }
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, AdError> {
        self.record(Op::MatVec, &[m, v])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        self.record(Op::Sum, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, AdError> {
        self.record(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var, AdError> {
        self.record(Op::Log, &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var, AdError> {
        self.record(Op::Neg, &[a])
    }
    pub fn elu(&mut self, a: Var) -> Result<Var, AdError> {
        self.record(Op::Elu, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var, AdError> {
        self.record(Op::Softplus, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var, AdError> {
        self.record(Op::Square, &[a])
    }
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, AdError> {
        self.record(Op::LogSumExp, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var, AdError> {
        self.record(Op::Softmax, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        self.record(Op::Concat, parts)
    }
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AdError> {
        self.record(Op::Slice { start, len }, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        self.record(Op::Scale(c), &[a])
    }
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        self.record(Op::Shift(c), &[a])
    }
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var, AdError> {
        self.record(Op::ClampMin(floor), &[a])
    }
    pub fn normal_logpdf(&mut self, z: Var, mean: Var, scale: Var) -> Result<Var, AdError> {
        self.record(Op::NormalLogPdf, &[z, mean, scale])
    }

    /// `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, AdError> {
        let lse = self.logsumexp(a)?;
        self.sub(a, lse)
    }

    /// Element `i` of a vector as a scalar node.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var, AdError> {
        self.slice(a, i, 1)
    }

    /// Propagates adjoints from the scalar `root` back to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<'_>, AdError> {
        let shape = self.shape(root);
        if !shape.is_scalar() {
            return Err(AdError::NonScalarRoot(shape));
        }
        let mut adj = vec![0.0; self.data.len()];
        let mut touched = vec![false; root.0 + 1];
        adj[self.nodes[root.0].off] = 1.0;
        touched[root.0] = true;
        let d = &self.data;

        for id in (0..=root.0).rev() {
            if !touched[id] {
                continue;
            }
            let node = self.nodes[id];
            let Kind::Op(op) = node.kind else { continue };
            let out = node.off..node.off + node.shape.len();
            let [i0, i1, i2] = node.inputs;
            match op {
                Op::Add | Op::Sub | Op::Mul | Op::Div => {
                    let (ra, rb) = (self.range(i0), self.range(i1));
                    let (la, lb) = (ra.len(), rb.len());
                    for k in 0..out.len() {
                        let g = adj[out.start + k];
                        if g == 0.0 {
                            continue;
                        }
                        let ia = ra.start + if la == 1 { 0 } else { k };
                        let ib = rb.start + if lb == 1 { 0 } else { k };
                        let (x, y) = (d[ia], d[ib]);
                        let (ga, gb) = match op {
                            Op::Add => (g, g),
                            Op::Sub => (g, -g),
                            Op::Mul => (g * y, g * x),
                            _ => (g / y, -g * x / (y * y)),
                        };
                        adj[ia] += ga;
                        adj[ib] += gb;
                    }
                    touched[i0] = true;
                    touched[i1] = true;
                }
                Op::MatVec => {
                    let (rm, rv) = (self.range(i0), self.range(i1));
                    let cols = rv.len();
                    for r in 0..out.len() {
                        let g = adj[out.start + r];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            adj[rm.start + r * cols + c] += g * d[rv.start + c];
                            adj[rv.start + c] += g * d[rm.start + r * cols + c];
                        }
                    }
                    touched[i0] = true;
                    touched[i1] = true;
                }
                Op::Sum => {
                    let g = adj[out.start];
                    for k in self.range(i0) {
                        adj[k] += g;
                    }
                    touched[i0] = true;
                }
                Op::LogSumExp => {
                    let g = adj[out.start];
                    let y = d[out.start];
                    if y.is_finite() {
                        for k in self.range(i0) {
                            adj[k] += g * (d[k] - y).exp();
                        }
                    }
                    touched[i0] = true;
                }
                Op::Softmax => {
                    let dot: f64 = out.clone().map(|k| adj[k] * d[k]).sum();
                    let ra = self.range(i0);
                    for (k, o) in ra.zip(out.clone()) {
                        adj[k] += d[o] * (adj[o] - dot);
                    }
                    touched[i0] = true;
                }
                Op::Exp
                | Op::Log
                | Op::Neg
                | Op::Elu
                | Op::Softplus
                | Op::Square
                | Op::Scale(_)
                | Op::Shift(_)
                | Op::ClampMin(_) => {
                    let ra = self.range(i0);
                    for (k, o) in ra.zip(out.clone()) {
                        let g = adj[o];
                        let x = d[k];
                        adj[k] += match op {
                            Op::Exp => g * d[o],
                            Op::Log => g / x,
                            Op::Neg => -g,
                            Op::Elu => {
                                if x > 0.0 {
                                    g
                                } else {
                                    g * x.exp()
                                }
                            }
                            Op::Softplus => g * sigmoid(x),
                            Op::Square => 2.0 * g * x,
                            Op::Scale(c) => c * g,
                            Op::Shift(_) => g,
                            Op::ClampMin(c) => {
                                if x >= c {
                                    g
                                } else {
                                    0.0
                                }
                            }
                            _ => unreachable!(),
                        };
                    }
                    touched[i0] = true;
                }
                Op::Concat => {
                    let (start, count) = node.extra;
                    let mut pos = out.start;
                    for &src in &self.extra[start..start + count] {
                        for k in self.range(src) {
                            adj[k] += adj[pos];
                            pos += 1;
                        }
                        touched[src] = true;
                    }
                }
                Op::Slice { start, .. } => {
                    let base = self.nodes[i0].off + start;
                    for (k, o) in out.clone().enumerate() {
                        adj[base + k] += adj[o];
                    }
                    touched[i0] = true;
                }
                Op::NormalLogPdf => {
                    let g = adj[out.start];
                    let (rz, rm, rs) = (self.range(i0), self.range(i1), self.range(i2));
                    for k in 0..rz.len() {
                        let (z, m, s) = (d[rz.start + k], d[rm.start + k], d[rs.start + k]);
                        let u = (z - m) / s;
                        let dz = -u / s;
                        adj[rz.start + k] += g * dz;
                        adj[rm.start + k] -= g * dz;
                        adj[rs.start + k] += g * (u * u - 1.0) / s;
                    }
                    touched[i0] = true;
                    touched[i1] = true;
                    touched[i2] = true;
                }
            }
        }
        Ok(Gradients { tape: self, adj })
    }
}

/// Adjoints of every node after a backward pass.
pub struct Gradients<'t> {
    tape: &'t Tape,
    adj: Vec<f64>,
}

impl Gradients<'_> {
    /// Adjoint of `v`, i.e. the derivative of the root with respect to `v`.
    pub fn wrt(&self, v: Var) -> &[f64] {
        &self.adj[self.tape.range(v.0)]
    }
}

/// `-0.5 * ln(2 pi)`, the log-density of a standard normal at its mode.
pub const HALF_LN_2PI: f64 = 0.5 * LN_2PI;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn ln_2pi_constant() {
        assert!((LN_2PI - (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn primal_examples() {
        let mut t = Tape::new();
        let zero = t.scalar_leaf(0.0);
        let sp = t.softplus(zero).unwrap();
        assert!((t.scalar(sp) - std::f64::consts::LN_2).abs() < 1e-12);
        let pair = t.vector_leaf(&[0.0, 0.0]);
        let lse = t.logsumexp(pair).unwrap();
        assert!((t.scalar(lse) - 2f64.ln()).abs() < 1e-15);
        let m1 = t.scalar_leaf(-1.0);
        let e = t.elu(m1).unwrap();
        assert!((t.scalar(e) - (-0.632121)).abs() < 1e-6);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.scalar_leaf(3.0);
        let y = t.scalar_leaf(4.0);
        let p = t.mul(x, y).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.wrt(x), &[4.0]);
        assert_eq!(g.wrt(y), &[3.0]);

        let mut t = Tape::new();
        let x = t.scalar_leaf(0.0);
        let s = t.softplus(x).unwrap();
        let g = t.backward(s).unwrap();
        assert!((g.wrt(x)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.vector_leaf(&[1.0, 2.0]);
        let b = t.vector_leaf(&[1.0, 2.0, 3.0]);
        let err = t.add(a, b).unwrap_err();
        assert_eq!(
            err,
            AdError::Shape {
                op: "add",
                shapes: vec![Shape::vector(2), Shape::vector(3)]
            }
        );
        assert!(err.to_string().contains("add"));
        assert!(err.to_string().contains("2x1, 3x1"));

        let m = t.leaf(&[1.0; 6], Shape::matrix(2, 3));
        assert!(matches!(t.matvec(m, a), Err(AdError::Shape { op: "matvec", .. })));
        assert!(matches!(t.slice(a, 1, 2), Err(AdError::Shape { .. })));
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let a = t.vector_leaf(&[1.0, 0.0]);
        assert!(matches!(t.log(a), Err(AdError::Domain { op: "log", .. })));
        let one = t.scalar_leaf(1.0);
        assert!(matches!(t.div(one, a), Err(AdError::Domain { op: "div", .. })));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let a = t.vector_leaf(&[1.0, 2.0]);
        let b = t.exp(a).unwrap();
        assert!(matches!(t.backward(b), Err(AdError::NonScalarRoot(_))));
    }

    #[test]
    fn unreachable_leaves_have_zero_adjoint() {
        let mut t = Tape::new();
        let x = t.scalar_leaf(2.0);
        let unused = t.vector_leaf(&[1.0, 2.0]);
        let y = t.square(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(unused), &[0.0, 0.0]);
        assert_eq!(g.wrt(x), &[4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.scalar_leaf(2.0);
        let xd = t.detach(x);
        let y = t.mul(x, xd).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x), &[2.0]);
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-6, 0.01, 0.5, 1.0, 3.0, 40.0] {
            assert!(close(softplus(softplus_inv(y)), y, 1e-12));
        }
    }

    proptest! {
        #[test]
        fn logsumexp_translation_stable(xs in prop::collection::vec(-50.0f64..50.0, 1..8), c in -700.0f64..700.0) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let lhs = logsumexp(&shifted);
            let rhs = logsumexp(&xs) + c;
            prop_assert!((lhs - rhs).abs() <= 1e-12, "{} vs {}", lhs, rhs);
        }
    }
}
