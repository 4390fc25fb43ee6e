//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records a DAG of matrix operations. Leaves are bound to values
//! when created; `forward` populates every interior node and returns the exit
//! scalar, `backward` walks the order in reverse and accumulates adjoints into
//! each node exactly once. Parameter leaves can be rebound, which invalidates
//! the forward state — that is what the finite-difference oracles rely on.
//!
//! All values are `f64`. There is no operator fusion and no graph rewriting.

use crate::error::{Error, Result};
use crate::matrix::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Parameter leaf; participates in `backward` results.
    Param,
    /// Constant leaf; receives an adjoint but is not reported.
    Constant,
    MatMul(NodeId, NodeId),
    /// Elementwise add; rhs may be a column vector broadcast across columns.
    Add(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// |x| with sign(0) := 0 in the backward pass.
    Abs(NodeId),
    /// Elementwise multiply; rhs may be a column vector broadcast across columns.
    Mul(NodeId, NodeId),
    /// Elementwise divide; rhs may be a 1x1 scalar divisor. With `zero_safe`,
    /// a zero divisor yields 0 with zero gradient instead of NaN (the
    /// zero-mass normalization convention).
    Div {
        lhs: NodeId,
        rhs: NodeId,
        zero_safe: bool,
    },
    /// Sum of all entries, producing a 1x1 scalar.
    Sum(NodeId),
    /// ln(max(x, floor)) elementwise; gradient is 1/x where x > floor, else 0.
    /// floor = 0 is the unguarded logarithm.
    Log {
        arg: NodeId,
        floor: f64,
    },
    /// Multiplication by a compile-time scalar factor.
    Scale {
        arg: NodeId,
        factor: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Mat>,
    grad: Option<Mat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Fresh,
    Forwarded,
}

/// Recorded computation graph with parameter entry points and a scalar exit.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    exit: Option<NodeId>,
    state: State,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            exit: None,
            state: State::Fresh,
        }
    }

    fn push(&mut self, op: Op, value: Option<Mat>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        id
    }

    /// Parameter leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Mat) -> NodeId {
        let id = self.push(Op::Param, Some(value));
        self.params.push(id);
        id
    }

    /// Constant leaf; differentiated through but not reported.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Constant, Some(value))
    }

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        self.push(Op::MatMul(lhs, rhs), None)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        self.push(Op::Add(lhs, rhs), None)
    }

    pub fn relu(&mut self, arg: NodeId) -> NodeId {
        self.push(Op::Relu(arg), None)
    }

    pub fn sigmoid(&mut self, arg: NodeId) -> NodeId {
        self.push(Op::Sigmoid(arg), None)
    }

    pub fn abs(&mut self, arg: NodeId) -> NodeId {
        self.push(Op::Abs(arg), None)
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        self.push(Op::Mul(lhs, rhs), None)
    }

    pub fn div(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        self.push(
            Op::Div {
                lhs,
                rhs,
                zero_safe: false,
            },
            None,
        )
    }

    /// Division that maps a zero divisor to 0 (value and gradient) instead of
    /// NaN. Used for layer normalization, where zero mass means "no edges".
    pub fn div_or_zero(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        self.push(
            Op::Div {
                lhs,
                rhs,
                zero_safe: true,
            },
            None,
        )
    }

    pub fn sum(&mut self, arg: NodeId) -> NodeId {
        self.push(Op::Sum(arg), None)
    }

    pub fn log(&mut self, arg: NodeId) -> NodeId {
        self.push(Op::Log { arg, floor: 0.0 }, None)
    }

    /// ln(max(x, floor)); keeps the value finite when x collapses to 0.
    pub fn log_floored(&mut self, arg: NodeId, floor: f64) -> NodeId {
        self.push(Op::Log { arg, floor }, None)
    }

    pub fn scale(&mut self, arg: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { arg, factor }, None)
    }

    pub fn set_exit(&mut self, exit: NodeId) {
        self.exit = Some(exit);
    }

    pub fn exit(&self) -> Option<NodeId> {
        self.exit
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    /// Rebind a leaf to a new value of the same shape; invalidates forward state.
    pub fn rebind(&mut self, leaf: NodeId, value: Mat) -> Result<()> {
        let node = &mut self.nodes[leaf.0];
        match node.op {
            Op::Param | Op::Constant => {}
            _ => return Err(Error::TapeState("rebind target is not a leaf")),
        }
        let old = node.value.as_ref().expect("leaf always bound");
        if !old.same_shape(&value) {
            return Err(Error::TapeState("rebind changes leaf shape"));
        }
        node.value = Some(value);
        self.state = State::Fresh;
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> Option<&Mat> {
        self.nodes[id.0].value.as_ref()
    }

    /// Gradient accumulated by the latest `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Mat> {
        self.nodes[id.0].grad.as_ref()
    }

    fn shape_of(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0]
            .value
            .as_ref()
            .map(|m| m.shape())
            .expect("value populated before use")
    }

    fn dim_error(&self, op: &'static str, lhs: NodeId, rhs: NodeId) -> Error {
        let (lr, lc) = self.shape_of(lhs);
        let (rr, rc) = self.shape_of(rhs);
        Error::Dimension {
            op,
            lhs_node: lhs.0,
            lhs_rows: lr,
            lhs_cols: lc,
            rhs_node: rhs.0,
            rhs_rows: rr,
            rhs_cols: rc,
        }
    }

    /// Evaluate every node in tape order and return the exit scalar.
    pub fn forward(&mut self) -> Result<f64> {
        let exit = self
            .exit
            .ok_or(Error::TapeState("forward without an exit point"))?;
        for i in 0..self.nodes.len() {
            let value = match self.nodes[i].op {
                Op::Param | Op::Constant => continue,
                Op::MatMul(a, b) => {
                    let (ar, ac) = self.shape_of(a);
                    let (br, _bc) = self.shape_of(b);
                    if ac != br {
                        return Err(self.dim_error("matmul", a, b));
                    }
                    let _ = ar;
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let vb = self.nodes[b.0].value.as_ref().unwrap();
                    va.matmul(vb)
                }
                Op::Add(a, b) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let vb = self.nodes[b.0].value.as_ref().unwrap();
                    if va.same_shape(vb) {
                        va.zip_map(vb, |x, y| x + y)
                    } else if vb.cols() == 1 && vb.rows() == va.rows() {
                        let mut out = va.clone();
                        for r in 0..out.rows() {
                            let add = vb.get(r, 0);
                            for c in 0..out.cols() {
                                out.set(r, c, out.get(r, c) + add);
                            }
                        }
                        out
                    } else {
                        return Err(self.dim_error("add", a, b));
                    }
                }
                Op::Relu(a) => self.nodes[a.0].value.as_ref().unwrap().map(relu),
                Op::Sigmoid(a) => self.nodes[a.0].value.as_ref().unwrap().map(sigmoid),
                Op::Abs(a) => self.nodes[a.0].value.as_ref().unwrap().map(f64::abs),
                Op::Mul(a, b) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let vb = self.nodes[b.0].value.as_ref().unwrap();
                    if va.same_shape(vb) {
                        va.zip_map(vb, |x, y| x * y)
                    } else if vb.cols() == 1 && vb.rows() == va.rows() {
                        let mut out = va.clone();
                        for r in 0..out.rows() {
                            let f = vb.get(r, 0);
                            for c in 0..out.cols() {
                                out.set(r, c, out.get(r, c) * f);
                            }
                        }
                        out
                    } else {
                        return Err(self.dim_error("mul", a, b));
                    }
                }
                Op::Div {
                    lhs,
                    rhs,
                    zero_safe,
                } => {
                    let va = self.nodes[lhs.0].value.as_ref().unwrap();
                    let vb = self.nodes[rhs.0].value.as_ref().unwrap();
                    let safe = |x: f64, y: f64| {
                        if zero_safe && y == 0.0 {
                            0.0
                        } else {
                            x / y
                        }
                    };
                    if va.same_shape(vb) {
                        va.zip_map(vb, safe)
                    } else if vb.is_scalar() {
                        let s = vb.scalar_value();
                        va.map(|x| safe(x, s))
                    } else {
                        return Err(self.dim_error("div", lhs, rhs));
                    }
                }
                Op::Sum(a) => Mat::scalar(self.nodes[a.0].value.as_ref().unwrap().sum()),
                // the floor clamps from below without masking NaN, which
                // f64::max would silently replace
                Op::Log { arg, floor } => self.nodes[arg.0]
                    .value
                    .as_ref()
                    .unwrap()
                    .map(|x| if x < floor { floor } else { x }.ln()),
                Op::Scale { arg, factor } => self.nodes[arg.0]
                    .value
                    .as_ref()
                    .unwrap()
                    .map(|x| factor * x),
            };
            self.nodes[i].value = Some(value);
        }
        let out = self.nodes[exit.0].value.as_ref().unwrap();
        if !out.is_scalar() {
            return Err(Error::TapeState("exit point is not 1x1"));
        }
        self.state = State::Forwarded;
        Ok(out.scalar_value())
    }

    /// Reverse sweep; seeds the exit with 1 and visits each node once.
    /// Requires a completed `forward` on the current bindings.
    pub fn backward(&mut self) -> Result<()> {
        if self.state != State::Forwarded {
            return Err(Error::TapeState("backward before forward"));
        }
        let exit = self.exit.expect("forward checked exit");
        for node in &mut self.nodes {
            let (r, c) = node.value.as_ref().expect("forwarded").shape();
            node.grad = Some(Mat::zeros(r, c));
        }
        self.nodes[exit.0].grad = Some(Mat::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = self.nodes[i].grad.clone().expect("allocated above");
            match self.nodes[i].op {
                Op::Param | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let va = self.nodes[a.0].value.clone().unwrap();
                    let vb = self.nodes[b.0].value.clone().unwrap();
                    let ga = g.matmul_nt(&vb);
                    let gb = va.matmul_tn(&g);
                    self.nodes[a.0].grad.as_mut().unwrap().add_assign(&ga);
                    self.nodes[b.0].grad.as_mut().unwrap().add_assign(&gb);
                }
                Op::Add(a, b) => {
                    self.nodes[a.0].grad.as_mut().unwrap().add_assign(&g);
                    let vb_shape = self.nodes[b.0].value.as_ref().unwrap().shape();
                    if vb_shape == g.shape() {
                        self.nodes[b.0].grad.as_mut().unwrap().add_assign(&g);
                    } else {
                        // broadcast column: fold the columns back together
                        let gb = g.row_sums();
                        self.nodes[b.0].grad.as_mut().unwrap().add_assign(&gb);
                    }
                }
                Op::Relu(a) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let ga = g.zip_map(va, |gv, x| if x > 0.0 { gv } else { 0.0 });
                    self.nodes[a.0].grad.as_mut().unwrap().add_assign(&ga);
                }
                Op::Sigmoid(a) => {
                    let out = self.nodes[i].value.as_ref().unwrap();
                    let ga = g.zip_map(out, |gv, s| gv * s * (1.0 - s));
                    self.nodes[a.0].grad.as_mut().unwrap().add_assign(&ga);
                }
                Op::Abs(a) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    // sign(0) = 0: a zero entry receives no push from |.|
                    let ga = g.zip_map(va, |gv, x| gv * sign_zero(x));
                    self.nodes[a.0].grad.as_mut().unwrap().add_assign(&ga);
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[a.0].value.clone().unwrap();
                    let vb = self.nodes[b.0].value.clone().unwrap();
                    if va.same_shape(&vb) {
                        let ga = g.zip_map(&vb, |gv, y| gv * y);
                        let gb = g.zip_map(&va, |gv, x| gv * x);
                        self.nodes[a.0].grad.as_mut().unwrap().add_assign(&ga);
                        self.nodes[b.0].grad.as_mut().unwrap().add_assign(&gb);
                    } else {
                        let mut ga = g.clone();
                        for r in 0..ga.rows() {
                            let f = vb.get(r, 0);
                            for c in 0..ga.cols() {
                                ga.set(r, c, ga.get(r, c) * f);
                            }
                        }
                        let gb = g.zip_map(&va, |gv, x| gv * x).row_sums();
                        self.nodes[a.0].grad.as_mut().unwrap().add_assign(&ga);
                        self.nodes[b.0].grad.as_mut().unwrap().add_assign(&gb);
                    }
                }
                Op::Div {
                    lhs,
                    rhs,
                    zero_safe,
                } => {
                    let va = self.nodes[lhs.0].value.clone().unwrap();
                    let vb = self.nodes[rhs.0].value.clone().unwrap();
                    if va.same_shape(&vb) {
                        let ga = g.zip_map(
                            &vb,
                            |gv, y| {
                                if zero_safe && y == 0.0 {
                                    0.0
                                } else {
                                    gv / y
                                }
                            },
                        );
                        let mut gb = Mat::zeros(vb.rows(), vb.cols());
                        for r in 0..vb.rows() {
                            for c in 0..vb.cols() {
                                let y = vb.get(r, c);
                                if zero_safe && y == 0.0 {
                                    continue;
                                }
                                gb.set(r, c, -g.get(r, c) * va.get(r, c) / (y * y));
                            }
                        }
                        self.nodes[lhs.0].grad.as_mut().unwrap().add_assign(&ga);
                        self.nodes[rhs.0].grad.as_mut().unwrap().add_assign(&gb);
                    } else {
                        let s = vb.scalar_value();
                        if zero_safe && s == 0.0 {
                            continue;
                        }
                        let ga = g.map(|gv| gv / s);
                        let mut acc = 0.0;
                        for r in 0..va.rows() {
                            for c in 0..va.cols() {
                                acc += g.get(r, c) * va.get(r, c);
                            }
                        }
                        let gb = Mat::scalar(-acc / (s * s));
                        self.nodes[lhs.0].grad.as_mut().unwrap().add_assign(&ga);
                        self.nodes[rhs.0].grad.as_mut().unwrap().add_assign(&gb);
                    }
                }
                Op::Sum(a) => {
                    let gs = g.scalar_value();
                    let (r, c) = self.nodes[a.0].value.as_ref().unwrap().shape();
                    let ga = Mat::filled(r, c, gs);
                    self.nodes[a.0].grad.as_mut().unwrap().add_assign(&ga);
                }
                Op::Log { arg, floor } => {
                    let va = self.nodes[arg.0].value.as_ref().unwrap();
                    let ga = g.zip_map(va, |gv, x| if x > floor { gv / x } else { 0.0 });
                    self.nodes[arg.0].grad.as_mut().unwrap().add_assign(&ga);
                }
                Op::Scale { arg, factor } => {
                    let ga = g.map(|gv| factor * gv);
                    self.nodes[arg.0].grad.as_mut().unwrap().add_assign(&ga);
                }
            }
        }
        Ok(())
    }

    /// Gradients for every parameter leaf, in registration order.
    pub fn param_grads(&self) -> Vec<(NodeId, &Mat)> {
        self.params
            .iter()
            .map(|&p| (p, self.nodes[p.0].grad.as_ref().expect("after backward")))
            .collect()
    }
}

fn sign_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// NaN must propagate; a plain `x > 0` test would silently map it to 0.
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 || x.is_nan() {
        x
    } else {
        0.0
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

/// Stable elementwise sigmoid, shared with the plain prediction path.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}
