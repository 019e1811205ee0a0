//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records a computation graph of scalar- or vector-valued nodes.
//! The forward pass evaluates nodes in insertion order into a flat `f64`
//! arena, the backward pass accumulates adjoints over the same layout.
//!
//! Two features go beyond a plain Wengert list:
//!
//! - **Symbolic input derivatives** ([`Tape::input_grad_node`]): the
//!   derivative of a scalar output with respect to an input is appended to
//!   the tape as a new subgraph, so the resulting node can itself be
//!   differentiated with respect to parameters. Piecewise-linear activations
//!   contribute mask nodes frozen at the forward values (exact almost
//!   everywhere); tanh/sin contribute exact derivative nodes.
//! - **Parameter groups**: parameters register under a group id, and both
//!   forward re-evaluation and the backward sweep can be restricted to the
//!   nodes that depend on one group. The min-max trainer alternates between
//!   the two players without recomputing the frozen one.
//!
//! Values are plain `f64`; evaluation order is the node order, so identical
//! inputs and parameters give bitwise-identical outputs.

use thiserror::Error;

/// Index of a node on the tape.
pub type NodeId = usize;

/// Parameter group identifier (bit position in the dependence mask).
pub type Group = u8;

/// Dependence-mask bit reserved for input nodes.
pub const DEP_INPUT: u8 = 0x80;

/// Dependence mask covering inputs and every parameter group.
pub const ALL_GROUPS: u8 = u8::MAX;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("arity mismatch: expected {expected} values for {what}, got {got}")]
    Arity {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite input value at position {0}")]
    NonFiniteInput(usize),
    #[error("node {0} is not scalar-valued")]
    NotScalar(NodeId),
    #[error("node {0} is not a declared input")]
    NotAnInput(NodeId),
    #[error("operation {0} has no symbolic derivative rule")]
    UnsupportedSymbolic(&'static str),
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Input,
    Param(Group),
    /// Elementwise a + b.
    Add(NodeId, NodeId),
    /// Elementwise a - b.
    Sub(NodeId, NodeId),
    /// Elementwise a * b.
    Mul(NodeId, NodeId),
    /// Vector a scaled by scalar node s.
    MulScalar(NodeId, NodeId),
    /// Elementwise a / b.
    Div(NodeId, NodeId),
    /// a * constant.
    Scale(NodeId, f64),
    /// a + constant.
    Shift(NodeId, f64),
    /// Row-major (rows x cols) matrix node times vector node.
    Matvec {
        w: NodeId,
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    /// Transposed product: w^T x where w is (rows x cols) and x has len rows.
    MatvecT {
        w: NodeId,
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    /// Inner product of two equal-length vectors.
    Dot(NodeId, NodeId),
    /// Sum of the elements of a vector.
    Sum(NodeId),
    /// Scalar broadcast to a vector of the given length.
    Broadcast(NodeId, usize),
    /// Single element of a vector.
    Index(NodeId, usize),
    Relu(NodeId),
    /// Positive part; same function as relu, kept as its own tag for losses.
    PosClip(NodeId),
    /// 1 where parent > 0 else 0; carries no gradient (frozen mask).
    StepConst(NodeId),
    Tanh(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Abs(NodeId),
    /// -1/0/+1; carries no gradient (locally constant a.e.).
    Sign(NodeId),
    Square(NodeId),
    /// Elementwise max; subgradient follows the attaining side (ties: first).
    Max(NodeId, NodeId),
    /// Sum over a list of scalar nodes.
    SumList(usize),
    /// Weighted sum over a list of scalar nodes.
    WeightedSumList(usize),
    /// Max over a list of scalar nodes; gradient through the argmax only.
    MaxList(usize),
}

#[derive(Clone, Copy)]
struct NodeMeta {
    off: usize,
    len: usize,
    dep: u8,
}

/// Reverse-mode computation tape.
pub struct Tape {
    ops: Vec<Op>,
    meta: Vec<NodeMeta>,
    vals: Vec<f64>,
    adj: Vec<f64>,
    lists: Vec<Vec<NodeId>>,
    list_weights: Vec<Vec<f64>>,
    /// Argmax index per MaxList node, refreshed on every forward pass.
    argmax: Vec<usize>,
    inputs: Vec<NodeId>,
    params: Vec<NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            meta: Vec::new(),
            vals: Vec::new(),
            adj: Vec::new(),
            lists: Vec::new(),
            list_weights: Vec::new(),
            argmax: Vec::new(),
            inputs: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, len: usize, dep: u8) -> NodeId {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        self.adj.resize(off + len, 0.0);
        self.ops.push(op);
        self.meta.push(NodeMeta { off, len, dep });
        self.ops.len() - 1
    }

    fn dep(&self, id: NodeId) -> u8 {
        self.meta[id].dep
    }

    pub fn node_len(&self, id: NodeId) -> usize {
        self.meta[id].len
    }

    /// Current value of a node (slice view after a forward pass).
    pub fn value(&self, id: NodeId) -> &[f64] {
        let m = self.meta[id];
        &self.vals[m.off..m.off + m.len]
    }

    /// Scalar value of a node; panics if the node is not scalar.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let m = self.meta[id];
        assert_eq!(m.len, 1, "node {id} is not scalar");
        self.vals[m.off]
    }

    /// Adjoint of a node after a backward sweep.
    pub fn adjoint(&self, id: NodeId) -> &[f64] {
        let m = self.meta[id];
        &self.adj[m.off..m.off + m.len]
    }

    // ── graph construction ──────────────────────────────────────────────

    pub fn constant(&mut self, v: f64) -> NodeId {
        let id = self.push(Op::Const, 1, 0);
        self.vals[self.meta[id].off] = v;
        id
    }

    pub fn constant_vec(&mut self, v: &[f64]) -> NodeId {
        let id = self.push(Op::Const, v.len(), 0);
        let off = self.meta[id].off;
        self.vals[off..off + v.len()].copy_from_slice(v);
        id
    }

    pub fn input(&mut self, len: usize) -> NodeId {
        let id = self.push(Op::Input, len, DEP_INPUT);
        self.inputs.push(id);
        id
    }

    pub fn param(&mut self, len: usize, group: Group) -> NodeId {
        assert!(group < 7, "at most 7 parameter groups (bit 7 is for inputs)");
        let id = self.push(Op::Param(group), len, 1 << group);
        self.params.push(id);
        id
    }

    pub fn set_input(&mut self, id: NodeId, v: &[f64]) {
        debug_assert!(matches!(self.ops[id], Op::Input));
        let m = self.meta[id];
        assert_eq!(m.len, v.len(), "input length mismatch");
        self.vals[m.off..m.off + m.len].copy_from_slice(v);
    }

    pub fn set_param(&mut self, id: NodeId, v: &[f64]) {
        debug_assert!(matches!(self.ops[id], Op::Param(_)));
        let m = self.meta[id];
        assert_eq!(m.len, v.len(), "parameter length mismatch");
        self.vals[m.off..m.off + m.len].copy_from_slice(v);
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    fn binary(&mut self, op: fn(NodeId, NodeId) -> Op, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.meta[a].len, self.meta[b].len, "length mismatch");
        let len = self.meta[a].len;
        let dep = self.dep(a) | self.dep(b);
        self.push(op(a, b), len, dep)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Div, a, b)
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Max, a, b)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.meta[s].len, 1, "scale factor must be scalar");
        let len = self.meta[a].len;
        let dep = self.dep(a) | self.dep(s);
        self.push(Op::MulScalar(a, s), len, dep)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let len = self.meta[a].len;
        let dep = self.dep(a);
        self.push(Op::Scale(a, c), len, dep)
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        let len = self.meta[a].len;
        let dep = self.dep(a);
        self.push(Op::Shift(a, c), len, dep)
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.meta[w].len, rows * cols, "weight length mismatch");
        assert_eq!(self.meta[x].len, cols, "vector length mismatch");
        let dep = self.dep(w) | self.dep(x);
        self.push(Op::Matvec { w, x, rows, cols }, rows, dep)
    }

    pub fn matvec_t(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.meta[w].len, rows * cols, "weight length mismatch");
        assert_eq!(self.meta[x].len, rows, "vector length mismatch");
        let dep = self.dep(w) | self.dep(x);
        self.push(Op::MatvecT { w, x, rows, cols }, cols, dep)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.meta[a].len, self.meta[b].len, "length mismatch");
        let dep = self.dep(a) | self.dep(b);
        self.push(Op::Dot(a, b), 1, dep)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let dep = self.dep(a);
        self.push(Op::Sum(a), 1, dep)
    }

    pub fn broadcast(&mut self, s: NodeId, len: usize) -> NodeId {
        assert_eq!(self.meta[s].len, 1, "broadcast source must be scalar");
        let dep = self.dep(s);
        self.push(Op::Broadcast(s, len), len, dep)
    }

    pub fn index(&mut self, a: NodeId, k: usize) -> NodeId {
        assert!(k < self.meta[a].len, "index out of range");
        let dep = self.dep(a);
        self.push(Op::Index(a, k), 1, dep)
    }

    fn unary(&mut self, op: fn(NodeId) -> Op, a: NodeId, grad_free: bool) -> NodeId {
        let len = self.meta[a].len;
        let dep = if grad_free { 0 } else { self.dep(a) };
        // Mask/sign nodes still re-evaluate when their parent changes.
        let dep = dep | self.dep(a);
        self.push(op(a), len, dep)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a, false)
    }

    pub fn posclip(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::PosClip, a, false)
    }

    pub fn step_const(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::StepConst, a, true)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh, a, false)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sin, a, false)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Cos, a, false)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Abs, a, false)
    }

    pub fn sign(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sign, a, true)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square, a, false)
    }

    fn push_list(&mut self, items: Vec<NodeId>, weights: Vec<f64>) -> usize {
        self.lists.push(items);
        self.list_weights.push(weights);
        self.lists.len() - 1
    }

    fn list_dep(&self, items: &[NodeId]) -> u8 {
        items.iter().fold(0, |acc, &id| acc | self.dep(id))
    }

    pub fn sum_list(&mut self, items: Vec<NodeId>) -> NodeId {
        assert!(!items.is_empty(), "empty sum list");
        for &id in &items {
            assert_eq!(self.meta[id].len, 1, "sum list items must be scalar");
        }
        let dep = self.list_dep(&items);
        let k = self.push_list(items, Vec::new());
        self.push(Op::SumList(k), 1, dep)
    }

    pub fn weighted_sum_list(&mut self, items: Vec<NodeId>, weights: Vec<f64>) -> NodeId {
        assert_eq!(items.len(), weights.len(), "weight count mismatch");
        assert!(!items.is_empty(), "empty sum list");
        for &id in &items {
            assert_eq!(self.meta[id].len, 1, "sum list items must be scalar");
        }
        let dep = self.list_dep(&items);
        let k = self.push_list(items, weights);
        self.push(Op::WeightedSumList(k), 1, dep)
    }

    pub fn max_list(&mut self, items: Vec<NodeId>) -> NodeId {
        assert!(!items.is_empty(), "empty max list");
        for &id in &items {
            assert_eq!(self.meta[id].len, 1, "max list items must be scalar");
        }
        let dep = self.list_dep(&items);
        let k = self.push_list(items, Vec::new());
        let id = self.push(Op::MaxList(k), 1, dep);
        self.argmax.resize(self.lists.len(), 0);
        id
    }

    /// Parameter group of a param node, if `id` is one.
    pub fn group_of(&self, id: NodeId) -> Option<Group> {
        match self.ops[id] {
            Op::Param(g) => Some(g),
            _ => None,
        }
    }

    /// Argmax position of a MaxList node at the last forward pass.
    pub fn argmax_of(&self, id: NodeId) -> usize {
        match self.ops[id] {
            Op::MaxList(k) => self.argmax[k],
            _ => panic!("node {id} is not a max-list"),
        }
    }

    // ── forward evaluation ──────────────────────────────────────────────

    /// Evaluate every node in insertion order.
    pub fn forward_full(&mut self) {
        self.forward_from(0, ALL_GROUPS);
    }

    /// Re-evaluate only nodes that depend on the given group mask.
    pub fn forward_group(&mut self, mask: u8) {
        self.forward_from(0, mask);
    }

    fn forward_from(&mut self, start: NodeId, mask: u8) {
        for id in start..self.ops.len() {
            if self.meta[id].dep & mask == 0 && !matches!(self.ops[id], Op::Const | Op::Input) {
                // Value cached from a previous pass; inputs/consts never change here.
                continue;
            }
            self.eval_node(id);
        }
    }

    fn eval_node(&mut self, id: NodeId) {
        let m = self.meta[id];
        let (off, len) = (m.off, m.len);
        match self.ops[id] {
            Op::Const | Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i] + self.vals[bo + i];
                }
            }
            Op::Sub(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i] - self.vals[bo + i];
                }
            }
            Op::Mul(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i] * self.vals[bo + i];
                }
            }
            Op::MulScalar(a, s) => {
                let (ao, so) = (self.meta[a].off, self.meta[s].off);
                let sv = self.vals[so];
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i] * sv;
                }
            }
            Op::Div(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i] / self.vals[bo + i];
                }
            }
            Op::Scale(a, c) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i] * c;
                }
            }
            Op::Shift(a, c) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i] + c;
                }
            }
            Op::Matvec { w, x, rows, cols } => {
                let (wo, xo) = (self.meta[w].off, self.meta[x].off);
                for r in 0..rows {
                    let mut acc = 0.0;
                    let row = wo + r * cols;
                    for c in 0..cols {
                        acc += self.vals[row + c] * self.vals[xo + c];
                    }
                    self.vals[off + r] = acc;
                }
            }
            Op::MatvecT { w, x, rows, cols } => {
                let (wo, xo) = (self.meta[w].off, self.meta[x].off);
                for c in 0..cols {
                    self.vals[off + c] = 0.0;
                }
                for r in 0..rows {
                    let xv = self.vals[xo + r];
                    let row = wo + r * cols;
                    for c in 0..cols {
                        self.vals[off + c] += self.vals[row + c] * xv;
                    }
                }
            }
            Op::Dot(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                let n = self.meta[a].len;
                let mut acc = 0.0;
                for i in 0..n {
                    acc += self.vals[ao + i] * self.vals[bo + i];
                }
                self.vals[off] = acc;
            }
            Op::Sum(a) => {
                let ao = self.meta[a].off;
                let n = self.meta[a].len;
                let mut acc = 0.0;
                for i in 0..n {
                    acc += self.vals[ao + i];
                }
                self.vals[off] = acc;
            }
            Op::Broadcast(s, n) => {
                let sv = self.vals[self.meta[s].off];
                debug_assert_eq!(n, len);
                for i in 0..len {
                    self.vals[off + i] = sv;
                }
            }
            Op::Index(a, k) => {
                self.vals[off] = self.vals[self.meta[a].off + k];
            }
            Op::Relu(a) | Op::PosClip(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i].max(0.0);
                }
            }
            Op::StepConst(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.vals[off + i] = if self.vals[ao + i] > 0.0 { 1.0 } else { 0.0 };
                }
            }
            Op::Tanh(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i].tanh();
                }
            }
            Op::Sin(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i].sin();
                }
            }
            Op::Cos(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i].cos();
                }
            }
            Op::Abs(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i].abs();
                }
            }
            Op::Sign(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    let v = self.vals[ao + i];
                    self.vals[off + i] = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
            Op::Square(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    let v = self.vals[ao + i];
                    self.vals[off + i] = v * v;
                }
            }
            Op::Max(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                for i in 0..len {
                    self.vals[off + i] = self.vals[ao + i].max(self.vals[bo + i]);
                }
            }
            Op::SumList(k) => {
                let mut acc = 0.0;
                for j in 0..self.lists[k].len() {
                    acc += self.vals[self.meta[self.lists[k][j]].off];
                }
                self.vals[off] = acc;
            }
            Op::WeightedSumList(k) => {
                let mut acc = 0.0;
                for j in 0..self.lists[k].len() {
                    acc += self.list_weights[k][j] * self.vals[self.meta[self.lists[k][j]].off];
                }
                self.vals[off] = acc;
            }
            Op::MaxList(k) => {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for j in 0..self.lists[k].len() {
                    let v = self.vals[self.meta[self.lists[k][j]].off];
                    if v > best {
                        best = v;
                        arg = j;
                    }
                }
                self.vals[off] = best;
                self.argmax[k] = arg;
            }
        }
    }

    // ── backward sweep ──────────────────────────────────────────────────

    /// Accumulate adjoints of `output` with respect to every node whose
    /// dependence mask intersects `mask`. `output` must be scalar.
    pub fn backward(&mut self, output: NodeId, mask: u8) -> Result<(), TapeError> {
        if self.meta[output].len != 1 {
            return Err(TapeError::NotScalar(output));
        }
        self.adj.fill(0.0);
        self.adj[self.meta[output].off] = 1.0;
        for id in (0..=output).rev() {
            if self.meta[id].dep & mask == 0 {
                continue;
            }
            self.backprop_node(id);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: NodeId) {
        let m = self.meta[id];
        let (off, len) = (m.off, m.len);
        match self.ops[id] {
            Op::Const | Op::Input | Op::Param(_) | Op::StepConst(_) | Op::Sign(_) => {}
            Op::Add(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                for i in 0..len {
                    let d = self.adj[off + i];
                    self.adj[ao + i] += d;
                    self.adj[bo + i] += d;
                }
            }
            Op::Sub(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                for i in 0..len {
                    let d = self.adj[off + i];
                    self.adj[ao + i] += d;
                    self.adj[bo + i] -= d;
                }
            }
            Op::Mul(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                for i in 0..len {
                    let d = self.adj[off + i];
                    self.adj[ao + i] += d * self.vals[bo + i];
                    self.adj[bo + i] += d * self.vals[ao + i];
                }
            }
            Op::MulScalar(a, s) => {
                let (ao, so) = (self.meta[a].off, self.meta[s].off);
                let sv = self.vals[so];
                let mut acc = 0.0;
                for i in 0..len {
                    let d = self.adj[off + i];
                    self.adj[ao + i] += d * sv;
                    acc += d * self.vals[ao + i];
                }
                self.adj[so] += acc;
            }
            Op::Div(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                for i in 0..len {
                    let d = self.adj[off + i];
                    let bv = self.vals[bo + i];
                    self.adj[ao + i] += d / bv;
                    self.adj[bo + i] -= d * self.vals[off + i] / bv;
                }
            }
            Op::Scale(a, c) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.adj[ao + i] += self.adj[off + i] * c;
                }
            }
            Op::Shift(a, _) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.adj[ao + i] += self.adj[off + i];
                }
            }
            Op::Matvec { w, x, rows, cols } => {
                let (wo, xo) = (self.meta[w].off, self.meta[x].off);
                for r in 0..rows {
                    let d = self.adj[off + r];
                    if d == 0.0 {
                        continue;
                    }
                    let row = wo + r * cols;
                    for c in 0..cols {
                        self.adj[row + c] += d * self.vals[xo + c];
                        self.adj[xo + c] += d * self.vals[row + c];
                    }
                }
            }
            Op::MatvecT { w, x, rows, cols } => {
                // y_c = sum_r w_{rc} x_r
                let (wo, xo) = (self.meta[w].off, self.meta[x].off);
                for r in 0..rows {
                    let row = wo + r * cols;
                    let xv = self.vals[xo + r];
                    let mut acc = 0.0;
                    for c in 0..cols {
                        let d = self.adj[off + c];
                        self.adj[row + c] += d * xv;
                        acc += d * self.vals[row + c];
                    }
                    self.adj[xo + r] += acc;
                }
            }
            Op::Dot(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                let n = self.meta[a].len;
                let d = self.adj[off];
                for i in 0..n {
                    self.adj[ao + i] += d * self.vals[bo + i];
                    self.adj[bo + i] += d * self.vals[ao + i];
                }
            }
            Op::Sum(a) => {
                let ao = self.meta[a].off;
                let n = self.meta[a].len;
                let d = self.adj[off];
                for i in 0..n {
                    self.adj[ao + i] += d;
                }
            }
            Op::Broadcast(s, _) => {
                let so = self.meta[s].off;
                let mut acc = 0.0;
                for i in 0..len {
                    acc += self.adj[off + i];
                }
                self.adj[so] += acc;
            }
            Op::Index(a, k) => {
                self.adj[self.meta[a].off + k] += self.adj[off];
            }
            Op::Relu(a) | Op::PosClip(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    if self.vals[ao + i] > 0.0 {
                        self.adj[ao + i] += self.adj[off + i];
                    }
                }
            }
            Op::Tanh(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    let y = self.vals[off + i];
                    self.adj[ao + i] += self.adj[off + i] * (1.0 - y * y);
                }
            }
            Op::Sin(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.adj[ao + i] += self.adj[off + i] * self.vals[ao + i].cos();
                }
            }
            Op::Cos(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.adj[ao + i] -= self.adj[off + i] * self.vals[ao + i].sin();
                }
            }
            Op::Abs(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    let v = self.vals[ao + i];
                    let s = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    self.adj[ao + i] += self.adj[off + i] * s;
                }
            }
            Op::Square(a) => {
                let ao = self.meta[a].off;
                for i in 0..len {
                    self.adj[ao + i] += self.adj[off + i] * 2.0 * self.vals[ao + i];
                }
            }
            Op::Max(a, b) => {
                let (ao, bo) = (self.meta[a].off, self.meta[b].off);
                for i in 0..len {
                    let d = self.adj[off + i];
                    if self.vals[ao + i] >= self.vals[bo + i] {
                        self.adj[ao + i] += d;
                    } else {
                        self.adj[bo + i] += d;
                    }
                }
            }
            Op::SumList(k) => {
                let d = self.adj[off];
                for j in 0..self.lists[k].len() {
                    let io = self.meta[self.lists[k][j]].off;
                    self.adj[io] += d;
                }
            }
            Op::WeightedSumList(k) => {
                let d = self.adj[off];
                for j in 0..self.lists[k].len() {
                    let io = self.meta[self.lists[k][j]].off;
                    self.adj[io] += d * self.list_weights[k][j];
                }
            }
            Op::MaxList(k) => {
                let io = self.meta[self.lists[k][self.argmax[k]]].off;
                self.adj[io] += self.adj[off];
            }
        }
    }

    // ── spec-level entry points ─────────────────────────────────────────

    /// Bind flat input/parameter vectors (in declaration order), run a full
    /// forward pass and return the value of the root (last) node.
    pub fn forward(&mut self, inputs: &[f64], params: &[f64]) -> Result<f64, TapeError> {
        let want_in: usize = self.inputs.iter().map(|&id| self.meta[id].len).sum();
        if inputs.len() != want_in {
            return Err(TapeError::Arity {
                what: "inputs",
                expected: want_in,
                got: inputs.len(),
            });
        }
        let want_par: usize = self.params.iter().map(|&id| self.meta[id].len).sum();
        if params.len() != want_par {
            return Err(TapeError::Arity {
                what: "parameters",
                expected: want_par,
                got: params.len(),
            });
        }
        if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(TapeError::NonFiniteInput(i));
        }
        let mut k = 0;
        for idx in 0..self.inputs.len() {
            let id = self.inputs[idx];
            let m = self.meta[id];
            self.vals[m.off..m.off + m.len].copy_from_slice(&inputs[k..k + m.len]);
            k += m.len;
        }
        let mut k = 0;
        for idx in 0..self.params.len() {
            let id = self.params[idx];
            let m = self.meta[id];
            self.vals[m.off..m.off + m.len].copy_from_slice(&params[k..k + m.len]);
            k += m.len;
        }
        self.forward_full();
        let root = self.ops.len() - 1;
        if self.meta[root].len != 1 {
            return Err(TapeError::NotScalar(root));
        }
        Ok(self.vals[self.meta[root].off])
    }

    /// Gradient of a scalar output with respect to the listed nodes,
    /// concatenated in order. Requires a preceding forward pass.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<f64>, TapeError> {
        self.backward(output, ALL_GROUPS)?;
        let mut out = Vec::new();
        for &id in wrt {
            out.extend_from_slice(self.adjoint(id));
        }
        Ok(out)
    }

    // ── symbolic input derivatives ──────────────────────────────────────

    /// Append a subgraph computing `∂output/∂(input[component])` and return
    /// its root. The new node is differentiable with respect to parameters.
    ///
    /// `output` must be scalar and `input` a declared input node; the
    /// derivative is taken with respect to one component of it.
    pub fn input_grad_node(
        &mut self,
        output: NodeId,
        input: NodeId,
        component: usize,
    ) -> Result<NodeId, TapeError> {
        let full = self.input_grad_vec(output, input)?;
        Ok(self.index(full, component))
    }

    /// Append a subgraph computing the full gradient vector
    /// `∂output/∂input` and return its root (same length as `input`).
    pub fn input_grad_vec(&mut self, output: NodeId, input: NodeId) -> Result<NodeId, TapeError> {
        if self.meta[output].len != 1 {
            return Err(TapeError::NotScalar(output));
        }
        if !matches!(self.ops[input], Op::Input) {
            return Err(TapeError::NotAnInput(input));
        }

        // Nodes lying on a path input → output.
        let mut on_path = vec![false; output + 1];
        on_path[input] = true;
        for id in input + 1..=output {
            let hit = self
                .parents(id)
                .iter()
                .any(|&p| p <= output && on_path[p]);
            if hit {
                on_path[id] = true;
            }
        }
        if !on_path[output] {
            return Ok(self.constant_vec(&vec![0.0; self.meta[input].len]));
        }

        // Reverse sweep building adjoints as graph nodes.
        let mut adj: Vec<Option<NodeId>> = vec![None; output + 1];
        adj[output] = Some(self.constant(1.0));
        for id in (input..=output).rev() {
            if !on_path[id] || adj[id].is_none() {
                continue;
            }
            let d = adj[id].unwrap();
            let contribs = self.symbolic_contribs(id, d, &on_path)?;
            for (parent, node) in contribs {
                adj[parent] = Some(match adj[parent] {
                    None => node,
                    Some(prev) => self.add(prev, node),
                });
            }
        }
        match adj[input] {
            Some(n) => Ok(n),
            None => Ok(self.constant_vec(&vec![0.0; self.meta[input].len])),
        }
    }

    fn parents(&self, id: NodeId) -> Vec<NodeId> {
        match self.ops[id] {
            Op::Const | Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::Div(a, b)
            | Op::Dot(a, b)
            | Op::Max(a, b) => vec![a, b],
            Op::Matvec { w, x, .. } | Op::MatvecT { w, x, .. } => vec![w, x],
            Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Sum(a)
            | Op::Broadcast(a, _)
            | Op::Index(a, _)
            | Op::Relu(a)
            | Op::PosClip(a)
            | Op::StepConst(a)
            | Op::Tanh(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Abs(a)
            | Op::Sign(a)
            | Op::Square(a) => vec![a],
            Op::SumList(k) | Op::WeightedSumList(k) | Op::MaxList(k) => self.lists[k].clone(),
        }
    }

    /// Adjoint contributions of node `id` (with adjoint node `d`) to its
    /// on-path parents, expressed as new graph nodes.
    fn symbolic_contribs(
        &mut self,
        id: NodeId,
        d: NodeId,
        on_path: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>, TapeError> {
        let op = self.ops[id].clone();
        let mut out = Vec::new();
        let path = |p: NodeId| p < on_path.len() && on_path[p];
        match op {
            Op::Const | Op::Input | Op::Param(_) => {}
            // Masks are frozen at forward values: no contribution.
            Op::StepConst(_) | Op::Sign(_) => {}
            Op::Add(a, b) => {
                if path(a) {
                    out.push((a, d));
                }
                if path(b) {
                    out.push((b, d));
                }
            }
            Op::Sub(a, b) => {
                if path(a) {
                    out.push((a, d));
                }
                if path(b) {
                    let n = self.scale(d, -1.0);
                    out.push((b, n));
                }
            }
            Op::Mul(a, b) => {
                if path(a) {
                    let n = self.mul(d, b);
                    out.push((a, n));
                }
                if path(b) {
                    let n = self.mul(d, a);
                    out.push((b, n));
                }
            }
            Op::MulScalar(a, s) => {
                if path(a) {
                    let n = self.mul_scalar(d, s);
                    out.push((a, n));
                }
                if path(s) {
                    let n = self.dot(d, a);
                    out.push((s, n));
                }
            }
            Op::Div(a, b) => {
                if path(a) {
                    let n = self.div(d, b);
                    out.push((a, n));
                }
                if path(b) {
                    let q = self.div(id, b); // a / b^2
                    let n = self.mul(d, q);
                    let n = self.scale(n, -1.0);
                    out.push((b, n));
                }
            }
            Op::Scale(a, c) => {
                if path(a) {
                    let n = self.scale(d, c);
                    out.push((a, n));
                }
            }
            Op::Shift(a, _) => {
                if path(a) {
                    out.push((a, d));
                }
            }
            Op::Matvec { w, x, rows, cols } => {
                if path(x) {
                    let n = self.matvec_t(w, d, rows, cols);
                    out.push((x, n));
                }
                if path(w) {
                    return Err(TapeError::UnsupportedSymbolic("matvec weight path"));
                }
            }
            Op::MatvecT { w, x, rows, cols } => {
                if path(x) {
                    let n = self.matvec(w, d, rows, cols);
                    out.push((x, n));
                }
                if path(w) {
                    return Err(TapeError::UnsupportedSymbolic("matvec^T weight path"));
                }
            }
            Op::Dot(a, b) => {
                if path(a) {
                    let n = self.mul_scalar(b, d);
                    out.push((a, n));
                }
                if path(b) {
                    let n = self.mul_scalar(a, d);
                    out.push((b, n));
                }
            }
            Op::Sum(a) => {
                if path(a) {
                    let n = self.broadcast(d, self.meta[a].len);
                    out.push((a, n));
                }
            }
            Op::Broadcast(s, _) => {
                if path(s) {
                    let n = self.sum(d);
                    out.push((s, n));
                }
            }
            Op::Index(a, k) => {
                if path(a) {
                    // Scatter d into position k of a zero vector of a's length.
                    let len = self.meta[a].len;
                    let mut basis = vec![0.0; len];
                    basis[k] = 1.0;
                    let e = self.constant_vec(&basis);
                    let n = self.mul_scalar(e, d);
                    out.push((a, n));
                }
            }
            Op::Relu(a) | Op::PosClip(a) => {
                if path(a) {
                    let mask = self.step_const(a);
                    let n = self.mul(d, mask);
                    out.push((a, n));
                }
            }
            Op::Tanh(a) => {
                if path(a) {
                    let sq = self.square(id);
                    let neg = self.scale(sq, -1.0);
                    let one_minus = self.shift(neg, 1.0);
                    let n = self.mul(d, one_minus);
                    out.push((a, n));
                }
            }
            Op::Sin(a) => {
                if path(a) {
                    let c = self.cos(a);
                    let n = self.mul(d, c);
                    out.push((a, n));
                }
            }
            Op::Cos(a) => {
                if path(a) {
                    let s = self.sin(a);
                    let ns = self.scale(s, -1.0);
                    let n = self.mul(d, ns);
                    out.push((a, n));
                }
            }
            Op::Abs(a) => {
                if path(a) {
                    let s = self.sign(a);
                    let n = self.mul(d, s);
                    out.push((a, n));
                }
            }
            Op::Square(a) => {
                if path(a) {
                    let two_a = self.scale(a, 2.0);
                    let n = self.mul(d, two_a);
                    out.push((a, n));
                }
            }
            Op::Max(_, _) => {
                return Err(TapeError::UnsupportedSymbolic("max"));
            }
            Op::SumList(k) => {
                for j in 0..self.lists[k].len() {
                    let item = self.lists[k][j];
                    if path(item) {
                        out.push((item, d));
                    }
                }
            }
            Op::WeightedSumList(k) => {
                for j in 0..self.lists[k].len() {
                    let item = self.lists[k][j];
                    if path(item) {
                        let w = self.list_weights[k][j];
                        let n = self.scale(d, w);
                        out.push((item, n));
                    }
                }
            }
            Op::MaxList(_) => {
                return Err(TapeError::UnsupportedSymbolic("max-list"));
            }
        }
        Ok(out)
    }

    /// True if every node value is finite (use after a forward pass).
    pub fn all_finite(&self) -> bool {
        self.vals.iter().all(|v| v.is_finite())
    }
}
