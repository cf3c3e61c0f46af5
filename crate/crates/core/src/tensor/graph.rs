//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Ops are evaluated eagerly when recorded, so shape errors surface at the
//! call site. Nodes are stored in creation order, which is a topological
//! order: every parent precedes its children. `eval_forward` replays the whole
//! graph from the current leaf values (used by the finite-difference oracle)
//! and `backward` walks the nodes once in reverse, summing adjoints at shared
//! parents.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::attention::{self, AttentionPlan};
use super::{NdArray, Scalar, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Softmax(Var),
    LogSoftmax(Var),
    NormalizeRows(Var),
    NormalizeColumns(Var),
    Attention { qkv: Var, heads: usize, plan: Arc<AttentionPlan> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    Reshape { x: Var, shape: Vec<usize> },
    Sum(Var),
    Dot { a: Var, b: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::NormalizeColumns(_) => "normalize_columns",
            Op::Attention { .. } => "attention",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape { .. } => "reshape",
            Op::Sum(_) => "sum",
            Op::Dot { .. } => "dot",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } | Op::Dot { a, b } => {
                vec![*a, *b]
            }
            Op::Scale { a, .. } => vec![*a],
            Op::Gelu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::NormalizeRows(x)
            | Op::NormalizeColumns(x)
            | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { qkv, .. } => vec![*qkv],
            Op::ConcatRows(xs) => xs.clone(),
            Op::SliceRows { x, .. } | Op::Reshape { x, .. } => vec![*x],
        }
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Param(String),
    Constant,
    Computed,
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    op: Op,
    kind: Kind,
    value: NdArray<T>,
    /// Op-specific forward cache (layer-norm statistics, attention weights, norms).
    aux: Vec<T>,
    needs_grad: bool,
}

/// Gradients keyed by parameter name.
pub type GradMap<T> = BTreeMap<String, NdArray<T>>;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    stale: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            stale: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf under a unique name.
    pub fn param(&mut self, name: &str, value: NdArray<T>) -> Result<Var, TensorError> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let var = self.push_leaf(Kind::Param(name.to_string()), value, true);
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    /// Registers a constant leaf; it never receives a gradient.
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.push_leaf(Kind::Constant, value, false)
    }

    fn push_leaf(&mut self, kind: Kind, value: NdArray<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            kind,
            value,
            aux: Vec::new(),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &NdArray<T> {
        &self.nodes[var.0].value
    }

    /// Forward cache of an attention node: probabilities laid out head-major.
    pub fn attention_probs(&self, var: Var) -> Option<(&AttentionPlan, usize, &[T])> {
        match &self.nodes[var.0].op {
            Op::Attention { plan, heads, .. } => Some((plan, *heads, &self.nodes[var.0].aux)),
            _ => None,
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Replaces a leaf value. The graph must be replayed with
    /// [`Graph::eval_forward`] before the next backward pass.
    pub fn set_leaf(&mut self, var: Var, value: NdArray<T>) -> Result<(), TensorError> {
        let node = &mut self.nodes[var.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(TensorError::NotALeaf(var.0));
        }
        if node.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_leaf",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        self.stale = true;
        Ok(())
    }

    pub(crate) fn leaf_data_mut(&mut self, var: Var) -> &mut [T] {
        self.stale = true;
        self.nodes[var.0].value.data_mut()
    }

    fn record(&mut self, op: Op) -> Result<Var, TensorError> {
        let (value, aux) = self.compute(&op)?;
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            kind: Kind::Computed,
            value,
            aux,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- op constructors ------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.record(Op::MatMul { a, b })
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.record(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.record(Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        self.record(Op::Scale { a, factor })
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.record(Op::Gelu(x))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        self.record(Op::LayerNorm { x, gain, bias, eps })
    }

    /// Softmax over the last axis (row max subtracted before exponentiation).
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        self.record(Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        self.record(Op::LogSoftmax(x))
    }

    /// Scales every row (last axis) to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        self.record(Op::NormalizeRows(x))
    }

    /// Scales every column of a rank-2 array to unit L2 norm.
    pub fn normalize_columns(&mut self, x: Var) -> Result<Var, TensorError> {
        self.record(Op::NormalizeColumns(x))
    }

    /// Multi-head attention of `qkv` (`[tokens, 3 * dim]`) under `plan`.
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        plan: Arc<AttentionPlan>,
    ) -> Result<Var, TensorError> {
        self.record(Op::Attention { qkv, heads, plan })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        self.record(Op::SliceRows { x, start, len })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.record(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.record(Op::Sum(x))
    }

    /// Full contraction `sum(a * b)` of equal-length operands.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.record(Op::Dot { a, b })
    }

    // ---- evaluation -----------------------------------------------------

    /// Re-evaluates every op node from the current leaves and returns the
    /// value of `root`. Fails on the first node holding a non-finite value.
    pub fn eval_forward(&mut self, root: Var) -> Result<NdArray<T>, TensorError> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, aux) = self.compute(&op)?;
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        self.stale = false;
        self.check_finite()?;
        Ok(self.nodes[root.0].value.clone())
    }

    /// Validation pass: reports the first node (in topological order) that
    /// holds a NaN or infinity.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.nodes.iter().position(|n| !n.value.all_finite()) {
            None => Ok(()),
            Some(i) => Err(TensorError::NonFinite {
                node: i,
                label: self.label(i),
            }),
        }
    }

    fn label(&self, i: usize) -> String {
        match &self.nodes[i].kind {
            Kind::Param(name) => format!("param `{name}`"),
            Kind::Constant => "constant".to_string(),
            Kind::Computed => self.nodes[i].op.name().to_string(),
        }
    }

    /// Reverse pass from a scalar root; returns a gradient for every
    /// parameter leaf (zeros where the root does not depend on it).
    pub fn backward(&self, root: Var) -> Result<GradMap<T>, TensorError> {
        let root_shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::RootNotScalar(root_shape.to_vec()));
        }
        if self.stale {
            return Err(TensorError::StaleGraph);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out = GradMap::new();
        for (name, var) in &self.params {
            let shape = self.nodes[var.0].value.shape();
            let g = match grads.get_mut(var.0).and_then(Option::take) {
                Some(g) => NdArray::from_vec(shape, g)?,
                None => NdArray::zeros(shape),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].value.shape().to_vec(),
            rhs: self.nodes[b.0].value.shape().to_vec(),
        }
    }

    fn compute(&self, op: &Op) -> Result<(NdArray<T>, Vec<T>), TensorError> {
        let v = |x: &Var| &self.nodes[x.0].value;
        let none = Vec::new();
        match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::MatMul { a, b } => {
                let (av, bv) = (v(a), v(b));
                if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
                    return Err(self.shape_err("matmul", *a, *b));
                }
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut out = vec![T::zero(); m * n];
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    av.data(),
                    k as isize,
                    1,
                    bv.data(),
                    n as isize,
                    1,
                    T::zero(),
                    &mut out,
                    n as isize,
                    1,
                );
                Ok((NdArray::from_vec(&[m, n], out)?, none))
            }
            Op::Add { a, b } => {
                let (av, bv) = (v(a), v(b));
                if !is_suffix(bv.shape(), av.shape()) {
                    return Err(self.shape_err("add", *a, *b));
                }
                let bl = bv.len();
                let mut out = av.data().to_vec();
                if bl > 0 {
                    for chunk in out.chunks_mut(bl) {
                        for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                            *o = *o + x;
                        }
                    }
                }
                Ok((NdArray::from_vec(av.shape(), out)?, none))
            }
            Op::Mul { a, b } => {
                let (av, bv) = (v(a), v(b));
                if av.shape() != bv.shape() {
                    return Err(self.shape_err("mul", *a, *b));
                }
                let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                Ok((NdArray::from_vec(av.shape(), out)?, none))
            }
            Op::Scale { a, factor } => {
                let f = T::lit(*factor);
                Ok((v(a).map(|x| x * f), none))
            }
            Op::Gelu(x) => Ok((v(x).map(gelu), none)),
            Op::LayerNorm { x, gain, bias, eps } => {
                let (xv, gv, bv) = (v(x), v(gain), v(bias));
                let d = xv.last_dim();
                if gv.shape() != [d] || bv.shape() != [d] {
                    return Err(self.shape_err("layer_norm", *x, *gain));
                }
                let rows = xv.rows();
                let mut out = vec![T::zero(); xv.len()];
                let mut stats = Vec::with_capacity(rows * 2);
                let inv_d = T::lit(1.0 / d as f64);
                for r in 0..rows {
                    let row = xv.row(r);
                    let mean = row.iter().copied().sum::<T>() * inv_d;
                    let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() * inv_d;
                    let rstd = T::one() / (var + T::lit(*eps)).sqrt();
                    let dst = &mut out[r * d..(r + 1) * d];
                    for c in 0..d {
                        dst[c] = (row[c] - mean) * rstd * gv.data()[c] + bv.data()[c];
                    }
                    stats.push(mean);
                    stats.push(rstd);
                }
                Ok((NdArray::from_vec(xv.shape(), out)?, stats))
            }
            Op::Softmax(x) => {
                let xv = v(x);
                let d = xv.last_dim();
                let mut out = xv.data().to_vec();
                if d > 0 {
                    out.chunks_mut(d).for_each(softmax_in_place);
                }
                Ok((NdArray::from_vec(xv.shape(), out)?, none))
            }
            Op::LogSoftmax(x) => {
                let xv = v(x);
                let d = xv.last_dim();
                let mut out = xv.data().to_vec();
                if d > 0 {
                    for row in out.chunks_mut(d) {
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let lse = row.iter().map(|&e| (e - max).exp()).sum::<T>().ln() + max;
                        row.iter_mut().for_each(|e| *e = *e - lse);
                    }
                }
                Ok((NdArray::from_vec(xv.shape(), out)?, none))
            }
            Op::NormalizeRows(x) => {
                let xv = v(x);
                let d = xv.last_dim();
                let mut out = xv.data().to_vec();
                let mut norms = Vec::with_capacity(xv.rows());
                if d > 0 {
                    for row in out.chunks_mut(d) {
                        let n = row.iter().map(|&e| e * e).sum::<T>().sqrt().max(T::lit(NORM_FLOOR));
                        row.iter_mut().for_each(|e| *e = *e / n);
                        norms.push(n);
                    }
                }
                Ok((NdArray::from_vec(xv.shape(), out)?, norms))
            }
            Op::NormalizeColumns(x) => {
                let xv = v(x);
                if xv.rank() != 2 {
                    return Err(self.shape_err("normalize_columns", *x, *x));
                }
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let mut norms = vec![T::zero(); c];
                for i in 0..r {
                    for (j, n) in norms.iter_mut().enumerate() {
                        let e = xv.data()[i * c + j];
                        *n = *n + e * e;
                    }
                }
                norms.iter_mut().for_each(|n| *n = n.sqrt().max(T::lit(NORM_FLOOR)));
                let out = (0..r * c).map(|i| xv.data()[i] / norms[i % c]).collect();
                Ok((NdArray::from_vec(xv.shape(), out)?, norms))
            }
            Op::Attention { qkv, heads, plan } => {
                let qv = v(qkv);
                let width = qv.last_dim();
                if qv.rank() != 2
                    || width % 3 != 0
                    || *heads == 0
                    || (width / 3) % heads != 0
                    || qv.rows() != plan.tokens()
                {
                    return Err(TensorError::ShapeMismatch {
                        op: "attention",
                        lhs: qv.shape().to_vec(),
                        rhs: vec![plan.tokens(), *heads],
                    });
                }
                let dim = width / 3;
                let (out, probs) = attention::forward(qv.data(), dim, *heads, plan);
                Ok((NdArray::from_vec(&[plan.tokens(), dim], out)?, probs))
            }
            Op::ConcatRows(parts) => {
                let first = parts.first().ok_or(TensorError::EmptyConcat)?;
                let cols = v(first).last_dim();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let pv = v(p);
                    if pv.rank() != 2 || pv.last_dim() != cols {
                        return Err(self.shape_err("concat_rows", *first, *p));
                    }
                    rows += pv.rows();
                    data.extend_from_slice(pv.data());
                }
                Ok((NdArray::from_vec(&[rows, cols], data)?, none))
            }
            Op::SliceRows { x, start, len } => {
                let xv = v(x);
                if xv.rank() != 2 || start + len > xv.rows() {
                    return Err(TensorError::ShapeMismatch {
                        op: "slice_rows",
                        lhs: xv.shape().to_vec(),
                        rhs: vec![*start, *len],
                    });
                }
                let d = xv.last_dim();
                let data = xv.data()[start * d..(start + len) * d].to_vec();
                Ok((NdArray::from_vec(&[*len, d], data)?, none))
            }
            Op::Reshape { x, shape } => Ok((v(x).clone().reshape(shape)?, none)),
            Op::Sum(x) => Ok((NdArray::scalar(v(x).sum()), none)),
            Op::Dot { a, b } => {
                let (av, bv) = (v(a), v(b));
                if av.len() != bv.len() {
                    return Err(self.shape_err("dot", *a, *b));
                }
                let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).sum();
                Ok((NdArray::scalar(s), none))
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |x: &Var| &self.nodes[x.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // dA = dC * B^T
                self.accumulate(grads, *a, |da| {
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv.data(), 1, n as isize, T::one(), da, k as isize, 1);
                });
                // dB = A^T * dC
                self.accumulate(grads, *b, |db| {
                    T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1);
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                let bl = val(b).len();
                self.accumulate(grads, *b, |db| {
                    for chunk in g.chunks(bl.max(1)) {
                        add_into(db, chunk);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                self.accumulate(grads, *a, |da| {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv.data()) {
                        *d = *d + gv * y;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av.data()) {
                        *d = *d + gv * x;
                    }
                });
            }
            Op::Scale { a, factor } => {
                let f = T::lit(*factor);
                self.accumulate(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d = *d + gv * f;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(x);
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gv), &e) in dx.iter_mut().zip(g).zip(xv.data()) {
                        *d = *d + gv * gelu_grad(e);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                let (xv, gv) = (val(x), val(gain));
                let d = xv.last_dim();
                let rows = xv.rows();
                let stats = &node.aux;
                let inv_d = T::lit(1.0 / d as f64);
                let xhat = |r: usize, c: usize| (xv.row(r)[c] - stats[2 * r]) * stats[2 * r + 1];
                self.accumulate(grads, *gain, |dg| {
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] = dg[c] + g[r * d + c] * xhat(r, c);
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for r in 0..rows {
                        add_into(db, &g[r * d..(r + 1) * d]);
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gv.data()[c];
                            mean_d = mean_d + dxhat[c];
                            mean_dx = mean_dx + dxhat[c] * xhat(r, c);
                        }
                        mean_d = mean_d * inv_d;
                        mean_dx = mean_dx * inv_d;
                        let rstd = stats[2 * r + 1];
                        for c in 0..d {
                            let delta = rstd * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
                            dx[r * d + c] = dx[r * d + c] + delta;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            dx[r * d + c] = dx[r * d + c] + yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let s: T = gr.iter().copied().sum();
                        for c in 0..d {
                            dx[r * d + c] = dx[r * d + c] + gr[c] - yr[c].exp() * s;
                        }
                    }
                });
            }
            Op::NormalizeRows(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let norms = &node.aux;
                self.accumulate(grads, *x, |dx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            dx[r * d + c] = dx[r * d + c] + (gr[c] - yr[c] * s) / norms[r];
                        }
                    }
                });
            }
            Op::NormalizeColumns(x) => {
                let y = &node.value;
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let norms = &node.aux;
                let mut s = vec![T::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        s[j] = s[j] + y.data()[i * c + j] * g[i * c + j];
                    }
                }
                self.accumulate(grads, *x, |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            dx[k] = dx[k] + (g[k] - y.data()[k] * s[j]) / norms[j];
                        }
                    }
                });
            }
            Op::Attention { qkv, heads, plan } => {
                let qv = val(qkv);
                let dim = qv.last_dim() / 3;
                self.accumulate(grads, *qkv, |dq| {
                    attention::backward(qv.data(), &node.aux, g, dim, *heads, plan, dq);
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(p).len();
                    self.accumulate(grads, *p, |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start, len } => {
                let d = val(x).last_dim();
                self.accumulate(grads, *x, |dx| {
                    add_into(&mut dx[start * d..(start + len) * d], g);
                });
            }
            Op::Reshape { x, .. } => self.accumulate(grads, *x, |dx| add_into(dx, g)),
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d = *d + g0));
            }
            Op::Dot { a, b } => {
                let g0 = g[0];
                let (av, bv) = (val(a), val(b));
                self.accumulate(grads, *a, |da| {
                    for (d, &y) in da.iter_mut().zip(bv.data()) {
                        *d = *d + g0 * y;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (d, &x) in db.iter_mut().zip(av.data()) {
                        *d = *d + g0 * x;
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        let len = self.nodes[var.0].value.len();
        let buf = grads[var.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        total = total + *e;
    }
    row.iter_mut().for_each(|e| *e = *e / total);
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
