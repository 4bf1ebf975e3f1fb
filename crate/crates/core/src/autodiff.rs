//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Learned
//! parameters live in a [`ParamStore`] outside the graph; [`Graph::param`]
//! copies a parameter in as a leaf and [`Graph::backward_to`] adds the
//! resulting gradients back into the store. Graphs are meant to be dropped
//! after their backward pass.
//!
//! Broadcasting is limited to equal shapes and scalar-vs-tensor, where a
//! scalar is any tensor with exactly one element.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(AutodiffError::Contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        if numel(&shape) != values.len() {
            return Err(AutodiffError::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "vector tensors must be nonempty");
        Self {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.values.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn drop_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a parameter held by a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learned tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Drops every gradient buffer, leaving an inference-only parameter set.
    pub fn freeze(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::drop_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Binary { op: Binary, a: Var, b: Var },
    Unary { op: Unary, x: Var },
    Scale { x: Var, factor: f64 },
    Softmax { x: Var },
    Concat { parts: Vec<Var>, outer: usize, inner: usize, widths: Vec<usize> },
    Slice { x: Var, start: usize },
    Reshape { x: Var },
    Sum { x: Var },
    GatherSum { x: Var, groups: Vec<Vec<usize>> },
    BceWithLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient of non-parameter leaves.
    grad: Option<Vec<f64>>,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a non-parameter leaf by previous backward calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Records a leaf; its `requires_grad` flag is honoured.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor.with_requires_grad(false), Op::Leaf { param: None }, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(
            tensor.with_requires_grad(false),
            Op::Leaf { param: None },
            false,
        )
    }

    /// Copies a stored parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let value = Tensor {
            shape: t.shape.clone(),
            values: t.values.clone(),
            requires_grad: false,
            grad: None,
        };
        let v = self.push(value, Op::Leaf { param: Some(id) }, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => return Err(dim("matmul", &sa, &sb)),
        };
        let (k2, n) = match sb.len() {
            1 => (sb[0], 1),
            2 => (sb[0], sb[1]),
            _ => return Err(dim("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(dim("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        let shape = match (sa.len(), sb.len()) {
            (2, 2) => vec![m, n],
            (2, 1) => vec![m],
            (1, 2) => vec![n],
            _ => Vec::new(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out).expect("matmul shape"),
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let shape = if ta.shape() == tb.shape() {
            ta.shape().to_vec()
        } else if tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            return Err(dim("elementwise", ta.shape(), tb.shape()));
        };
        let n = numel(&shape);
        let (va, vb) = (ta.values(), tb.values());
        let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (pick(va, i), pick(vb, i));
                match op {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out).expect("elementwise shape"),
            Op::Binary { op, a, b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Var {
        let t = self.value(x);
        let values = t
            .values()
            .iter()
            .map(|&v| match op {
                Unary::Tanh => v.tanh(),
                Unary::Sigmoid => sigmoid(v),
                Unary::Log => v.ln(),
            })
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, values).expect("unary shape"),
            Op::Unary { op, x },
            rg,
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let values = t.values().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, values).expect("scale shape"),
            Op::Scale { x, factor },
            rg,
        )
    }

    /// Numerically stable softmax of a 1-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 1 {
            return Err(dim("softmax", t.shape(), &[]));
        }
        let values = softmax_values(t.values());
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, values).expect("softmax shape"),
            Op::Softmax { x },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Contract("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(dim("concat", &base, &[axis]));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim("concat", &base, s));
            }
            widths.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p).values();
                out.extend_from_slice(&v[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out).expect("concat shape"),
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                widths,
            },
            rg,
        ))
    }

    /// Contiguous slice `[start, start + len)` of a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 1 || len == 0 || start + len > t.numel() {
            return Err(dim("slice", t.shape(), &[start, len]));
        }
        let values = t.values()[start..start + len].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(values), Op::Slice { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if numel(&shape) != t.numel() {
            return Err(dim("reshape", t.shape(), &shape));
        }
        let values = t.values().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, values)?, Op::Reshape { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).values().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// `out[j] = Σ_{t ∈ groups[j]} x[t]` for a 1-D `x`; empty groups give 0.
    pub fn gather_sum(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 1 || groups.is_empty() {
            return Err(dim("gather_sum", t.shape(), &[groups.len()]));
        }
        let n = t.numel();
        if let Some(&bad) = groups.iter().flatten().find(|&&i| i >= n) {
            return Err(dim("gather_sum", t.shape(), &[bad]));
        }
        let v = t.values();
        let out = groups
            .iter()
            .map(|g| g.iter().map(|&i| v[i]).sum())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::GatherSum { x, groups }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        let n = targets.len().max(1) as f64;
        let weights = vec![1.0 / n; targets.len()];
        self.weighted_bce_with_logits(logits, targets, weights)
    }

    /// `Σ w_i · BCE(sigmoid(logits_i), targets_i)`.
    pub fn weighted_bce_with_logits(&mut self, logits: Var, targets: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != targets.len() || targets.is_empty() || weights.len() != targets.len() {
            return Err(dim("bce_with_logits", t.shape(), &[targets.len()]));
        }
        let total: f64 = t
            .values()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&x, &y), &w)| w * (softplus(x) - y * x))
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceWithLogits { logits, targets, weights },
            rg,
        ))
    }

    /// Reverse sweep from `loss`. Returns the adjoint of every node (None for
    /// nodes that do not require gradients or are not reached).
    fn propagate(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.backprop_node(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(adj)
    }

    fn backprop_node(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let send = |adj: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.numel();
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                // dA = dC · Bᵀ
                send(adj, *a, &|da| {
                    for i in 0..m {
                        for p in 0..k {
                            let row = &bv[p * n..(p + 1) * n];
                            let gr = &g[i * n..(i + 1) * n];
                            da[i * k + p] += gr.iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · dC
                send(adj, *b, &|db| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let gr = &g[i * n..(i + 1) * n];
                            for (d, x) in db[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *d += aip * x;
                            }
                        }
                    }
                });
            }
            Op::Binary { op, a, b } => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                let op = *op;
                let reduce_into = |d: &mut [f64], local: &dyn Fn(usize) -> f64| {
                    if d.len() == 1 && g.len() != 1 {
                        d[0] += (0..g.len()).map(local).sum::<f64>();
                    } else {
                        for (i, di) in d.iter_mut().enumerate() {
                            *di += local(i);
                        }
                    }
                };
                send(adj, *a, &|da| {
                    reduce_into(da, &|i| match op {
                        Binary::Add | Binary::Sub => g[i],
                        Binary::Mul => g[i] * pick(bv, i),
                    })
                });
                send(adj, *b, &|db| {
                    reduce_into(db, &|i| match op {
                        Binary::Add => g[i],
                        Binary::Sub => -g[i],
                        Binary::Mul => g[i] * pick(av, i),
                    })
                });
            }
            Op::Unary { op, x } => {
                let xv = self.value(*x).values();
                let yv = node.value.values();
                send(adj, *x, &|dx| {
                    for i in 0..dx.len() {
                        let local = match op {
                            Unary::Tanh => 1.0 - yv[i] * yv[i],
                            Unary::Sigmoid => yv[i] * (1.0 - yv[i]),
                            Unary::Log => 1.0 / xv[i],
                        };
                        dx[i] += g[i] * local;
                    }
                });
            }
            Op::Scale { x, factor } => {
                send(adj, *x, &|dx| {
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += gi * factor;
                    }
                });
            }
            Op::Softmax { x } => {
                let y = node.value.values();
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                send(adj, *x, &|dx| {
                    for i in 0..dx.len() {
                        dx[i] += y[i] * (g[i] - dot);
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                inner,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    send(adj, p, &|dp| {
                        for o in 0..*outer {
                            let src = o * total * inner + offset * inner;
                            for (d, gi) in dp[o * w * inner..(o + 1) * w * inner]
                                .iter_mut()
                                .zip(&g[src..src + w * inner])
                            {
                                *d += gi;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                send(adj, *x, &|dx| {
                    for (d, gi) in dx[*start..*start + g.len()].iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::Reshape { x } => {
                send(adj, *x, &|dx| {
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::Sum { x } => {
                send(adj, *x, &|dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::GatherSum { x, groups } => {
                send(adj, *x, &|dx| {
                    for (gj, group) in g.iter().zip(groups) {
                        for &t in group {
                            dx[t] += gj;
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets, weights } => {
                let xv = self.value(*logits).values();
                send(adj, *logits, &|dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[0] * weights[i] * (sigmoid(xv[i]) - targets[i]);
                    }
                });
            }
        }
    }

    /// Backpropagates into non-parameter leaves of this graph. Gradients
    /// accumulate across calls; parameter leaves are ignored here.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let adj = self.propagate(loss)?;
        self.store_leaf_grads(adj, None);
        Ok(())
    }

    /// Backpropagates and adds parameter gradients into `store`.
    pub fn backward_to(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let adj = self.propagate(loss)?;
        self.store_leaf_grads(adj, Some(store));
        Ok(())
    }

    fn store_leaf_grads(&mut self, adj: Vec<Option<Vec<f64>>>, mut store: Option<&mut ParamStore>) {
        for (idx, a) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            let Op::Leaf { param } = node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let a = a.unwrap_or_else(|| vec![0.0; node.value.numel()]);
            match (param, store.as_deref_mut()) {
                (Some(id), Some(store)) => store.get_mut(id).accumulate_grad(&a),
                (Some(_), None) => {}
                (None, _) => {
                    let buf = node.grad.get_or_insert_with(|| vec![0.0; a.len()]);
                    for (b, x) in buf.iter_mut().zip(&a) {
                        *b += x;
                    }
                }
            }
        }
    }
}

fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulated in increasing `p` for every entry.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        for i in 0..m {
            out[i] = a[i * k..(i + 1) * k]
                .iter()
                .zip(b)
                .fold(0.0, |acc, (x, y)| acc + x * y);
        }
        return;
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
