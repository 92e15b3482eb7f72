use crate::autodiff::tensor::{dot, norm};
use crate::autodiff::{ParamId, ParameterStore, Shape, Tensor};
use crate::error::{Error, Result};

/// Guard used by `l2-normalize` and `cosine-similarity` on near-zero vectors.
pub const NORMALIZE_EPS: f64 = 1e-12;
/// Smallest argument accepted by `log`.
pub const LOG_MIN: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations. Attributes live inline in the variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Subtract,
    /// Multiply by a fixed constant.
    Scale(f64),
    /// Scalar node times any tensor node: inputs `[scalar, x]`.
    ScalarMultiply,
    /// Elementwise product.
    Multiply,
    MatVec,
    MatMul,
    Dot,
    L2Norm,
    L2Normalize,
    Cosine,
    Sigmoid,
    Tanh,
    Log,
    Exp,
    Sum,
    Mean,
    /// Concatenates scalars and vectors into one vector.
    Concat,
    Softmax { tau: f64 },
    CrossEntropy { target: usize },
    /// Picks one entry of a vector as a scalar.
    Element(usize),
    /// `max(x, floor)` elementwise; zero gradient where clamped.
    ClampMin(f64),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Scale(_) => "scale",
            Primitive::ScalarMultiply => "scalar-multiply",
            Primitive::Multiply => "elementwise-multiply",
            Primitive::MatVec => "matrix-vector-product",
            Primitive::MatMul => "matrix-matrix-product",
            Primitive::Dot => "dot",
            Primitive::L2Norm => "l2-norm",
            Primitive::L2Normalize => "l2-normalize",
            Primitive::Cosine => "cosine-similarity",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Concat => "concat",
            Primitive::Softmax { .. } => "softmax-with-temperature",
            Primitive::CrossEntropy { .. } => "cross-entropy-with-logits",
            Primitive::Element(_) => "element",
            Primitive::ClampMin(_) => "clamp-min",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Subtract
            | Primitive::ScalarMultiply
            | Primitive::Multiply
            | Primitive::MatVec
            | Primitive::MatMul
            | Primitive::Dot
            | Primitive::Cosine => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Constant,
    Param(ParamId),
    Op(Primitive),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
}

/// Append-only reverse-mode tape. Forward values are computed eagerly when a
/// node is appended; inputs always precede the node that consumes them.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            kind,
            inputs,
            value,
        });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Constant, Vec::new(), value)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn constant_vector(&mut self, v: Vec<f64>) -> NodeId {
        self.constant(Tensor::vector(v))
    }

    /// Leaf holding a copy of a parameter's current value; backward
    /// accumulates into that parameter's gradient slot.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> NodeId {
        let value = store.value(id).clone();
        self.push(NodeKind::Param(id), Vec::new(), value)
    }

    /// Appends one primitive application and returns the new node.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(n) = prim.arity() {
            if inputs.len() != n {
                return Err(Error::contract(format!(
                    "{} expects {n} inputs, got {}",
                    prim.name(),
                    inputs.len()
                )));
            }
        }
        if let Some(bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(Error::contract(format!(
                "{} references unknown node {}",
                prim.name(),
                bad.0
            )));
        }
        let value = self.forward(prim, inputs)?;
        Ok(self.push(NodeKind::Op(prim), inputs.to_vec(), value))
    }

    fn forward(&self, prim: Primitive, inputs: &[NodeId]) -> Result<Tensor> {
        let op = prim.name();
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let shape_err = |l: Shape, r: Shape| Error::Shape {
            op,
            left: l,
            right: r,
        };
        let same_shape = || -> Result<(&Tensor, &Tensor)> {
            let (a, b) = (val(0), val(1));
            if a.shape() != b.shape() {
                return Err(shape_err(a.shape(), b.shape()));
            }
            Ok((a, b))
        };
        let vector_of = |t: &Tensor| -> Result<usize> {
            match t.shape() {
                Shape::Vector(n) => Ok(n),
                s => Err(shape_err(s, Shape::Vector(0))),
            }
        };
        let map = |t: &Tensor, f: &dyn Fn(f64) -> f64| {
            Tensor::from_shape(t.shape(), t.data().iter().map(|&v| f(v)).collect())
        };

        let out = match prim {
            Primitive::Add => {
                let (a, b) = same_shape()?;
                let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::from_shape(a.shape(), d)
            }
            Primitive::Subtract => {
                let (a, b) = same_shape()?;
                let d = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
                Tensor::from_shape(a.shape(), d)
            }
            Primitive::Multiply => {
                let (a, b) = same_shape()?;
                let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::from_shape(a.shape(), d)
            }
            Primitive::Scale(c) => map(val(0), &|v| c * v),
            Primitive::ScalarMultiply => {
                let (s, x) = (val(0), val(1));
                if !s.shape().is_scalar() {
                    return Err(shape_err(s.shape(), x.shape()));
                }
                let c = s.item();
                map(x, &|v| c * v)
            }
            Primitive::MatVec => {
                let (m, v) = (val(0), val(1));
                match (m.shape(), v.shape()) {
                    (Shape::Matrix(r, c), Shape::Vector(n)) if c == n => {
                        let d = (0..r).map(|i| dot(m.row(i), v.data())).collect();
                        Tensor::vector(d)
                    }
                    (l, r) => return Err(shape_err(l, r)),
                }
            }
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                match (a.shape(), b.shape()) {
                    (Shape::Matrix(r, n), Shape::Matrix(n2, c)) if n == n2 => {
                        let mut d = vec![0.0; r * c];
                        for i in 0..r {
                            for k in 0..n {
                                let aik = a.data()[i * n + k];
                                let brow = b.row(k);
                                let orow = &mut d[i * c..(i + 1) * c];
                                for (o, bv) in orow.iter_mut().zip(brow) {
                                    *o += aik * bv;
                                }
                            }
                        }
                        Tensor::matrix(r, c, d)
                    }
                    (l, r) => return Err(shape_err(l, r)),
                }
            }
            Primitive::Dot => {
                let (a, b) = same_shape()?;
                vector_of(a)?;
                Tensor::scalar(dot(a.data(), b.data()))
            }
            Primitive::L2Norm => {
                vector_of(val(0))?;
                Tensor::scalar(norm(val(0).data()))
            }
            Primitive::L2Normalize => {
                vector_of(val(0))?;
                let n = norm(val(0).data()).max(NORMALIZE_EPS);
                map(val(0), &|v| v / n)
            }
            Primitive::Cosine => {
                let (a, b) = same_shape()?;
                vector_of(a)?;
                let na = norm(a.data()).max(NORMALIZE_EPS);
                let nb = norm(b.data()).max(NORMALIZE_EPS);
                Tensor::scalar(dot(a.data(), b.data()) / (na * nb))
            }
            Primitive::Sigmoid => map(val(0), &sigmoid),
            Primitive::Tanh => map(val(0), &f64::tanh),
            Primitive::Log => {
                if let Some(bad) = val(0).data().iter().find(|&&v| !(v >= LOG_MIN)) {
                    return Err(Error::domain(op, format!("argument {bad} below {LOG_MIN}")));
                }
                map(val(0), &f64::ln)
            }
            Primitive::Exp => {
                let t = map(val(0), &f64::exp);
                if !t.is_finite() {
                    return Err(Error::domain(op, "result overflows f64"));
                }
                t
            }
            Primitive::Sum => Tensor::scalar(val(0).data().iter().sum()),
            Primitive::Mean => {
                let t = val(0);
                if t.is_empty() {
                    return Err(Error::domain(op, "mean of empty tensor"));
                }
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Primitive::Concat => {
                if inputs.is_empty() {
                    return Err(Error::contract("concat needs at least one input"));
                }
                let mut d = Vec::new();
                for &i in inputs {
                    let t = &self.nodes[i.0].value;
                    if let Shape::Matrix(..) = t.shape() {
                        return Err(shape_err(t.shape(), Shape::Vector(0)));
                    }
                    d.extend_from_slice(t.data());
                }
                Tensor::vector(d)
            }
            Primitive::Softmax { tau } => {
                if !(tau > 0.0) {
                    return Err(Error::domain(op, format!("temperature {tau} must be > 0")));
                }
                vector_of(val(0))?;
                Tensor::vector(softmax(val(0).data(), tau))
            }
            Primitive::CrossEntropy { target } => {
                let n = vector_of(val(0))?;
                if target >= n {
                    return Err(Error::contract(format!(
                        "{op}: target {target} out of range for {n} logits"
                    )));
                }
                let x = val(0).data();
                Tensor::scalar(log_sum_exp(x) - x[target])
            }
            Primitive::Element(i) => {
                let n = vector_of(val(0))?;
                if i >= n {
                    return Err(Error::contract(format!("{op}: index {i} out of range {n}")));
                }
                Tensor::scalar(val(0).data()[i])
            }
            Primitive::ClampMin(lo) => map(val(0), &|v| v.max(lo)),
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar root. Parameter leaves accumulate into the
    /// store; all node gradients are returned for inspection.
    pub fn backward(&self, root: NodeId, store: &mut ParameterStore) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract(format!("unknown root node {}", root.0)));
        }
        let root_shape = self.shape(root);
        if !root_shape.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got {root_shape}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.kind {
                NodeKind::Constant => {}
                NodeKind::Param(pid) => store.accumulate(*pid, &g),
                NodeKind::Op(prim) => {
                    for (input, local) in self.local_grads(*prim, node, &g) {
                        match &mut grads[input.0] {
                            Some(acc) => {
                                for (a, l) in acc.iter_mut().zip(&local) {
                                    *a += l;
                                }
                            }
                            slot @ None => *slot = Some(local),
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products for one node given the upstream gradient `g`.
    fn local_grads(&self, prim: Primitive, node: &Node, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let ins = &node.inputs;
        let x = |i: usize| self.nodes[ins[i].0].value.data();
        let y = node.value.data();
        let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };

        match prim {
            Primitive::Add => vec![(ins[0], g.to_vec()), (ins[1], g.to_vec())],
            Primitive::Subtract => vec![(ins[0], g.to_vec()), (ins[1], g.iter().map(|v| -v).collect())],
            Primitive::Scale(c) => vec![(ins[0], g.iter().map(|v| c * v).collect())],
            Primitive::ScalarMultiply => {
                let s = x(0)[0];
                vec![
                    (ins[0], vec![dot(g, x(1))]),
                    (ins[1], g.iter().map(|v| s * v).collect()),
                ]
            }
            Primitive::Multiply => vec![
                (ins[0], elementwise(&|i| g[i] * x(1)[i])),
                (ins[1], elementwise(&|i| g[i] * x(0)[i])),
            ],
            Primitive::MatVec => {
                let m = &self.nodes[ins[0].0].value;
                let v = x(1);
                let (r, c) = (m.rows(), m.cols());
                let mut dm = vec![0.0; r * c];
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    let gi = g[i];
                    let row = m.row(i);
                    let drow = &mut dm[i * c..(i + 1) * c];
                    for j in 0..c {
                        drow[j] = gi * v[j];
                        dv[j] += gi * row[j];
                    }
                }
                vec![(ins[0], dm), (ins[1], dv)]
            }
            Primitive::MatMul => {
                let a = &self.nodes[ins[0].0].value;
                let b = &self.nodes[ins[1].0].value;
                let (r, n, c) = (a.rows(), a.cols(), b.cols());
                let mut da = vec![0.0; r * n];
                let mut db = vec![0.0; n * c];
                for i in 0..r {
                    let grow = &g[i * c..(i + 1) * c];
                    for k in 0..n {
                        da[i * n + k] = dot(grow, b.row(k));
                        let aik = a.data()[i * n + k];
                        for (d, gv) in db[k * c..(k + 1) * c].iter_mut().zip(grow) {
                            *d += aik * gv;
                        }
                    }
                }
                vec![(ins[0], da), (ins[1], db)]
            }
            Primitive::Dot => {
                let s = g[0];
                vec![
                    (ins[0], x(1).iter().map(|v| s * v).collect()),
                    (ins[1], x(0).iter().map(|v| s * v).collect()),
                ]
            }
            Primitive::L2Norm => {
                let n = y[0];
                let s = if n > 0.0 { g[0] / n } else { 0.0 };
                vec![(ins[0], x(0).iter().map(|v| s * v).collect())]
            }
            Primitive::L2Normalize => {
                let n = norm(x(0));
                if n > NORMALIZE_EPS {
                    let yg = dot(y, g);
                    vec![(ins[0], elementwise(&|i| (g[i] - y[i] * yg) / n))]
                } else {
                    vec![(ins[0], g.iter().map(|v| v / NORMALIZE_EPS).collect())]
                }
            }
            Primitive::Cosine => {
                let (a, b) = (x(0), x(1));
                let (na_raw, nb_raw) = (norm(a), norm(b));
                let na = na_raw.max(NORMALIZE_EPS);
                let nb = nb_raw.max(NORMALIZE_EPS);
                let c = y[0];
                let s = g[0];
                // Below the guard the norm is a constant, so only the bilinear term remains.
                let ka = if na_raw > NORMALIZE_EPS { c / (na * na) } else { 0.0 };
                let kb = if nb_raw > NORMALIZE_EPS { c / (nb * nb) } else { 0.0 };
                let da = (0..a.len()).map(|i| s * (b[i] / (na * nb) - ka * a[i])).collect();
                let db = (0..b.len()).map(|i| s * (a[i] / (na * nb) - kb * b[i])).collect();
                vec![(ins[0], da), (ins[1], db)]
            }
            Primitive::Sigmoid => vec![(ins[0], elementwise(&|i| g[i] * y[i] * (1.0 - y[i])))],
            Primitive::Tanh => vec![(ins[0], elementwise(&|i| g[i] * (1.0 - y[i] * y[i])))],
            Primitive::Log => vec![(ins[0], elementwise(&|i| g[i] / x(0)[i]))],
            Primitive::Exp => vec![(ins[0], elementwise(&|i| g[i] * y[i]))],
            Primitive::Sum => vec![(ins[0], vec![g[0]; x(0).len()])],
            Primitive::Mean => {
                let n = x(0).len();
                vec![(ins[0], vec![g[0] / n as f64; n])]
            }
            Primitive::Concat => {
                let mut out = Vec::with_capacity(ins.len());
                let mut off = 0;
                for &i in ins {
                    let n = self.nodes[i.0].value.len();
                    out.push((i, g[off..off + n].to_vec()));
                    off += n;
                }
                out
            }
            Primitive::Softmax { tau } => {
                let gy = dot(g, y);
                vec![(ins[0], elementwise(&|i| y[i] * (g[i] - gy) / tau))]
            }
            Primitive::CrossEntropy { target } => {
                let p = softmax(x(0), 1.0);
                let s = g[0];
                let d = p
                    .iter()
                    .enumerate()
                    .map(|(i, pi)| s * (pi - if i == target { 1.0 } else { 0.0 }))
                    .collect();
                vec![(ins[0], d)]
            }
            Primitive::Element(k) => {
                let mut d = vec![0.0; x(0).len()];
                d[k] = g[0];
                vec![(ins[0], d)]
            }
            Primitive::ClampMin(lo) => {
                let xs = x(0);
                vec![(ins[0], elementwise(&|i| if xs[i] > lo { g[i] } else { 0.0 }))]
            }
        }
    }

    /// Number of nodes of a given primitive kind, e.g. for asserting there is
    /// exactly one loss node per instance.
    pub fn count_ops(&self, pred: impl Fn(&Primitive) -> bool) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(&n.kind, NodeKind::Op(p) if pred(p)))
            .count()
    }

    // Convenience wrappers.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Subtract, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn scalar_mul(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::ScalarMultiply, &[s, x])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Multiply, &[a, b])
    }
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatVec, &[m, v])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Dot, &[a, b])
    }
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::L2Norm, &[a])
    }
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::L2Normalize, &[a])
    }
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Cosine, &[a, b])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::Concat, parts)
    }
    pub fn softmax(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        self.apply(Primitive::Softmax { tau }, &[a])
    }
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        self.apply(Primitive::CrossEntropy { target }, &[logits])
    }
    pub fn element(&mut self, v: NodeId, i: usize) -> Result<NodeId> {
        self.apply(Primitive::Element(i), &[v])
    }
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.apply(Primitive::ClampMin(floor), &[a])
    }

    /// `tanh(W x + b)`.
    pub fn affine_tanh(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let wx = self.matvec(w, x)?;
        let z = self.add(wx, b)?;
        self.tanh(z)
    }

    /// Sum of a non-empty list of same-shaped nodes.
    pub fn add_all(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::contract("add_all needs at least one input"))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }
}

/// Per-node gradients of the root, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node does not influence the root.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of `x / tau`.
pub fn softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - max) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
