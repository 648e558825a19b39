//! Lazy computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is also a valid
//! topological order, so forward evaluation is a single left-to-right sweep
//! and backward a single right-to-left sweep. All reductions run in fixed
//! sequential order, so repeated evaluation of the same graph on the same
//! bindings is bit-identical.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::{strides_of, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a graph node. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    /// Placeholder bound by name at evaluation time.
    Input(String),
    /// Concrete tensor captured at construction.
    Leaf,
    Add,
    /// `a + b` where the shape of `b` is a trailing suffix of the shape of
    /// `a`; `b` is repeated over the leading axes.
    AddBroadcast,
    Mul,
    Scale(f64),
    Matmul,
    Transpose(usize, usize),
    Reshape(Vec<usize>),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Gather(Arc<Vec<usize>>),
    Softmax,
    LayerNorm {
        eps: f64,
    },
    Gelu,
    SumAll,
    MeanAll,
    CrossEntropy(Arc<Vec<usize>>),
    Detach,
    Patchify {
        patch: usize,
    },
    Unpatchify {
        patch: usize,
        channels: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::AddBroadcast => "add_broadcast",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Matmul => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather(_) => "gather",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu => "gelu",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::CrossEntropy(_) => "cross_entropy",
            Op::Detach => "detach",
            Op::Patchify { .. } => "patchify",
            Op::Unpatchify { .. } => "unpatchify",
        }
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    value: Option<Tensor<T>>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    input_names: HashMap<String, Var>,
    // Insertion-ordered so optimizer sweeps see parameters deterministically.
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            input_names: HashMap::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Option<Tensor<T>>, needs_grad: bool) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            grad: None,
            needs_grad,
        });
        id
    }

    fn propagated_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Named placeholder; a tensor must be bound via `eval` before use.
    pub fn input(&mut self, name: &str) -> Var {
        let v = self.push(Op::Input(name.to_string()), vec![], None, false);
        self.input_names.insert(name.to_string(), v);
        v
    }

    /// Constant tensor; no gradient is tracked.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, vec![], Some(value), false)
    }

    /// Named differentiable leaf. Gradients can be fetched with
    /// [`Graph::grad_named`] after `backward`.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        let v = self.push(Op::Leaf, vec![], Some(value.clone()), true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let ng = self.propagated_grad(&[a, b]);
        self.push(Op::Add, vec![a, b], None, ng)
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let ng = self.propagated_grad(&[a, b]);
        self.push(Op::AddBroadcast, vec![a, b], None, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let ng = self.propagated_grad(&[a, b]);
        self.push(Op::Mul, vec![a, b], None, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ng = self.propagated_grad(&[x]);
        self.push(Op::Scale(c), vec![x], None, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ng = self.propagated_grad(&[a, b]);
        self.push(Op::Matmul, vec![a, b], None, ng)
    }

    pub fn transpose(&mut self, x: Var, ax0: usize, ax1: usize) -> Var {
        let ng = self.propagated_grad(&[x]);
        self.push(Op::Transpose(ax0.min(ax1), ax0.max(ax1)), vec![x], None, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let ng = self.propagated_grad(&[x]);
        self.push(Op::Reshape(shape.to_vec()), vec![x], None, ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let ng = self.propagated_grad(parts);
        self.push(Op::Concat(axis), parts.to_vec(), None, ng)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let ng = self.propagated_grad(&[x]);
        self.push(Op::Slice { axis, start, len }, vec![x], None, ng)
    }

    /// Select rows of a `(rows, width)` table. Gradients scatter-add back
    /// into the table, so repeated indices accumulate.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let ng = self.propagated_grad(&[table]);
        self.push(Op::Gather(Arc::new(ids.to_vec())), vec![table], None, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let ng = self.propagated_grad(&[x]);
        self.push(Op::Softmax, vec![x], None, ng)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let ng = self.propagated_grad(&[x, gamma, beta]);
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta], None, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let ng = self.propagated_grad(&[x]);
        self.push(Op::Gelu, vec![x], None, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let ng = self.propagated_grad(&[x]);
        self.push(Op::SumAll, vec![x], None, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let ng = self.propagated_grad(&[x]);
        self.push(Op::MeanAll, vec![x], None, ng)
    }

    /// Per-row negative log-likelihood from raw logits `(n, classes)`:
    /// `out[i] = logsumexp(logits[i]) - logits[i][target[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let ng = self.propagated_grad(&[logits]);
        self.push(
            Op::CrossEntropy(Arc::new(targets.to_vec())),
            vec![logits],
            None,
            ng,
        )
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        self.push(Op::Detach, vec![x], None, false)
    }

    /// `(B, H, W, C)` to `(B, H/p, W/p, p*p*C)`; patch interior is laid out
    /// row-major as `(py, px, c)`.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Var {
        let ng = self.propagated_grad(&[x]);
        self.push(Op::Patchify { patch }, vec![x], None, ng)
    }

    /// Inverse of [`Graph::patchify`].
    pub fn unpatchify(&mut self, x: Var, patch: usize, channels: usize) -> Var {
        let ng = self.propagated_grad(&[x]);
        self.push(Op::Unpatchify { patch, channels }, vec![x], None, ng)
    }

    /// Number of nodes currently in the graph.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of an evaluated node. Panics if the node has not been computed;
    /// call after a successful `eval`.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("node not evaluated; call eval() first")
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        let grad = node.grad.as_ref()?;
        let shape = node.value.as_ref()?.shape().to_vec();
        Some(Tensor::from_vec(&shape, grad.clone()).expect("grad length tracks value length"))
    }

    pub fn grad_named(&self, name: &str) -> Option<Tensor<T>> {
        let &(_, v) = self.params.iter().find(|(n, _)| n == name)?;
        self.grad(v)
    }

    /// Parameter names in registration order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Bind `feeds` to named inputs and evaluate every node that does not
    /// have a value yet. Passing any feed invalidates previously computed
    /// results so the whole graph re-runs against the new bindings; with no
    /// feeds, evaluation is incremental over newly appended nodes.
    pub fn eval(&mut self, feeds: &[(&str, &Tensor<T>)]) -> Result<()> {
        if !feeds.is_empty() {
            for (name, tensor) in feeds {
                let var = *self
                    .input_names
                    .get(*name)
                    .ok_or_else(|| Error::InvalidArgument(format!("no graph input named `{name}`")))?;
                self.nodes[var.0].value = Some((*tensor).clone());
            }
            for node in &mut self.nodes {
                if !matches!(node.op, Op::Input(_) | Op::Leaf) {
                    node.value = None;
                }
            }
        }
        for idx in 0..self.nodes.len() {
            if self.nodes[idx].value.is_some() {
                continue;
            }
            if let Op::Input(name) = &self.nodes[idx].op {
                return Err(Error::UnboundInput(name.clone()));
            }
            let value = self.forward_node(idx)?;
            if !value.all_finite() {
                return Err(Error::NonFinite(format!(
                    "{} (node {idx})",
                    self.nodes[idx].op.name()
                )));
            }
            self.nodes[idx].value = Some(value);
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// every node on a differentiable path, so call once per evaluation.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let out_value = self.nodes[out.0]
            .value
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("backward() before eval()".into()))?;
        if out_value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward() needs a scalar output, got shape {:?}",
                out_value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[out.0].grad = Some(vec![T::ONE]);
        for idx in (0..self.nodes.len()).rev() {
            if self.nodes[idx].grad.is_none() || self.nodes[idx].inputs.is_empty() {
                continue;
            }
            self.backward_node(idx)?;
        }
        Ok(())
    }

    fn forward_node(&self, idx: usize) -> Result<Tensor<T>> {
        let node = &self.nodes[idx];
        let val = |v: Var| -> &Tensor<T> {
            self.nodes[v.0]
                .value
                .as_ref()
                .expect("inputs precede node in topo order")
        };
        match &node.op {
            Op::Input(_) | Op::Leaf => unreachable!("handled by eval"),
            Op::Add => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                if a.shape() != b.shape() {
                    return Err(Error::shape(format!(
                        "add: {:?} vs {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let mut out = a.clone();
                for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
                    *o += bv;
                }
                Ok(out)
            }
            Op::AddBroadcast => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                let (ash, bsh) = (a.shape(), b.shape());
                if bsh.len() >= ash.len() || &ash[ash.len() - bsh.len()..] != bsh {
                    return Err(Error::shape(format!(
                        "add_broadcast: {bsh:?} is not a trailing suffix of {ash:?}"
                    )));
                }
                let bn = b.numel();
                let mut out = a.clone();
                let bd = b.data();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o += bd[i % bn];
                }
                Ok(out)
            }
            Op::Mul => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                if a.shape() != b.shape() {
                    return Err(Error::shape(format!(
                        "mul: {:?} vs {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let mut out = a.clone();
                for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
                    *o = *o * bv;
                }
                Ok(out)
            }
            Op::Scale(c) => {
                let c = T::from_f64(*c);
                Ok(val(node.inputs[0]).map(|v| v * c))
            }
            Op::Matmul => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                matmul_forward(a, b)
            }
            Op::Transpose(ax0, ax1) => {
                let x = val(node.inputs[0]);
                transpose_tensor(x, *ax0, *ax1)
            }
            Op::Reshape(shape) => val(node.inputs[0]).reshaped(shape),
            Op::Concat(axis) => {
                let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|&v| val(v)).collect();
                concat_forward(&parts, *axis)
            }
            Op::Slice { axis, start, len } => slice_forward(val(node.inputs[0]), *axis, *start, *len),
            Op::Gather(ids) => {
                let table = val(node.inputs[0]);
                if table.rank() != 2 {
                    return Err(Error::shape(format!(
                        "gather: table must be rank 2, got {:?}",
                        table.shape()
                    )));
                }
                let (rows, width) = (table.shape()[0], table.shape()[1]);
                let mut out = Tensor::zeros(&[ids.len(), width]);
                let od = out.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    if id >= rows {
                        return Err(Error::TokenOutOfRange {
                            index: id,
                            size: rows,
                        });
                    }
                    od[r * width..(r + 1) * width]
                        .copy_from_slice(&table.data()[id * width..(id + 1) * width]);
                }
                Ok(out)
            }
            Op::Softmax => {
                let x = val(node.inputs[0]);
                if x.rank() == 0 {
                    return Err(Error::shape("softmax: rank-0 input"));
                }
                let width = *x.shape().last().unwrap();
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(width) {
                    kernels::softmax_row(row);
                }
                Ok(out)
            }
            Op::LayerNorm { eps } => {
                let (x, gamma, beta) = (val(node.inputs[0]), val(node.inputs[1]), val(node.inputs[2]));
                layernorm_forward(x, gamma, beta, *eps)
            }
            Op::Gelu => Ok(val(node.inputs[0]).map(gelu_scalar)),
            Op::SumAll => {
                let mut acc = T::ZERO;
                for &v in val(node.inputs[0]).data() {
                    acc += v;
                }
                Ok(Tensor::scalar(acc))
            }
            Op::MeanAll => {
                let x = val(node.inputs[0]);
                if x.numel() == 0 {
                    return Err(Error::shape("mean: empty tensor"));
                }
                let mut acc = T::ZERO;
                for &v in x.data() {
                    acc += v;
                }
                Ok(Tensor::scalar(acc / T::from_f64(x.numel() as f64)))
            }
            Op::CrossEntropy(targets) => {
                let logits = val(node.inputs[0]);
                if logits.rank() != 2 {
                    return Err(Error::shape(format!(
                        "cross_entropy: logits must be rank 2, got {:?}",
                        logits.shape()
                    )));
                }
                let (n, classes) = (logits.shape()[0], logits.shape()[1]);
                if targets.len() != n {
                    return Err(Error::shape(format!(
                        "cross_entropy: {n} rows but {} targets",
                        targets.len()
                    )));
                }
                let mut out = Tensor::zeros(&[n]);
                let od = out.data_mut();
                for i in 0..n {
                    let row = &logits.data()[i * classes..(i + 1) * classes];
                    let t = targets[i];
                    if t >= classes {
                        return Err(Error::TokenOutOfRange {
                            index: t,
                            size: classes,
                        });
                    }
                    od[i] = kernels::logsumexp_row(row) - row[t];
                }
                Ok(out)
            }
            Op::Detach => Ok(val(node.inputs[0]).clone()),
            Op::Patchify { patch } => patchify_forward(val(node.inputs[0]), *patch),
            Op::Unpatchify { patch, channels } => {
                unpatchify_forward(val(node.inputs[0]), *patch, *channels)
            }
        }
    }

    fn backward_node(&mut self, idx: usize) -> Result<()> {
        // Inputs always precede the node, so split the arena to borrow the
        // node immutably and its inputs mutably.
        let (head, tail) = self.nodes.split_at_mut(idx);
        let node = &tail[0];
        let out_grad = node.grad.as_ref().expect("checked by caller");
        let out_value = node.value.as_ref().expect("evaluated before backward");
        let inputs = node.inputs.clone();

        // Accumulate `contrib` into the grad buffer of `var` unless that
        // input does not track gradients.
        macro_rules! input_value {
            ($i:expr) => {
                head[inputs[$i].0].value.as_ref().expect("evaluated")
            };
        }
        let needs = |head: &[Node<T>], i: usize| head[inputs[i].0].needs_grad;
        fn acc<T: Scalar>(head: &mut [Node<T>], var: Var, f: impl FnOnce(&mut [T])) {
            let node = &mut head[var.0];
            if !node.needs_grad {
                return;
            }
            let n = node.value.as_ref().expect("evaluated").numel();
            let grad = node.grad.get_or_insert_with(|| vec![T::ZERO; n]);
            f(grad);
        }

        match &node.op {
            Op::Input(_) | Op::Leaf | Op::Detach => {}
            Op::Add => {
                let g = out_grad.clone();
                for &v in &inputs {
                    acc(head, v, |dst| {
                        for (d, &gv) in dst.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::AddBroadcast => {
                let g = out_grad.clone();
                let bn = input_value!(1).numel();
                acc(head, inputs[0], |dst| {
                    for (d, &gv) in dst.iter_mut().zip(&g) {
                        *d += gv;
                    }
                });
                acc(head, inputs[1], |dst| {
                    for (i, &gv) in g.iter().enumerate() {
                        dst[i % bn] += gv;
                    }
                });
            }
            Op::Mul => {
                let g = out_grad.clone();
                let a = input_value!(0).data().to_vec();
                let b = input_value!(1).data().to_vec();
                acc(head, inputs[0], |dst| {
                    for ((d, &gv), &bv) in dst.iter_mut().zip(&g).zip(&b) {
                        *d = gv.mul_add(bv, *d);
                    }
                });
                acc(head, inputs[1], |dst| {
                    for ((d, &gv), &av) in dst.iter_mut().zip(&g).zip(&a) {
                        *d = gv.mul_add(av, *d);
                    }
                });
            }
            Op::Scale(c) => {
                let c = T::from_f64(*c);
                let g = out_grad.clone();
                acc(head, inputs[0], |dst| {
                    for (d, &gv) in dst.iter_mut().zip(&g) {
                        *d = gv.mul_add(c, *d);
                    }
                });
            }
            Op::Matmul => {
                let g = out_grad.clone();
                let a = input_value!(0);
                let b = input_value!(1);
                let (da, db) = matmul_backward(a, b, &g, needs(head, 0), needs(head, 1));
                if let Some(da) = da {
                    acc(head, inputs[0], |dst| {
                        for (d, &v) in dst.iter_mut().zip(&da) {
                            *d += v;
                        }
                    });
                }
                if let Some(db) = db {
                    acc(head, inputs[1], |dst| {
                        for (d, &v) in dst.iter_mut().zip(&db) {
                            *d += v;
                        }
                    });
                }
            }
            Op::Transpose(ax0, ax1) => {
                // Transposing the gradient with the same axis pair maps it back.
                let g = Tensor::from_vec(out_value.shape(), out_grad.clone())?;
                let gt = transpose_tensor(&g, *ax0, *ax1)?;
                acc(head, inputs[0], |dst| {
                    for (d, &v) in dst.iter_mut().zip(gt.data()) {
                        *d += v;
                    }
                });
            }
            Op::Reshape(_) => {
                let g = out_grad.clone();
                acc(head, inputs[0], |dst| {
                    for (d, &v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                });
            }
            Op::Concat(axis) => {
                let axis = *axis;
                let out_shape = out_value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_axis = out_shape[axis];
                let g = out_grad.clone();
                let mut offset = 0usize;
                for (i, &v) in inputs.iter().enumerate() {
                    let part_axis = head[v.0].value.as_ref().expect("evaluated").shape()[axis];
                    let start = offset;
                    acc(head, inputs[i], |dst| {
                        for o in 0..outer {
                            for j in 0..part_axis {
                                let src = ((o * total_axis) + start + j) * inner;
                                let dst_off = (o * part_axis + j) * inner;
                                for k in 0..inner {
                                    dst[dst_off + k] += g[src + k];
                                }
                            }
                        }
                    });
                    offset += part_axis;
                }
            }
            Op::Slice { axis, start, len } => {
                let (axis, start, len) = (*axis, *start, *len);
                let in_shape = input_value!(0).shape().to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let total_axis = in_shape[axis];
                let g = out_grad.clone();
                acc(head, inputs[0], |dst| {
                    for o in 0..outer {
                        for j in 0..len {
                            let src = (o * len + j) * inner;
                            let dst_off = ((o * total_axis) + start + j) * inner;
                            for k in 0..inner {
                                dst[dst_off + k] += g[src + k];
                            }
                        }
                    }
                });
            }
            Op::Gather(ids) => {
                let ids = Arc::clone(ids);
                let width = out_value.shape()[1];
                let g = out_grad.clone();
                acc(head, inputs[0], |dst| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * width..(r + 1) * width];
                        let d = &mut dst[id * width..(id + 1) * width];
                        for (dv, &gv) in d.iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Softmax => {
                // dx = y * (g - sum(g * y)) per row.
                let width = *out_value.shape().last().unwrap();
                let y = out_value.data();
                let g = out_grad;
                let mut dx = vec![T::ZERO; y.len()];
                for r in 0..y.len() / width {
                    let ys = &y[r * width..(r + 1) * width];
                    let gs = &g[r * width..(r + 1) * width];
                    let mut dot = T::ZERO;
                    for (yv, gv) in ys.iter().zip(gs) {
                        dot += *yv * *gv;
                    }
                    for ((d, &yv), &gv) in dx[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(ys)
                        .zip(gs)
                    {
                        *d = yv * (gv - dot);
                    }
                }
                acc(head, inputs[0], |dst| {
                    for (d, &v) in dst.iter_mut().zip(&dx) {
                        *d += v;
                    }
                });
            }
            Op::LayerNorm { eps } => {
                let eps = *eps;
                let x = input_value!(0);
                let gamma = input_value!(1);
                let width = *x.shape().last().unwrap();
                let rows = x.numel() / width;
                let g = out_grad.clone();
                let inv_w = T::from_f64(1.0 / width as f64);
                let mut dx = vec![T::ZERO; x.numel()];
                let mut dgamma = vec![T::ZERO; width];
                let mut dbeta = vec![T::ZERO; width];
                for r in 0..rows {
                    let xs = &x.data()[r * width..(r + 1) * width];
                    let gs = &g[r * width..(r + 1) * width];
                    let mut mean = T::ZERO;
                    for &v in xs {
                        mean += v;
                    }
                    mean = mean * inv_w;
                    let mut var = T::ZERO;
                    for &v in xs {
                        let d = v - mean;
                        var = d.mul_add(d, var);
                    }
                    var = var * inv_w;
                    let rstd = T::ONE / (var + T::from_f64(eps)).sqrt();
                    // ghat = g * gamma; dx = rstd * (ghat - mean(ghat) - xhat * mean(ghat * xhat))
                    let mut mean_gh = T::ZERO;
                    let mut mean_ghx = T::ZERO;
                    for j in 0..width {
                        let xhat = (xs[j] - mean) * rstd;
                        let gh = gs[j] * gamma.data()[j];
                        mean_gh += gh;
                        mean_ghx = gh.mul_add(xhat, mean_ghx);
                        dgamma[j] = gs[j].mul_add(xhat, dgamma[j]);
                        dbeta[j] += gs[j];
                    }
                    mean_gh = mean_gh * inv_w;
                    mean_ghx = mean_ghx * inv_w;
                    for j in 0..width {
                        let xhat = (xs[j] - mean) * rstd;
                        let gh = gs[j] * gamma.data()[j];
                        dx[r * width + j] = rstd * (gh - mean_gh - xhat * mean_ghx);
                    }
                }
                acc(head, inputs[0], |dst| {
                    for (d, &v) in dst.iter_mut().zip(&dx) {
                        *d += v;
                    }
                });
                acc(head, inputs[1], |dst| {
                    for (d, &v) in dst.iter_mut().zip(&dgamma) {
                        *d += v;
                    }
                });
                acc(head, inputs[2], |dst| {
                    for (d, &v) in dst.iter_mut().zip(&dbeta) {
                        *d += v;
                    }
                });
            }
            Op::Gelu => {
                let x = input_value!(0).data().to_vec();
                let g = out_grad.clone();
                acc(head, inputs[0], |dst| {
                    for ((d, &gv), &xv) in dst.iter_mut().zip(&g).zip(&x) {
                        *d = gv.mul_add(gelu_grad_scalar(xv), *d);
                    }
                });
            }
            Op::SumAll => {
                let g = out_grad[0];
                acc(head, inputs[0], |dst| {
                    for d in dst.iter_mut() {
                        *d += g;
                    }
                });
            }
            Op::MeanAll => {
                let n = input_value!(0).numel();
                let g = out_grad[0] / T::from_f64(n as f64);
                acc(head, inputs[0], |dst| {
                    for d in dst.iter_mut() {
                        *d += g;
                    }
                });
            }
            Op::CrossEntropy(targets) => {
                let targets = Arc::clone(targets);
                let logits = input_value!(0);
                let (n, classes) = (logits.shape()[0], logits.shape()[1]);
                let g = out_grad.clone();
                let mut dl = vec![T::ZERO; logits.numel()];
                for i in 0..n {
                    let row = &logits.data()[i * classes..(i + 1) * classes];
                    let drow = &mut dl[i * classes..(i + 1) * classes];
                    drow.copy_from_slice(row);
                    kernels::softmax_row(drow);
                    drow[targets[i]] = drow[targets[i]] - T::ONE;
                    for d in drow.iter_mut() {
                        *d = *d * g[i];
                    }
                }
                acc(head, inputs[0], |dst| {
                    for (d, &v) in dst.iter_mut().zip(&dl) {
                        *d += v;
                    }
                });
            }
            Op::Patchify { patch } => {
                // Patchify is a permutation, so route the gradient through
                // the inverse permutation.
                let channels = *input_value!(0).shape().last().unwrap();
                let g = Tensor::from_vec(out_value.shape(), out_grad.clone())?;
                let back = unpatchify_forward(&g, *patch, channels)?;
                acc(head, inputs[0], |dst| {
                    for (d, &v) in dst.iter_mut().zip(back.data()) {
                        *d += v;
                    }
                });
            }
            Op::Unpatchify { patch, .. } => {
                let g = Tensor::from_vec(out_value.shape(), out_grad.clone())?;
                let back = patchify_forward(&g, *patch)?;
                acc(head, inputs[0], |dst| {
                    for (d, &v) in dst.iter_mut().zip(back.data()) {
                        *d += v;
                    }
                });
            }
        }
        Ok(())
    }
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::ONE + three * a * x * x);
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * du
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(Error::shape(format!(
                    "matmul: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut out = Tensor::zeros(&[m, n]);
            kernels::matmul_nn(a.data(), b.data(), out.data_mut(), m, k, n);
            Ok(out)
        }
        (3, 3) => {
            let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (bb, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            if ba != bb || k != k2 {
                return Err(Error::shape(format!(
                    "batched matmul: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut out = Tensor::zeros(&[ba, m, n]);
            let od = out.data_mut();
            for i in 0..ba {
                kernels::matmul_nn(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut od[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Ok(out)
        }
        _ => Err(Error::shape(format!(
            "matmul: unsupported ranks {:?} x {:?}",
            a.shape(),
            b.shape()
        ))),
    }
}

#[allow(clippy::type_complexity)]
fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &[T],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut scratch = Vec::new();
    if a.rank() == 2 {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let da = need_a.then(|| {
            let mut da = vec![T::ZERO; m * k];
            kernels::matmul_nt(g, b.data(), &mut da, &mut scratch, m, n, k);
            da
        });
        let db = need_b.then(|| {
            let mut db = vec![T::ZERO; k * n];
            kernels::matmul_tn(a.data(), g, &mut db, &mut scratch, m, k, n);
            db
        });
        (da, db)
    } else {
        let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let n = b.shape()[2];
        let da = need_a.then(|| {
            let mut da = vec![T::ZERO; bt * m * k];
            for i in 0..bt {
                kernels::matmul_nt(
                    &g[i * m * n..(i + 1) * m * n],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut da[i * m * k..(i + 1) * m * k],
                    &mut scratch,
                    m,
                    n,
                    k,
                );
            }
            da
        });
        let db = need_b.then(|| {
            let mut db = vec![T::ZERO; bt * k * n];
            for i in 0..bt {
                kernels::matmul_tn(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &g[i * m * n..(i + 1) * m * n],
                    &mut db[i * k * n..(i + 1) * k * n],
                    &mut scratch,
                    m,
                    k,
                    n,
                );
            }
            db
        });
        (da, db)
    }
}

fn transpose_tensor<T: Scalar>(x: &Tensor<T>, ax0: usize, ax1: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if ax1 >= shape.len() {
        return Err(Error::shape(format!(
            "transpose axes ({ax0}, {ax1}) out of range for {shape:?}"
        )));
    }
    if ax0 == ax1 {
        return Ok(x.clone());
    }
    // Collapse to the canonical five-block form (A, a, B, b, C) and swap a/b.
    let outer: usize = shape[..ax0].iter().product();
    let a = shape[ax0];
    let mid: usize = shape[ax0 + 1..ax1].iter().product();
    let b = shape[ax1];
    let inner: usize = shape[ax1 + 1..].iter().product();

    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let xd = x.data();
    for io in 0..outer {
        for ia in 0..a {
            for im in 0..mid {
                for ib in 0..b {
                    let src = ((((io * a) + ia) * mid + im) * b + ib) * inner;
                    let dst = ((((io * b) + ib) * mid + im) * a + ia) * inner;
                    od[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
                }
            }
        }
    }
    Ok(out)
}

fn concat_forward<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::shape(format!(
            "concat axis {axis} out of range for {:?}",
            first.shape()
        )));
    }
    let mut axis_total = 0usize;
    for p in parts {
        if p.rank() != first.rank() {
            return Err(Error::shape("concat: rank mismatch"));
        }
        for (d, (&a, &b)) in p.shape().iter().zip(first.shape()).enumerate() {
            if d != axis && a != b {
                return Err(Error::shape(format!(
                    "concat: shapes {:?} vs {:?} differ off-axis",
                    p.shape(),
                    first.shape()
                )));
            }
        }
        axis_total += p.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let mut offset = 0usize;
    for p in parts {
        let pa = p.shape()[axis];
        for o in 0..outer {
            let src = o * pa * inner;
            let dst = (o * axis_total + offset) * inner;
            od[dst..dst + pa * inner].copy_from_slice(&p.data()[src..src + pa * inner]);
        }
        offset += pa;
    }
    Ok(out)
}

fn slice_forward<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::shape(format!(
            "slice [{start}..{}) on axis {axis} of {shape:?}",
            start + len
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total_axis = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    for o in 0..outer {
        let src = (o * total_axis + start) * inner;
        let dst = o * len * inner;
        od[dst..dst + len * inner].copy_from_slice(&x.data()[src..src + len * inner]);
    }
    Ok(out)
}

fn layernorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if x.rank() == 0 {
        return Err(Error::shape("layernorm: rank-0 input"));
    }
    let width = *x.shape().last().unwrap();
    if gamma.shape() != [width] || beta.shape() != [width] {
        return Err(Error::shape(format!(
            "layernorm: gain/bias must be [{width}], got {:?} / {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let inv_w = T::from_f64(1.0 / width as f64);
    let eps = T::from_f64(eps);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(width) {
        let mut mean = T::ZERO;
        for &v in row.iter() {
            mean += v;
        }
        mean = mean * inv_w;
        let mut var = T::ZERO;
        for &v in row.iter() {
            let d = v - mean;
            var = d.mul_add(d, var);
        }
        var = var * inv_w;
        let rstd = T::ONE / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

fn patchify_forward<T: Scalar>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "patchify: expected (B, H, W, C), got {:?}",
            x.shape()
        )));
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "patchify: {h}x{w} image not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Tensor::zeros(&[b, gh, gw, patch * patch * c]);
    let od = out.data_mut();
    let xd = x.data();
    let in_strides = strides_of(x.shape());
    let mut dst = 0usize;
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let src = bi * in_strides[0]
                        + (gy * patch + py) * in_strides[1]
                        + gx * patch * in_strides[2];
                    od[dst..dst + patch * c].copy_from_slice(&xd[src..src + patch * c]);
                    dst += patch * c;
                }
            }
        }
    }
    Ok(out)
}

fn unpatchify_forward<T: Scalar>(x: &Tensor<T>, patch: usize, channels: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "unpatchify: expected (B, gh, gw, p*p*C), got {:?}",
            x.shape()
        )));
    }
    let (b, gh, gw, pc) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if pc != patch * patch * channels {
        return Err(Error::shape(format!(
            "unpatchify: last dim {pc} != {patch}*{patch}*{channels}"
        )));
    }
    let (h, w) = (gh * patch, gw * patch);
    let mut out = Tensor::zeros(&[b, h, w, channels]);
    let out_strides = strides_of(&[b, h, w, channels]);
    let od = out.data_mut();
    let xd = x.data();
    let mut src = 0usize;
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let dst = bi * out_strides[0]
                        + (gy * patch + py) * out_strides[1]
                        + gx * patch * out_strides[2];
                    od[dst..dst + patch * channels]
                        .copy_from_slice(&xd[src..src + patch * channels]);
                    src += patch * channels;
                }
            }
        }
    }
    Ok(out)
}
