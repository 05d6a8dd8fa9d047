use std::sync::Arc;

use super::kernels::{
    axis_split, broadcast_shape, broadcast_strides, for_each_broadcast, gemm, MatRef,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d { input: Var, weight: Var },
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    MeanAxis { input: Var, axis: usize },
    VarianceAxis { input: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Log(Var),
    Exp(Var),
    Pow(Var, f64),
    Sqrt(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    CosineSimilarity(Var, Var),
    SoftmaxCrossEntropy { logits: Var, label: usize },
    Frames { input: Var, shift: usize, first: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. A tape belongs to one training step; build a new one
/// (or call [`Tape::clear`]) for the next.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `tensor`'s gradient buffer.
    ///
    /// A leaf that the loss does not reach contributes zeros.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.len()]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.push_shared(shape, Arc::new(value), op, requires_grad)
    }

    fn push_shared(
        &mut self,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Binds a tensor as a leaf; it participates in gradients iff the tensor is trainable.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let op = if t.is_trainable() { Op::Leaf } else { Op::Constant };
        self.push(t.shape().to_vec(), t.data().to_vec(), op, t.is_trainable())
    }

    /// Binds a tensor's values as a constant regardless of its trainable flag.
    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Constant, false)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        check_len("constant", &shape, data.len())?;
        Ok(self.push(shape, data, Op::Constant, false))
    }

    /// Constant backed by shared storage; no copy is made.
    pub fn constant_shared(&mut self, shape: Vec<usize>, data: Arc<Vec<f64>>) -> Result<Var> {
        check_len("constant", &shape, data.len())?;
        Ok(self.push_shared(shape, data, Op::Constant, false))
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(vec![n], data, Op::Constant, false)
    }

    /// A trainable leaf created directly from values.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        check_len("param", &shape, data.len())?;
        Ok(self.push(shape, data, Op::Leaf, true))
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (shape, value) = (n.shape.clone(), Arc::clone(&n.value));
        self.push_shared(shape, value, Op::Constant, false)
    }

    /// Per-element mask of which entries of a 1-D value can carry gradient.
    ///
    /// Exact through 1-D concatenations; any other gradient-carrying node is
    /// reported as fully supported.
    pub fn grad_support(&self, v: Var) -> Vec<bool> {
        let n = self.node(v);
        if !n.requires_grad {
            return vec![false; n.value.len()];
        }
        match &n.op {
            Op::Concat { inputs, axis: 0 } if n.shape.len() == 1 => {
                inputs.iter().flat_map(|&i| self.grad_support(i)).collect()
            }
            Op::Reshape(inner) if self.node(*inner).shape.len() == 1 => self.grad_support(*inner),
            _ => vec![true; n.value.len()],
        }
    }

    // ---- elementwise binary ops with broadcasting ----

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let out_shape = broadcast_shape(&na.shape, &nb.shape).ok_or_else(|| {
            Error::ShapeMismatch {
                op: name,
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            }
        })?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (av, bv) = (&na.value, &nb.value);
        let value: Vec<f64> = if na.shape == nb.shape {
            av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let total = out_shape.iter().product();
            let mut out = vec![0.0; total];
            let sa = broadcast_strides(&na.shape, &out_shape);
            let sb = broadcast_strides(&nb.shape, &out_shape);
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(out_shape, value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = self.node(x);
        let value = n.value.iter().map(|&v| f(v)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Pow(x, p), |v| v.powf(p))
    }

    /// Square root; the derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::ClampMin(x, floor), |v| v.max(floor))
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.node(x);
        check_len("reshape", &shape, n.value.len())?;
        let (value, rg) = (Arc::clone(&n.value), n.requires_grad);
        Ok(self.push_shared(shape, value, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        let [r, c] = dims2("transpose", &n.shape)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = n.value[i * c + j];
            }
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.node(first).shape.clone();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = &self.node(v).shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.node(v);
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.node(v).requires_grad);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let n = self.node(x);
        if axis >= n.shape.len() || start + len > n.shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{} on axis {axis} out of bounds for shape {:?}",
                    start + len,
                    n.shape
                ),
            ));
        }
        let (outer, alen, inner) = axis_split(&n.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&n.value[base..base + len * inner]);
        }
        let mut shape = n.shape.clone();
        shape[axis] = len;
        let rg = n.requires_grad;
        Ok(self.push(shape, out, Op::Slice { input: x, axis, start }, rg))
    }

    /// Overlapping frames of a 1-D signal: row `f` holds samples
    /// `(first + f) * shift .. (first + f) * shift + frame_len`.
    pub fn frames(
        &mut self,
        x: Var,
        frame_len: usize,
        shift: usize,
        first: usize,
        count: usize,
    ) -> Result<Var> {
        let n = self.node(x);
        if n.shape.len() != 1 || frame_len == 0 || shift == 0 {
            return Err(Error::invalid(
                "frames",
                format!("need a 1-D signal and positive geometry, got shape {:?}", n.shape),
            ));
        }
        if count > 0 && (first + count - 1) * shift + frame_len > n.shape[0] {
            return Err(Error::invalid(
                "frames",
                format!(
                    "frames {first}..{} exceed signal of length {}",
                    first + count,
                    n.shape[0]
                ),
            ));
        }
        let mut out = Vec::with_capacity(count * frame_len);
        for f in 0..count {
            let s = (first + f) * shift;
            out.extend_from_slice(&n.value[s..s + frame_len]);
        }
        let rg = n.requires_grad;
        Ok(self.push(
            vec![count, frame_len],
            out,
            Op::Frames {
                input: x,
                shift,
                first,
            },
            rg,
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let [m, k] = dims2("matmul", &na.shape)?;
        let [k2, n] = dims2("matmul", &nb.shape)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(&na.value, m, k), MatRef::new(&nb.value, k, n), 0.0, &mut out);
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Valid (unpadded, stride 1) 1-D convolution: `[c_in, t] * [c_out, c_in, k] -> [c_out, t - k + 1]`.
    pub fn conv1d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (ni, nw) = (self.node(input), self.node(weight));
        let [c_in, t] = dims2("conv1d", &ni.shape)?;
        let mismatch = || Error::ShapeMismatch {
            op: "conv1d",
            lhs: ni.shape.clone(),
            rhs: nw.shape.clone(),
        };
        if nw.shape.len() != 3 || nw.shape[1] != c_in || nw.shape[2] == 0 || nw.shape[2] > t {
            return Err(mismatch());
        }
        let (c_out, k) = (nw.shape[0], nw.shape[2]);
        let t_out = t - k + 1;
        let cols = im2col(&ni.value, c_in, t, k);
        let mut out = vec![0.0; c_out * t_out];
        gemm(
            MatRef::new(&nw.value, c_out, c_in * k),
            MatRef::new(&cols, c_in * k, t_out),
            0.0,
            &mut out,
        );
        let rg = ni.requires_grad || nw.requires_grad;
        Ok(self.push(vec![c_out, t_out], out, Op::Conv1d { input, weight }, rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let s = n.value.iter().sum();
        let rg = n.requires_grad;
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let rg = n.requires_grad;
        self.push(vec![], vec![s], Op::Mean(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, name: &'static str) -> Result<(Vec<usize>, Vec<f64>, usize, usize, usize)> {
        let n = self.node(x);
        if axis >= n.shape.len() || n.shape[axis] == 0 {
            return Err(Error::invalid(
                name,
                format!("cannot reduce axis {axis} of shape {:?}", n.shape),
            ));
        }
        let (outer, len, inner) = axis_split(&n.shape, axis);
        let mut sums = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &n.value[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (s, v) in sums[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
        let mut shape = n.shape.clone();
        shape.remove(axis);
        Ok((shape, sums, outer, len, inner))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, sums, ..) = self.reduce_axis(x, axis, "sum_axis")?;
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, sums, Op::SumAxis { input: x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, mut sums, _, len, _) = self.reduce_axis(x, axis, "mean_axis")?;
        sums.iter_mut().for_each(|s| *s /= len as f64);
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, sums, Op::MeanAxis { input: x, axis }, rg))
    }

    /// Population variance over one axis, removing it.
    pub fn variance_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, mut means, outer, len, inner) = self.reduce_axis(x, axis, "variance_axis")?;
        means.iter_mut().for_each(|s| *s /= len as f64);
        let xv = &self.node(x).value;
        let mut var = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let d = xv[(o * len + l) * inner + i] - means[o * inner + i];
                    var[o * inner + i] += d * d;
                }
            }
        }
        var.iter_mut().for_each(|s| *s /= len as f64);
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, var, Op::VarianceAxis { input: x, axis }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        let last = *n
            .shape
            .last()
            .ok_or_else(|| Error::invalid("softmax", "scalar input"))?;
        let mut out = n.value.to_vec();
        if last > 0 {
            out.chunks_mut(last).for_each(softmax_in_place);
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.value.len() != nb.value.len() {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let (dot, qa, qb) = dot_norms(&na.value, &nb.value);
        if qa == 0.0 || qb == 0.0 {
            return Err(Error::ZeroNorm("cosine_similarity"));
        }
        let c = dot / (qa.sqrt() * qb.sqrt());
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(vec![], vec![c], Op::CosineSimilarity(a, b), rg))
    }

    /// `logsumexp(logits) - logits[label]` for a 1-D logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let n = self.node(logits);
        if n.shape.len() != 1 {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("expected 1-D logits, got {:?}", n.shape),
            ));
        }
        if label >= n.shape[0] {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {label} out of range for {} classes", n.shape[0]),
            ));
        }
        let loss = log_sum_exp(&n.value) - n.value[label];
        let rg = n.requires_grad;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, label },
            rg,
        ))
    }

    // ---- reverse pass ----

    /// Reverse-mode sweep from a scalar `loss`. Every recorded op is visited at
    /// most once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let n = self.node(v);
        if !n.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary(kind, a, b) => self.backprop_binary(*kind, *a, *b, &node.shape, g, grads),
            Op::Scale(x, c) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::MatMul(a, b) => {
                let (na, nb) = (self.node(*a), self.node(*b));
                let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
                let gm = MatRef::new(g, m, n);
                let bv = Arc::clone(&nb.value);
                let av = Arc::clone(&na.value);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    gemm(gm, MatRef::new(&bv, k, n).t(), 1.0, ga);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    gemm(MatRef::new(&av, m, k).t(), gm, 1.0, gb);
                }
            }
            Op::Transpose(x) => {
                let [r, c] = [self.node(*x).shape[0], self.node(*x).shape[1]];
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Conv1d { input, weight } => {
                let (ni, nw) = (self.node(*input), self.node(*weight));
                let (c_in, t) = (ni.shape[0], ni.shape[1]);
                let (c_out, k) = (nw.shape[0], nw.shape[2]);
                let t_out = t - k + 1;
                let gm = MatRef::new(g, c_out, t_out);
                let wv = Arc::clone(&nw.value);
                if nw.requires_grad {
                    let cols = im2col(&ni.value, c_in, t, k);
                    let gw = self.grad_buf(grads, *weight).expect("weight requires grad");
                    gemm(gm, MatRef::new(&cols, c_in * k, t_out).t(), 1.0, gw);
                }
                if let Some(gx) = self.grad_buf(grads, *input) {
                    let mut gcols = vec![0.0; c_in * k * t_out];
                    gemm(MatRef::new(&wv, c_out, c_in * k).t(), gm, 0.0, &mut gcols);
                    col2im_add(&gcols, c_in, t, k, gx);
                }
            }
            Op::Relu(x) => {
                let xv = Arc::clone(&self.node(*x).value);
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((d, v), xi) in gx.iter_mut().zip(g).zip(xv.iter()) {
                        if *xi > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.grad_buf(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let (outer, len, inner) = axis_split(&self.node(*input).shape, *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                if let Some(gx) = self.grad_buf(grads, *input) {
                    for o in 0..outer {
                        for l in 0..len {
                            for ii in 0..inner {
                                gx[(o * len + l) * inner + ii] += scale * g[o * inner + ii];
                            }
                        }
                    }
                }
            }
            Op::VarianceAxis { input, axis } => {
                let ni = self.node(*input);
                let (outer, len, inner) = axis_split(&ni.shape, *axis);
                let xv = Arc::clone(&ni.value);
                let mut means = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for ii in 0..inner {
                            means[o * inner + ii] += xv[(o * len + l) * inner + ii];
                        }
                    }
                }
                means.iter_mut().for_each(|m| *m /= len as f64);
                if let Some(gx) = self.grad_buf(grads, *input) {
                    let s = 2.0 / len as f64;
                    for o in 0..outer {
                        for l in 0..len {
                            for ii in 0..inner {
                                let j = (o * len + l) * inner + ii;
                                gx[j] += s * (xv[j] - means[o * inner + ii]) * g[o * inner + ii];
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.node(v).shape[*axis];
                    if let Some(gv) = self.grad_buf(grads, v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gv[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, alen, inner) = axis_split(&self.node(*input).shape, *axis);
                let len = node.shape[*axis];
                if let Some(gx) = self.grad_buf(grads, *input) {
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        let dst = &mut gx[base..base + len * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Frames { input, shift, first } => {
                let (count, frame_len) = (node.shape[0], node.shape[1]);
                if let Some(gx) = self.grad_buf(grads, *input) {
                    for f in 0..count {
                        let s = (first + f) * shift;
                        let src = &g[f * frame_len..(f + 1) * frame_len];
                        gx[s..s + frame_len].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Log(x) => self.backprop_elementwise(*x, g, grads, |xi, _| 1.0 / xi, out),
            Op::Exp(x) => self.backprop_elementwise(*x, g, grads, |_, yi| yi, out),
            Op::Pow(x, p) => {
                let p = *p;
                self.backprop_elementwise(*x, g, grads, |xi, _| p * xi.powf(p - 1.0), out)
            }
            Op::Sqrt(x) => self.backprop_elementwise(
                *x,
                g,
                grads,
                |_, yi| if yi > 0.0 { 0.5 / yi } else { 0.0 },
                out,
            ),
            Op::ClampMin(x, floor) => {
                let floor = *floor;
                self.backprop_elementwise(*x, g, grads, |xi, _| if xi > floor { 1.0 } else { 0.0 }, out)
            }
            Op::Softmax(x) => {
                let last = *node.shape.last().unwrap();
                if let Some(gx) = self.grad_buf(grads, *x) {
                    for ((y, gr), dx) in out
                        .chunks(last)
                        .zip(g.chunks(last))
                        .zip(gx.chunks_mut(last))
                    {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..last {
                            dx[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CosineSimilarity(a, b) => {
                let av = Arc::clone(&self.node(*a).value);
                let bv = Arc::clone(&self.node(*b).value);
                let (_, qa, qb) = dot_norms(&av, &bv);
                let (na, nb) = (qa.sqrt(), qb.sqrt());
                let c = out[0];
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for j in 0..ga.len() {
                        ga[j] += g[0] * (bv[j] / (na * nb) - c * av[j] / qa);
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for j in 0..gb.len() {
                        gb[j] += g[0] * (av[j] / (na * nb) - c * bv[j] / qb);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                let mut p = self.node(*logits).value.to_vec();
                softmax_in_place(&mut p);
                if let Some(gx) = self.grad_buf(grads, *logits) {
                    for (j, (d, pj)) in gx.iter_mut().zip(&p).enumerate() {
                        let onehot = if j == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (pj - onehot);
                    }
                }
            }
        }
    }

    fn backprop_elementwise(
        &self,
        x: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        deriv: impl Fn(f64, f64) -> f64,
        out: &[f64],
    ) {
        let xv = Arc::clone(&self.node(x).value);
        if let Some(gx) = self.grad_buf(grads, x) {
            for j in 0..gx.len() {
                gx[j] += g[j] * deriv(xv[j], out[j]);
            }
        }
    }

    fn backprop_binary(
        &self,
        kind: Binary,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (na, nb) = (self.node(a), self.node(b));
        let av = Arc::clone(&na.value);
        let bv = Arc::clone(&nb.value);
        let sa = broadcast_strides(&na.shape, out_shape);
        let sb = broadcast_strides(&nb.shape, out_shape);
        let da = |_ia: usize, ib: usize, gi: f64| match kind {
            Binary::Add | Binary::Sub => gi,
            Binary::Mul => gi * bv[ib],
            Binary::Div => gi / bv[ib],
        };
        let db = |ia: usize, ib: usize, gi: f64| match kind {
            Binary::Add => gi,
            Binary::Sub => -gi,
            Binary::Mul => gi * av[ia],
            Binary::Div => -gi * av[ia] / (bv[ib] * bv[ib]),
        };
        if let Some(ga) = self.grad_buf(grads, a) {
            for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| ga[ia] += da(ia, ib, g[o]));
        }
        if let Some(gb) = self.grad_buf(grads, b) {
            for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| gb[ib] += db(ia, ib, g[o]));
        }
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::invalid(
            op,
            format!("shape {shape:?} needs {expected} elements, got {len}"),
        ));
    }
    Ok(())
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<[usize; 2]> {
    match shape {
        [r, c] => Ok([*r, *c]),
        _ => Err(Error::invalid(op, format!("expected a 2-D operand, got {shape:?}"))),
    }
}

fn im2col(x: &[f64], c_in: usize, t: usize, k: usize) -> Vec<f64> {
    let t_out = t - k + 1;
    let mut cols = vec![0.0; c_in * k * t_out];
    for c in 0..c_in {
        for j in 0..k {
            let row = (c * k + j) * t_out;
            cols[row..row + t_out].copy_from_slice(&x[c * t + j..c * t + j + t_out]);
        }
    }
    cols
}

fn col2im_add(cols: &[f64], c_in: usize, t: usize, k: usize, gx: &mut [f64]) {
    let t_out = t - k + 1;
    for c in 0..c_in {
        for j in 0..k {
            let row = &cols[(c * k + j) * t_out..(c * k + j + 1) * t_out];
            gx[c * t + j..c * t + j + t_out]
                .iter_mut()
                .zip(row)
                .for_each(|(d, v)| *d += v);
        }
    }
}

fn dot_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    a.iter().zip(b).fold((0.0, 0.0, 0.0), |(d, qa, qb), (x, y)| {
        (d + x * y, qa + x * x, qb + y * y)
    })
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
