use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it, and only until that tape is cleared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    pub(crate) fn apply<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, relu: bool, cols: Vec<T>, geom: ConvGeom },
    Relu(Var),
    ChannelMean(Var),
    ChannelStd(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    L2Normalize { x: Var, eps: T },
    LogSumExp(Var),
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale(Var, T),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gather { x: Var, index: Vec<usize> },
    SliceRows { x: Var, start: usize },
    ChannelAffine { x: Var, scale: Var, shift: Var },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
            Op::MatMul(a, b) | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Relu(x)
            | Op::ChannelMean(x)
            | Op::ChannelStd(x)
            | Op::LogSumExp(x)
            | Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::L2Normalize { x, .. }
            | Op::Gather { x, .. }
            | Op::SliceRows { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in execution order, so the node list is always in
/// topological order. [`Tape::backward`] walks it in reverse and then
/// clears it.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves that required them, keyed by their [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Records `tensor` as a leaf; it receives a gradient iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn get(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a single-element `loss`. Returns gradients for
    /// every leaf that requires one (zeros when `loss` does not depend on
    /// it) and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::usage("backward called on an empty tape"));
        }
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::usage(format!("loss handle {} is not on this tape", loss.0)))?;
        if root.value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.local_grads(i, &g) {
                accumulate(&mut grads[input.0], contribution);
            }
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    Some(Tensor::new(node.value.shape(), data).expect("gradient matches value shape"))
                }
                _ => None,
            })
            .collect();
        self.nodes.clear();
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products of node `i` for each input requiring grad.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, relu, cols, geom } => {
                let masked: Vec<T>;
                let g = if *relu {
                    masked = node.value.data().iter().zip(g).map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() }).collect();
                    &masked
                } else {
                    g
                };
                let (dx, dw, db) = kernels::conv2d_backward(val(*w).data(), cols, geom, g, self.needs(*x));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::Relu(x) => {
                let d = val(*x).data().iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() });
                out.push((*x, d.collect()));
            }
            Op::ChannelMean(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let d = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, hw));
                out.push((*x, d.collect()));
            }
            Op::ChannelStd(x) => {
                out.push((*x, kernels::channel_std_backward(val(*x), node.value.data(), g)));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let mut da = vec![T::zero(); m * k];
                super::gemm(m, n, k, g, false, val(*b).data(), true, &mut da, false);
                let mut db = vec![T::zero(); k * n];
                super::gemm(k, m, n, val(*a).data(), true, g, false, &mut db, false);
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (val(*x).shape()[0], val(*x).shape()[1]);
                let fout = val(*w).shape()[0];
                let mut dx = vec![T::zero(); n * fin];
                super::gemm(n, fout, fin, g, false, val(*w).data(), false, &mut dx, false);
                let mut dw = vec![T::zero(); fout * fin];
                super::gemm(fout, n, fin, g, true, val(*x).data(), false, &mut dw, false);
                let mut db = vec![T::zero(); fout];
                for row in g.chunks(fout) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d = *d + gv;
                    }
                }
                out.push((*x, dx));
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::L2Normalize { x, eps } => {
                out.push((*x, kernels::l2_normalize_backward(val(*x), &node.value, g, *eps)));
            }
            Op::LogSumExp(x) => {
                out.push((*x, kernels::log_sum_exp_backward(val(*x), node.value.data(), g)));
            }
            Op::Binary { kind, a, b } => {
                let (da, db) = match kind {
                    BinaryKind::Add => kernels::binary_backward(val(*a), val(*b), g, |_, _| T::one(), |_, _| T::one()),
                    BinaryKind::Sub => {
                        kernels::binary_backward(val(*a), val(*b), g, |_, _| T::one(), |_, _| -T::one())
                    }
                    BinaryKind::Mul => kernels::binary_backward(val(*a), val(*b), g, |_, y| y, |x, _| x),
                    BinaryKind::Div => {
                        kernels::binary_backward(val(*a), val(*b), g, |_, y| T::one() / y, |x, y| -x / (y * y))
                    }
                };
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).numel()])),
            Op::Mean(x) => {
                let n = val(*x).numel();
                out.push((*x, vec![g[0] / T::from_usize(n).unwrap(); n]));
            }
            Op::Gather { x, index } => {
                let k = val(*x).shape()[1];
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (r, &j) in index.iter().enumerate() {
                    dx[r * k + j] = g[r];
                }
                out.push((*x, dx));
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let per = xv.numel() / xv.shape()[0];
                let mut dx = vec![T::zero(); xv.numel()];
                dx[start * per..start * per + g.len()].copy_from_slice(g);
                out.push((*x, dx));
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (dx, dscale, dshift) = kernels::channel_affine_backward(val(*x), val(*scale).data(), g);
                out.push((*x, dx));
                out.push((*scale, dscale));
                out.push((*shift, dshift));
            }
        }
        out.retain(|(v, _)| self.needs(*v));
        out
    }

    pub(crate) fn record_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        relu: bool,
    ) -> Result<Var> {
        let (value, cols, geom) = kernels::conv2d_keep(self.get(x), self.get(w), self.get(b), stride, padding, relu)?;
        Ok(self.record(value, Op::Conv2d { x, w, b, relu, cols, geom }))
    }

    pub(crate) fn record_relu(&mut self, x: Var) -> Var {
        let value = kernels::relu(self.get(x));
        self.record(value, Op::Relu(x))
    }

    pub(crate) fn record_channel_mean(&mut self, x: Var) -> Result<Var> {
        let value = kernels::channel_mean(self.get(x))?;
        Ok(self.record(value, Op::ChannelMean(x)))
    }

    pub(crate) fn record_channel_std(&mut self, x: Var, eps: T) -> Result<Var> {
        let value = kernels::channel_std(self.get(x), eps)?;
        Ok(self.record(value, Op::ChannelStd(x)))
    }

    pub(crate) fn record_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.get(a), self.get(b))?;
        Ok(self.record(value, Op::MatMul(a, b)))
    }

    pub(crate) fn record_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = kernels::linear(self.get(x), self.get(w), self.get(b))?;
        Ok(self.record(value, Op::Linear { x, w, b }))
    }

    pub(crate) fn record_l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let value = kernels::l2_normalize(self.get(x), eps)?;
        Ok(self.record(value, Op::L2Normalize { x, eps }))
    }

    pub(crate) fn record_log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let value = kernels::log_sum_exp(self.get(x))?;
        Ok(self.record(value, Op::LogSumExp(x)))
    }

    pub(crate) fn record_binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let value = kernels::binary(self.get(a), self.get(b), |x, y| kind.apply(x, y))?;
        Ok(self.record(value, Op::Binary { kind, a, b }))
    }

    pub(crate) fn record_scale(&mut self, x: Var, c: T) -> Var {
        let value = kernels::scale(self.get(x), c);
        self.record(value, Op::Scale(x, c))
    }

    pub(crate) fn record_reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.get(x).clone().reshape(shape)?;
        Ok(self.record(value, Op::Reshape(x)))
    }

    pub(crate) fn record_sum(&mut self, x: Var) -> Var {
        let value = kernels::sum(self.get(x));
        self.record(value, Op::Sum(x))
    }

    pub(crate) fn record_mean(&mut self, x: Var) -> Var {
        let value = kernels::mean(self.get(x));
        self.record(value, Op::Mean(x))
    }

    pub(crate) fn record_gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let value = kernels::gather_rows(self.get(x), index)?;
        Ok(self.record(value, Op::Gather { x, index: index.to_vec() }))
    }

    pub(crate) fn record_channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let value = kernels::channel_affine(self.get(x), self.get(scale), self.get(shift))?;
        Ok(self.record(value, Op::ChannelAffine { x, scale, shift }))
    }

    pub(crate) fn record_slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = kernels::slice_rows(self.get(x), start, end)?;
        Ok(self.record(value, Op::SliceRows { x, start }))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a = *a + c),
        None => *slot = Some(contribution),
    }
}
