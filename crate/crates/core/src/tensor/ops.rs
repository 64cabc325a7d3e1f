use super::kernels;
use super::tape::BinaryKind;
use super::{Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Differentiable operator set shared by recorded and eager execution.
///
/// Model code is written once against this trait and run either on a
/// [`Tape`] (training forward pass) or on [`Eager`] (inference and the
/// un-recorded second forward pass).
pub trait Ops<T: Scalar> {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;
    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor<T>) -> Self::Var;
    /// A trainable parameter; gradients are tracked when recording.
    fn param(&mut self, t: &Tensor<T>) -> Self::Var;

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var, stride: usize, padding: usize)
        -> Result<Self::Var>;
    /// `relu(conv2d(..))` in one pass.
    fn conv2d_relu(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var, stride: usize, padding: usize)
        -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn global_avg_pool(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn channel_mean(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn channel_std(&mut self, x: &Self::Var, eps: T) -> Result<Self::Var>;
    /// `x[b, c] · scale[b, c] + shift[b, c]` with `[B, C]` coefficients.
    fn channel_affine(&mut self, x: &Self::Var, scale: &Self::Var, shift: &Self::Var) -> Result<Self::Var>;
    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn linear(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn l2_normalize(&mut self, x: &Self::Var, eps: T) -> Result<Self::Var>;
    fn log_sum_exp(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn div(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, x: &Self::Var, c: T) -> Self::Var;
    fn reshape(&mut self, x: &Self::Var, shape: &[usize]) -> Result<Self::Var>;
    fn sum(&mut self, x: &Self::Var) -> Self::Var;
    fn mean(&mut self, x: &Self::Var) -> Self::Var;
    fn gather_rows(&mut self, x: &Self::Var, index: &[usize]) -> Result<Self::Var>;
    /// Rows `start..end` along the leading axis.
    fn slice_rows(&mut self, x: &Self::Var, start: usize, end: usize) -> Result<Self::Var>;

    /// Per-channel `(mean, sqrt(var + eps))`, both `[B, C]`.
    fn channel_stats(&mut self, x: &Self::Var, eps: T) -> Result<(Self::Var, Self::Var)> {
        Ok((self.channel_mean(x)?, self.channel_std(x, eps)?))
    }
}

impl<T: Scalar> Ops<T> for Tape<T> {
    type Var = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.get(*v)
    }

    fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut t = t.clone();
        t.requires_grad = true;
        t.grad = None;
        self.leaf(t)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, padding: usize) -> Result<Var> {
        Tape::record_conv2d(self, *x, *w, *b, stride, padding, false)
    }

    fn conv2d_relu(&mut self, x: &Var, w: &Var, b: &Var, stride: usize, padding: usize) -> Result<Var> {
        Tape::record_conv2d(self, *x, *w, *b, stride, padding, true)
    }

    fn relu(&mut self, x: &Var) -> Var {
        Tape::record_relu(self, *x)
    }

    fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        Tape::record_channel_mean(self, *x)
    }

    fn channel_mean(&mut self, x: &Var) -> Result<Var> {
        Tape::record_channel_mean(self, *x)
    }

    fn channel_std(&mut self, x: &Var, eps: T) -> Result<Var> {
        Tape::record_channel_std(self, *x, eps)
    }

    fn channel_affine(&mut self, x: &Var, scale: &Var, shift: &Var) -> Result<Var> {
        Tape::record_channel_affine(self, *x, *scale, *shift)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::record_matmul(self, *a, *b)
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        Tape::record_linear(self, *x, *w, *b)
    }

    fn l2_normalize(&mut self, x: &Var, eps: T) -> Result<Var> {
        Tape::record_l2_normalize(self, *x, eps)
    }

    fn log_sum_exp(&mut self, x: &Var) -> Result<Var> {
        Tape::record_log_sum_exp(self, *x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record_binary(BinaryKind::Add, *a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record_binary(BinaryKind::Sub, *a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record_binary(BinaryKind::Mul, *a, *b)
    }

    fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.record_binary(BinaryKind::Div, *a, *b)
    }

    fn scale(&mut self, x: &Var, c: T) -> Var {
        Tape::record_scale(self, *x, c)
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        Tape::record_reshape(self, *x, shape)
    }

    fn sum(&mut self, x: &Var) -> Var {
        Tape::record_sum(self, *x)
    }

    fn mean(&mut self, x: &Var) -> Var {
        Tape::record_mean(self, *x)
    }

    fn gather_rows(&mut self, x: &Var, index: &[usize]) -> Result<Var> {
        Tape::record_gather_rows(self, *x, index)
    }

    fn slice_rows(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        Tape::record_slice_rows(self, *x, start, end)
    }
}

/// Executes operations immediately without recording anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Scalar> Ops<T> for Eager {
    type Var = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn param(&mut self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }

    fn conv2d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        kernels::conv2d(x, w, b, stride, padding, false).map(|(out, _)| out)
    }

    fn conv2d_relu(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        kernels::conv2d(x, w, b, stride, padding, true).map(|(out, _)| out)
    }

    fn relu(&mut self, x: &Tensor<T>) -> Tensor<T> {
        kernels::relu(x)
    }

    fn global_avg_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::global_avg_pool(x)
    }

    fn channel_mean(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::channel_mean(x)
    }

    fn channel_std(&mut self, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        kernels::channel_std(x, eps)
    }

    fn channel_affine(&mut self, x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::channel_affine(x, scale, shift)
    }

    fn channel_stats(&mut self, x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Tensor<T>)> {
        kernels::channel_stats(x, eps)
    }

    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::matmul(a, b)
    }

    fn linear(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::linear(x, w, b)
    }

    fn l2_normalize(&mut self, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        kernels::l2_normalize(x, eps)
    }

    fn log_sum_exp(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::log_sum_exp(x)
    }

    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::binary(a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::binary(a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::binary(a, b, |x, y| x * y)
    }

    fn div(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        kernels::binary(a, b, |x, y| x / y)
    }

    fn scale(&mut self, x: &Tensor<T>, c: T) -> Tensor<T> {
        kernels::scale(x, c)
    }

    fn reshape(&mut self, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        x.clone().reshape(shape)
    }

    fn sum(&mut self, x: &Tensor<T>) -> Tensor<T> {
        kernels::sum(x)
    }

    fn mean(&mut self, x: &Tensor<T>) -> Tensor<T> {
        kernels::mean(x)
    }

    fn gather_rows(&mut self, x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
        kernels::gather_rows(x, index)
    }

    fn slice_rows(&mut self, x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
        kernels::slice_rows(x, start, end)
    }
}
