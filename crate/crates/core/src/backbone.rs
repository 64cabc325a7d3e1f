//! Small staged CNN feature extractor.
//!
//! `stem → stage1 → stage2 → stage3 → GAP → linear → L2 normalize`, each
//! convolution 3×3 with padding 1 followed by ReLU. A stylizer can be
//! spliced in after any stage's activation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stylize::Stylizer;
use crate::tensor::{Gradients, Ops, Scalar, Tensor, Var};

pub const EMBED_DIM: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_HEIGHT: usize = 32;
pub const IMAGE_WIDTH: usize = 16;
const NORM_EPS: f64 = 1e-12;

/// (name, in channels, out channels, stride)
const CONV_LAYERS: [(&str, usize, usize, usize); 4] =
    [("stem", 3, 8, 1), ("stage1", 8, 16, 2), ("stage2", 16, 32, 2), ("stage3", 32, 64, 2)];

/// Stylizer insertion point, after the named block's activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AfterStem,
    AfterStage1,
    AfterStage2,
    AfterStage3,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::AfterStem, Stage::AfterStage1, Stage::AfterStage2, Stage::AfterStage3];

    fn block(self) -> usize {
        match self {
            Stage::AfterStem => 0,
            Stage::AfterStage1 => 1,
            Stage::AfterStage2 => 2,
            Stage::AfterStage3 => 3,
        }
    }

    pub fn channels(self) -> usize {
        CONV_LAYERS[self.block()].2
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::AfterStem => "after_stem",
            Stage::AfterStage1 => "after_stage1",
            Stage::AfterStage2 => "after_stage2",
            Stage::AfterStage3 => "after_stage3",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown insertion point {s:?}")))
    }
}

/// Output of a forward pass: embeddings plus the graph handles of the
/// parameters, in [`Backbone::parameters`] order.
pub struct Forward<V> {
    pub embeddings: V,
    pub params: Vec<V>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Scalar = f32> {
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Backbone<T> {
    /// Fan-in scaled normal initialization; biases start at zero.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut normal = |shape: &[usize], fan_in: usize, gain: f64| {
            let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("valid std");
            Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
        };
        for (name, cin, cout, _) in CONV_LAYERS {
            params.push((format!("{name}.weight"), normal(&[cout, cin, 3, 3], cin * 9, 2.0)));
            params.push((format!("{name}.bias"), Tensor::zeros(&[cout])));
        }
        let width = CONV_LAYERS[3].2;
        params.push(("head.weight".to_string(), normal(&[EMBED_DIM, width], width, 1.0)));
        params.push(("head.bias".to_string(), Tensor::zeros(&[EMBED_DIM])));
        Backbone { params }
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params.iter().map(|(_, t)| t)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn named_parameters(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().map(Tensor::numel).sum()
    }

    /// Replaces parameters by name. Every parameter must be present with
    /// its current shape; unrelated entries are ignored.
    pub fn load_state(&mut self, state: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, param) in &mut self.params {
            let (_, src) = state
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name}")))?;
            if src.shape() != param.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    param.shape()
                )));
            }
            *param = src.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone { params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Moves tape gradients into the parameters' `grad` fields.
    pub fn store_gradients(&mut self, vars: &[Var], grads: &mut Gradients<T>) {
        for (param, &var) in self.parameters_mut().zip(vars) {
            param.grad = grads.take(var).map(Tensor::into_data);
        }
    }

    /// Forward pass with an arbitrary feature transform applied at `at`.
    pub fn forward_with<G, H>(&self, g: &mut G, images: &G::Var, at: Option<(Stage, H)>) -> Result<Forward<G::Var>>
    where
        G: Ops<T>,
        H: FnOnce(&mut G, G::Var) -> Result<G::Var>,
    {
        let params: Vec<G::Var> = self.parameters().map(|p| g.param(p)).collect();
        let embeddings = Self::run(g, images, &params, at)?;
        Ok(Forward { embeddings, params })
    }

    /// The network as a function of externally supplied parameter handles
    /// (same order as [`Backbone::parameters`]).
    pub fn run<G, H>(g: &mut G, images: &G::Var, params: &[G::Var], at: Option<(Stage, H)>) -> Result<G::Var>
    where
        G: Ops<T>,
        H: FnOnce(&mut G, G::Var) -> Result<G::Var>,
    {
        check_images(g.value(images).shape())?;
        if params.len() != 2 * CONV_LAYERS.len() + 2 {
            return Err(Error::usage(format!("backbone needs {} parameters, got {}", 2 * CONV_LAYERS.len() + 2, params.len())));
        }
        let mut hook = at;
        let mut x = images.clone();
        for (block, (_, _, _, stride)) in CONV_LAYERS.iter().enumerate() {
            x = g.conv2d_relu(&x, &params[2 * block], &params[2 * block + 1], *stride, 1)?;
            if hook.as_ref().is_some_and(|(stage, _)| stage.block() == block) {
                let (_, f) = hook.take().expect("checked above");
                x = f(g, x)?;
            }
        }
        let pooled = g.global_avg_pool(&x)?;
        let head = g.linear(&pooled, &params[8], &params[9])?;
        g.l2_normalize(&head, T::lit(NORM_EPS))
    }

    /// Forward pass. The stylizer only acts when `training` is set.
    pub fn forward<G: Ops<T>>(
        &self,
        g: &mut G,
        images: &G::Var,
        stylizer: Option<&mut Stylizer>,
        insertion: Stage,
        training: bool,
    ) -> Result<Forward<G::Var>> {
        match stylizer {
            Some(st) if training => {
                self.forward_with(g, images, Some((insertion, |g: &mut G, x: G::Var| st.apply(g, &x, true))))
            }
            _ => self.forward_with(g, images, None::<(Stage, fn(&mut G, G::Var) -> Result<G::Var>)>),
        }
    }

    /// Inference embeddings, `[B, EMBED_DIM]`.
    pub fn embed<G: Ops<T>>(&self, g: &mut G, images: &G::Var) -> Result<G::Var> {
        Ok(self.forward(g, images, None, Stage::AfterStage1, false)?.embeddings)
    }

    /// Feature map at `stage` (after its activation), without any stylizer.
    pub fn features_at<G: Ops<T>>(&self, g: &mut G, images: &G::Var, stage: Stage) -> Result<G::Var> {
        check_images(g.value(images).shape())?;
        let mut x = images.clone();
        for (block, (_, _, _, stride)) in CONV_LAYERS.iter().enumerate().take(stage.block() + 1) {
            let w = g.param(&self.params[2 * block].1);
            let b = g.param(&self.params[2 * block + 1].1);
            x = g.conv2d_relu(&x, &w, &b, *stride, 1)?;
        }
        Ok(x)
    }
}

fn check_images(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != IMAGE_CHANNELS || shape[2] < 8 || shape[3] < 8 {
        return Err(Error::shape(format!("backbone expects [B, 3, H>=8, W>=8] images, got {shape:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stylize::{StyleMethod, StylizerSpec};
    use crate::tensor::{Eager, Tape};
    use rand::Rng;

    fn images(b: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, 3, IMAGE_HEIGHT, IMAGE_WIDTH], |_| rng.random_range(0.0..1.0))
    }

    fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f32 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn embeddings_have_unit_norm() {
        let net = Backbone::<f32>::new(1);
        let x = images(5, 2);
        let e = net.embed(&mut Eager, &x).unwrap();
        assert_eq!(e.shape(), [5, EMBED_DIM]);
        for b in 0..5 {
            let n: f32 = e.row(b).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_without_stylizer_is_deterministic() {
        let net = Backbone::<f32>::new(3);
        let x = images(4, 4);
        assert_eq!(net.embed(&mut Eager, &x).unwrap(), net.embed(&mut Eager, &x).unwrap());
        assert_eq!(Backbone::<f32>::new(3), net);
    }

    #[test]
    fn isg_with_zero_rho_on_single_image_is_identity() {
        let net = Backbone::<f32>::new(5);
        let x = images(1, 6);
        let plain = net.embed(&mut Eager, &x).unwrap();
        for stage in Stage::ALL {
            let mut st = Stylizer::new(StylizerSpec { rho: 0.0, ..Default::default() }).unwrap();
            let styled = net.forward(&mut Eager, &x, Some(&mut st), stage, true).unwrap().embeddings;
            assert!(max_abs_diff(&plain, &styled) < 1e-4, "{stage}");
        }
    }

    #[test]
    fn eval_mode_ignores_the_stylizer() {
        let net = Backbone::<f32>::new(7);
        let x = images(6, 8);
        let plain = net.embed(&mut Eager, &x).unwrap();
        for method in StyleMethod::ALL {
            let mut st = Stylizer::new(StylizerSpec::with_method(method)).unwrap();
            let out = net.forward(&mut Eager, &x, Some(&mut st), Stage::AfterStage1, false).unwrap();
            assert_eq!(out.embeddings, plain);
        }
    }

    #[test]
    fn stylizer_changes_training_embeddings() {
        let net = Backbone::<f32>::new(9);
        let x = images(6, 10);
        let plain = net.embed(&mut Eager, &x).unwrap();
        let mut st = Stylizer::new(StylizerSpec::default()).unwrap();
        let out = net.forward(&mut Eager, &x, Some(&mut st), Stage::AfterStage1, true).unwrap();
        assert!(max_abs_diff(&plain, &out.embeddings) > 1e-3);
    }

    #[test]
    fn unknown_insertion_point_is_a_config_error() {
        assert!(matches!("after_stage9".parse::<Stage>(), Err(Error::Config(_))));
        assert_eq!("after_stage1".parse::<Stage>().unwrap(), Stage::AfterStage1);
    }

    #[test]
    fn every_parameter_receives_gradient_through_each_stylizer() {
        let net = Backbone::<f32>::new(11);
        let x = images(4, 12);
        for method in [StyleMethod::None, StyleMethod::Isg, StyleMethod::Mixstyle, StyleMethod::Dsu, StyleMethod::Padain] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut st = Stylizer::new(StylizerSpec::with_method(method)).unwrap();
            let fwd = net.forward(&mut tape, &xv, Some(&mut st), Stage::AfterStage1, true).unwrap();
            let w = tape.constant(Tensor::from_fn(&[4, EMBED_DIM], |i| ((i * 7919) % 13) as f32 - 6.0));
            let p = tape.mul(&fwd.embeddings, &w).unwrap();
            let loss = tape.sum(&p);
            let mut grads = tape.backward(loss).unwrap();
            assert!(tape.is_empty());
            let mut net2 = net.clone();
            net2.store_gradients(&fwd.params, &mut grads);
            for (name, p) in net2.named_parameters() {
                let g = p.grad.as_ref().unwrap();
                assert!(g.iter().any(|v| *v != 0.0), "{method:?}: no gradient for {name}");
                assert!(g.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn rejects_bad_image_shapes() {
        let net = Backbone::<f32>::new(1);
        let x = Tensor::<f32>::zeros(&[2, 1, 32, 16]);
        assert!(matches!(net.embed(&mut Eager, &x), Err(Error::Shape(_))));
    }
}
