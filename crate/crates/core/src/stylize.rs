//! Feature stylization: ISG and the pAdaIN / MixStyle / DSU baselines.
//!
//! Every method follows the same recipe. Per-instance channel statistics
//! `μ(F), σ(F)` normalize the feature map, and a target style `(β, γ)`
//! re-colours it: `γ ⊙ (F − μ(F)) / σ(F) + β`. Methods only differ in how
//! the target style is drawn. Target styles are computed from values and
//! enter the graph as constants; the normalizing statistics stay
//! differentiable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Ops, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleMethod {
    None,
    Isg,
    Mixstyle,
    Dsu,
    Padain,
}

impl StyleMethod {
    pub const ALL: [StyleMethod; 4] = [StyleMethod::Isg, StyleMethod::Mixstyle, StyleMethod::Dsu, StyleMethod::Padain];

    pub fn name(self) -> &'static str {
        match self {
            StyleMethod::None => "none",
            StyleMethod::Isg => "isg",
            StyleMethod::Mixstyle => "mixstyle",
            StyleMethod::Dsu => "dsu",
            StyleMethod::Padain => "padain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StylizerSpec {
    pub method: StyleMethod,
    /// Probability that a batch is stylized at all.
    pub p: f64,
    /// Half-width of the ISG sampling interval in batch standard deviations.
    pub rho: f64,
    /// MixStyle `Beta(alpha, alpha)` parameter.
    pub alpha: f64,
    pub eps: f64,
    /// Sampled styles are constants under differentiation. Must be true.
    pub detach_sampled: bool,
    pub seed: u64,
}

impl Default for StylizerSpec {
    fn default() -> Self {
        StylizerSpec { method: StyleMethod::Isg, p: 1.0, rho: 3.0, alpha: 0.1, eps: 1e-6, detach_sampled: true, seed: 0 }
    }
}

impl StylizerSpec {
    pub fn with_method(method: StyleMethod) -> Self {
        StylizerSpec { method, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!("stylizer p must lie in [0, 1], got {}", self.p)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!("stylizer rho must be >= 0, got {}", self.rho)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("stylizer alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!("stylizer eps must be > 0, got {}", self.eps)));
        }
        if !self.detach_sampled {
            return Err(Error::config("detach_sampled = false is not supported"));
        }
        Ok(())
    }
}

/// Batch-level distribution of instance styles, population statistics
/// over the batch dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDistribution {
    pub mu_mu: Vec<f64>,
    pub sigma_mu: Vec<f64>,
    pub mu_sigma: Vec<f64>,
    pub sigma_sigma: Vec<f64>,
}

impl StyleDistribution {
    /// `mu` and `sigma` are `[B, C]` instance statistics.
    pub fn from_stats<T: Scalar>(mu: &Tensor<T>, sigma: &Tensor<T>) -> Self {
        let (mu_mu, sigma_mu) = column_moments(mu);
        let (mu_sigma, sigma_sigma) = column_moments(sigma);
        StyleDistribution { mu_mu, sigma_mu, mu_sigma, sigma_sigma }
    }

    /// ISG intervals `[center − ρ·spread, center + ρ·spread]` for `β`
    /// and `γ`, one pair of bounds per channel.
    pub fn intervals(&self, rho: f64) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let span = |c: &[f64], s: &[f64]| c.iter().zip(s).map(|(&c, &s)| (c - rho * s, c + rho * s)).collect();
        (span(&self.mu_mu, &self.sigma_mu), span(&self.mu_sigma, &self.sigma_sigma))
    }
}

fn column_moments<T: Scalar>(m: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let (b, c) = (m.shape()[0], m.shape()[1]);
    let mut mean = vec![0.0; c];
    for row in m.data().chunks(c) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v.to_f64().unwrap();
        }
    }
    mean.iter_mut().for_each(|v| *v /= b as f64);
    let mut var = vec![0.0; c];
    for row in m.data().chunks(c) {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64().unwrap() - mu;
            *acc += d * d;
        }
    }
    (mean, var.into_iter().map(|v| (v / b as f64).sqrt()).collect())
}

/// Target style for every instance: `beta` and `gamma` are `[B, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledStyle<T = f32> {
    pub beta: Tensor<T>,
    pub gamma: Tensor<T>,
}

impl<T: Scalar> SampledStyle<T> {
    /// The identity style: an instance keeps its own statistics.
    pub fn own(mu: &Tensor<T>, sigma: &Tensor<T>) -> Self {
        SampledStyle { beta: mu.clone(), gamma: sigma.clone() }
    }
}

fn from_f64<T: Scalar>(shape: &[usize], data: Vec<f64>) -> Tensor<T> {
    Tensor::new(shape, data.into_iter().map(T::lit).collect()).expect("style shape")
}

/// ISG: every instance and channel draws `β` and `γ` independently and
/// uniformly from the batch intervals, regardless of its own style.
pub fn isg_style<T: Scalar>(mu: &Tensor<T>, sigma: &Tensor<T>, rho: f64, rng: &mut impl Rng) -> SampledStyle<T> {
    let (b, c) = (mu.shape()[0], mu.shape()[1]);
    let (beta_iv, gamma_iv) = StyleDistribution::from_stats(mu, sigma).intervals(rho);
    let mut beta = Vec::with_capacity(b * c);
    let mut gamma = Vec::with_capacity(b * c);
    for _ in 0..b {
        for &(lo, hi) in &beta_iv {
            beta.push(lo + (hi - lo) * rng.random::<f64>());
        }
    }
    for _ in 0..b {
        for &(lo, hi) in &gamma_iv {
            gamma.push(lo + (hi - lo) * rng.random::<f64>());
        }
    }
    SampledStyle { beta: from_f64(&[b, c], beta), gamma: from_f64(&[b, c], gamma) }
}

/// MixStyle: instance `b` mixes its statistics with those of `perm[b]`
/// using weight `lambda[b]` on its own.
pub fn mixstyle_style<T: Scalar>(mu: &Tensor<T>, sigma: &Tensor<T>, lambda: &[f64], perm: &[usize]) -> SampledStyle<T> {
    let (b, c) = (mu.shape()[0], mu.shape()[1]);
    assert_eq!(lambda.len(), b);
    assert_eq!(perm.len(), b);
    let mix = |m: &Tensor<T>| -> Vec<f64> {
        (0..b)
            .flat_map(|i| {
                let (own, other) = (m.row(i), m.row(perm[i]));
                let l = lambda[i];
                (0..c).map(move |k| l * own[k].to_f64().unwrap() + (1.0 - l) * other[k].to_f64().unwrap())
            })
            .collect()
    };
    SampledStyle { beta: from_f64(&[b, c], mix(mu)), gamma: from_f64(&[b, c], mix(sigma)) }
}

/// DSU: Gaussian perturbation of each instance's own statistics scaled by
/// the batch spread. `noise_mu` / `noise_sigma` are `B·C` standard
/// normal draws; `γ` is floored at `eps`.
pub fn dsu_style<T: Scalar>(
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
    noise_mu: &[f64],
    noise_sigma: &[f64],
    eps: f64,
) -> SampledStyle<T> {
    let (b, c) = (mu.shape()[0], mu.shape()[1]);
    assert_eq!(noise_mu.len(), b * c);
    assert_eq!(noise_sigma.len(), b * c);
    let dist = StyleDistribution::from_stats(mu, sigma);
    let beta = (0..b * c).map(|i| mu.data()[i].to_f64().unwrap() + noise_mu[i] * dist.sigma_mu[i % c]).collect();
    let gamma = (0..b * c)
        .map(|i| (sigma.data()[i].to_f64().unwrap() + noise_sigma[i] * dist.sigma_sigma[i % c]).max(eps))
        .collect();
    SampledStyle { beta: from_f64(&[b, c], beta), gamma: from_f64(&[b, c], gamma) }
}

/// pAdaIN: instance `b` takes the statistics of instance `perm[b]`.
pub fn padain_style<T: Scalar>(mu: &Tensor<T>, sigma: &Tensor<T>, perm: &[usize]) -> SampledStyle<T> {
    let (b, c) = (mu.shape()[0], mu.shape()[1]);
    assert_eq!(perm.len(), b);
    let take = |m: &Tensor<T>| -> Vec<T> { perm.iter().flat_map(|&j| m.row(j).iter().copied()).collect() };
    SampledStyle {
        beta: Tensor::new(&[b, c], take(mu)).expect("style shape"),
        gamma: Tensor::new(&[b, c], take(sigma)).expect("style shape"),
    }
}

/// `γ ⊙ (x − μ) / σ + β` with `μ, σ` given as `[B, C]` graph values.
pub fn restyle_with_stats<T: Scalar, G: Ops<T>>(
    g: &mut G,
    x: &G::Var,
    mu: &G::Var,
    sigma: &G::Var,
    style: &SampledStyle<T>,
) -> Result<G::Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("stylizers expect [B, C, H, W] features, got {shape:?}")));
    }
    if style.beta.shape() != [shape[0], shape[1]] || style.gamma.shape() != [shape[0], shape[1]] {
        return Err(Error::shape(format!(
            "style of shape {:?} does not match features {shape:?}",
            style.beta.shape()
        )));
    }
    // Folded into one per-channel affine: x · γ/σ + (β − μ · γ/σ).
    let gamma = g.constant(style.gamma.clone());
    let beta = g.constant(style.beta.clone());
    let scale = g.div(&gamma, sigma)?;
    let offset = g.mul(mu, &scale)?;
    let shift = g.sub(&beta, &offset)?;
    g.channel_affine(x, &scale, &shift)
}

/// [`restyle_with_stats`] computing the statistics of `x` itself.
pub fn restyle<T: Scalar, G: Ops<T>>(g: &mut G, x: &G::Var, style: &SampledStyle<T>, eps: T) -> Result<G::Var> {
    let (mu, sigma) = g.channel_stats(x, eps)?;
    restyle_with_stats(g, x, &mu, &sigma, style)
}

/// A configured stylizer with its own random stream.
#[derive(Clone, Debug)]
pub struct Stylizer {
    spec: StylizerSpec,
    rng: ChaCha8Rng,
}

impl Stylizer {
    pub fn new(spec: StylizerSpec) -> Result<Self> {
        spec.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(Stylizer { spec, rng })
    }

    pub fn spec(&self) -> &StylizerSpec {
        &self.spec
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One batch-level gate draw: true when this batch gets stylized.
    pub fn gate(&mut self) -> bool {
        if self.spec.method == StyleMethod::None {
            return false;
        }
        self.rng.random::<f64>() < self.spec.p
    }

    /// Draws target styles for instance statistics `mu`, `sigma`
    /// (`[B, C]`) without gating.
    pub fn draw<T: Scalar>(&mut self, mu: &Tensor<T>, sigma: &Tensor<T>) -> SampledStyle<T> {
        let b = mu.shape()[0];
        let c = mu.shape()[1];
        match self.spec.method {
            StyleMethod::None => SampledStyle::own(mu, sigma),
            StyleMethod::Isg => isg_style(mu, sigma, self.spec.rho, &mut self.rng),
            StyleMethod::Mixstyle => {
                let beta = Beta::new(self.spec.alpha, self.spec.alpha).expect("alpha validated");
                let lambda: Vec<f64> = (0..b).map(|_| beta.sample(&mut self.rng)).collect();
                let perm = self.permutation(b);
                mixstyle_style(mu, sigma, &lambda, &perm)
            }
            StyleMethod::Dsu => {
                let noise_mu: Vec<f64> = (0..b * c).map(|_| StandardNormal.sample(&mut self.rng)).collect();
                let noise_sigma: Vec<f64> = (0..b * c).map(|_| StandardNormal.sample(&mut self.rng)).collect();
                dsu_style(mu, sigma, &noise_mu, &noise_sigma, self.spec.eps)
            }
            StyleMethod::Padain => {
                let perm = self.permutation(b);
                padain_style(mu, sigma, &perm)
            }
        }
    }

    fn permutation(&mut self, b: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut self.rng);
        perm
    }

    /// Stylizes `x` (`[B, C, H, W]`). Identity outside training mode and
    /// for batches that fail the activation gate.
    pub fn apply<T: Scalar, G: Ops<T>>(&mut self, g: &mut G, x: &G::Var, training: bool) -> Result<G::Var> {
        if !training || !self.gate() {
            return Ok(x.clone());
        }
        let eps = T::lit(self.spec.eps);
        let (mu, sigma) = g.channel_stats(x, eps)?;
        let style = self.draw(g.value(&mu), g.value(&sigma));
        restyle_with_stats(g, x, &mu, &sigma, &style)
    }
}
