//! Per-domain memory banks of class prototypes.
//!
//! Each source domain owns a bank with one unit-norm prototype per
//! identity. The identification loss is a temperature-scaled softmax over
//! cosine similarities to all prototypes of the domain; prototypes are
//! never differentiated and only move through the momentum update.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::tensor::{Eager, Ops, Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.2;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// How a batch containing several samples of one identity updates its
/// prototype.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// One momentum step per sample, in batch order.
    #[default]
    Sequential,
    /// One momentum step per identity with the mean of its samples.
    Joint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T: Scalar = f32> {
    domain: usize,
    /// `[K, d]`
    prototypes: Tensor<T>,
    momentum: T,
    temperature: T,
    renormalize: bool,
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(domain: usize, prototypes: Tensor<T>, momentum: f64, temperature: f64) -> Result<Self> {
        if prototypes.rank() != 2 {
            return Err(Error::shape(format!("prototypes must be [K, d], got {:?}", prototypes.shape())));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1], got {momentum}")));
        }
        if !(temperature > 0.0) {
            return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(MemoryBank {
            domain,
            prototypes,
            momentum: T::lit(momentum),
            temperature: T::lit(temperature),
            renormalize: true,
        })
    }

    /// Prototypes from the L2-normalized per-class mean of `embeddings`
    /// (`[n, d]`). Every class in `0..num_classes` needs a sample.
    pub fn from_embeddings(
        domain: usize,
        embeddings: &Tensor<T>,
        labels: &[usize],
        num_classes: usize,
        momentum: f64,
        temperature: f64,
    ) -> Result<Self> {
        let d = embeddings.shape()[1];
        if labels.len() != embeddings.shape()[0] {
            return Err(Error::shape(format!("{} labels for {} embeddings", labels.len(), embeddings.shape()[0])));
        }
        let mut sums = vec![T::zero(); num_classes * d];
        let mut counts = vec![0usize; num_classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::config(format!("label {label} outside {num_classes} classes")));
            }
            counts[label] += 1;
            for (s, &v) in sums[label * d..(label + 1) * d].iter_mut().zip(embeddings.row(i)) {
                *s = *s + v;
            }
        }
        for (k, row) in sums.chunks_mut(d).enumerate() {
            if counts[k] == 0 {
                return Err(Error::config(format!("class {k} of domain {domain} has no samples")));
            }
            let n = norm(row) / T::from_usize(counts[k]).unwrap();
            if n <= T::lit(1e-6) {
                return Err(Error::Numerical(format!("degenerate class centroid for class {k} of domain {domain}")));
            }
            let scale = T::from_usize(counts[k]).unwrap() * n;
            row.iter_mut().for_each(|v| *v = *v / scale);
        }
        Self::new(domain, Tensor::new(&[num_classes, d], sums)?, momentum, temperature)
    }

    /// Runs `backbone` in inference mode over `images` in chunks and
    /// builds the prototypes from the resulting embeddings.
    pub fn init_prototypes(
        domain: usize,
        backbone: &Backbone<T>,
        images: &Tensor<T>,
        labels: &[usize],
        num_classes: usize,
        momentum: f64,
        temperature: f64,
    ) -> Result<Self> {
        let embeddings = embed_all(backbone, images, 128)?;
        Self::from_embeddings(domain, &embeddings, labels, num_classes, momentum, temperature)
    }

    /// Literal momentum update without renormalization when `false`.
    pub fn set_renormalize(&mut self, renormalize: bool) {
        self.renormalize = renormalize;
    }

    pub fn domain(&self) -> usize {
        self.domain
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn prototypes(&self) -> &Tensor<T> {
        &self.prototypes
    }

    pub fn momentum(&self) -> T {
        self.momentum
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    /// Mean over the batch of `−log softmax(⟨f, c_k⟩ / τ)` at the true
    /// class. `features` is `[n, d]` and assumed unit norm.
    pub fn identification_loss<G: Ops<T>>(&self, g: &mut G, features: &G::Var, labels: &[usize]) -> Result<G::Var> {
        let shape = g.value(features).shape().to_vec();
        let (k, d) = (self.num_classes(), self.prototypes.shape()[1]);
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::shape(format!("features {shape:?} do not match prototype width {d}")));
        }
        if shape[0] == 0 || labels.len() != shape[0] {
            return Err(Error::usage(format!("{} labels for {} features", labels.len(), shape[0])));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::usage(format!("label {bad} out of range for {k} prototypes")));
        }
        // transposed, unit-norm prototypes scaled by 1/τ
        let mut scaled = vec![T::zero(); d * k];
        for c in 0..k {
            let row = self.prototypes.row(c);
            let s = T::one() / (norm(row).max(T::lit(1e-12)) * self.temperature);
            for j in 0..d {
                scaled[j * k + c] = row[j] * s;
            }
        }
        let protos = g.constant(Tensor::new(&[d, k], scaled)?);
        let logits = g.matmul(features, &protos)?;
        let lse = g.log_sum_exp(&logits)?;
        let positive = g.gather_rows(&logits, labels)?;
        let nll = g.sub(&lse, &positive)?;
        Ok(g.mean(&nll))
    }

    /// Momentum update of the prototypes of the identities in the batch.
    pub fn update(&mut self, features: &Tensor<T>, labels: &[usize], rule: UpdateRule) -> Result<()> {
        let d = self.prototypes.shape()[1];
        if features.rank() != 2 || features.shape()[1] != d || features.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "update with features {:?} and {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::usage(format!("label {bad} out of range for {} prototypes", self.num_classes())));
        }
        match rule {
            UpdateRule::Sequential => {
                for (i, &label) in labels.iter().enumerate() {
                    self.step(label, features.row(i));
                }
            }
            UpdateRule::Joint => {
                let mut order: Vec<usize> = Vec::new();
                for &l in labels {
                    if !order.contains(&l) {
                        order.push(l);
                    }
                }
                for label in order {
                    let mut mean = vec![T::zero(); d];
                    let mut count = 0;
                    for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == label) {
                        count += 1;
                        mean.iter_mut().zip(features.row(i)).for_each(|(m, &v)| *m = *m + v);
                    }
                    let inv = T::one() / T::from_usize(count).unwrap();
                    mean.iter_mut().for_each(|m| *m = *m * inv);
                    self.step(label, &mean);
                }
            }
        }
        Ok(())
    }

    fn step(&mut self, label: usize, feature: &[T]) {
        let d = feature.len();
        let (eta, renorm) = (self.momentum, self.renormalize);
        let row = &mut self.prototypes.data_mut()[label * d..(label + 1) * d];
        for (c, &f) in row.iter_mut().zip(feature) {
            *c = eta * *c + (T::one() - eta) * f;
        }
        if renorm {
            let n = norm(row);
            if n > T::lit(1e-12) {
                row.iter_mut().for_each(|c| *c = *c / n);
            }
        }
    }
}

/// Mean of the per-domain losses.
pub fn total_loss<T: Scalar, G: Ops<T>>(g: &mut G, losses: &[G::Var]) -> Result<G::Var> {
    let (first, rest) = losses.split_first().ok_or_else(|| Error::usage("total_loss needs at least one domain"))?;
    let mut acc = first.clone();
    for l in rest {
        acc = g.add(&acc, l)?;
    }
    Ok(g.scale(&acc, T::one() / T::from_usize(losses.len()).unwrap()))
}

/// Inference embeddings for a stack of images, evaluated in chunks.
pub fn embed_all<T: Scalar>(backbone: &Backbone<T>, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    let per = s[1] * s[2] * s[3];
    let mut out = Vec::with_capacity(s[0] * crate::backbone::EMBED_DIM);
    for start in (0..s[0]).step_by(chunk.max(1)) {
        let end = (start + chunk).min(s[0]);
        let batch = Tensor::new(&[end - start, s[1], s[2], s[3]], images.data()[start * per..end * per].to_vec())?;
        out.extend_from_slice(backbone.embed(&mut Eager, &batch)?.data());
    }
    Tensor::new(&[s[0], crate::backbone::EMBED_DIM], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Tensor<f64> {
        let mut t = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
        for row in t.data_mut().chunks_mut(d) {
            let n = norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    /// Per-sample softmax written out directly.
    fn naive_loss(protos: &Tensor<f64>, feats: &Tensor<f64>, labels: &[usize], tau: f64) -> f64 {
        let k = protos.shape()[0];
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let f = feats.row(i);
            let sims: Vec<f64> = (0..k)
                .map(|c| {
                    let p = protos.row(c);
                    let dot: f64 = f.iter().zip(p).map(|(a, b)| a * b).sum();
                    dot / (norm(f) * norm(p)) / tau
                })
                .collect();
            let denom: f64 = sims.iter().map(|s| s.exp()).sum();
            total += -(sims[l].exp() / denom).ln();
        }
        total / labels.len() as f64
    }

    fn loss_value(bank: &MemoryBank<f64>, feats: &Tensor<f64>, labels: &[usize]) -> f64 {
        bank.identification_loss(&mut Eager, feats, labels).unwrap().item()
    }

    #[test]
    fn equal_similarities_give_log_k() {
        // feature orthogonal to all three prototypes
        let protos = Tensor::new(&[3, 4], vec![1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.]).unwrap();
        let bank = MemoryBank::new(0, protos, 0.2, 0.05).unwrap();
        let f = Tensor::new(&[1, 4], vec![0., 0., 0., 1.]).unwrap();
        assert!((loss_value(&bank, &f, &[1]) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matching_prototype_closed_form() {
        let protos = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let bank = MemoryBank::new(0, protos, 0.2, 0.05).unwrap();
        let f = Tensor::new(&[1, 3], vec![1., 0., 0.]).unwrap();
        let expected = (1.0 + 2.0 * (-20f64).exp()).ln();
        assert!((loss_value(&bank, &f, &[0]) - expected).abs() / expected < 1e-6);
        assert!((expected - 4.122307e-9).abs() < 1e-14);
    }

    #[test]
    fn loss_matches_naive_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let protos = unit_rows(5, 16, &mut rng);
            let feats = unit_rows(8, 16, &mut rng);
            let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..5)).collect();
            let bank = MemoryBank::new(0, protos.clone(), 0.2, 0.05).unwrap();
            let got = loss_value(&bank, &feats, &labels);
            assert!((got - naive_loss(&protos, &feats, &labels, 0.05)).abs() < 1e-6);
        }
    }

    #[test]
    fn label_out_of_range_is_a_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = MemoryBank::new(0, unit_rows(3, 4, &mut rng), 0.2, 0.05).unwrap();
        let f = unit_rows(1, 4, &mut rng);
        assert!(matches!(bank.identification_loss(&mut Eager, &f, &[3]), Err(Error::Usage(_))));
    }

    #[test]
    fn prototypes_are_not_differentiated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = MemoryBank::new(0, unit_rows(4, 6, &mut rng), 0.2, 0.05).unwrap();
        let feats = unit_rows(3, 6, &mut rng);
        let before = bank.clone();
        let mut tape = Tape::new();
        let f = tape.param(&feats);
        let loss = bank.identification_loss(&mut tape, &f, &[0, 1, 3]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(f).unwrap().data().iter().any(|v| *v != 0.0));
        assert_eq!(bank, before);
    }

    #[test]
    fn total_loss_is_the_mean() {
        let one = vec![Tensor::scalar(1.7f64)];
        assert_eq!(total_loss(&mut Eager, &one).unwrap().item(), 1.7);
        let two = vec![Tensor::scalar(1.0f64), Tensor::scalar(3.0)];
        assert_eq!(total_loss(&mut Eager, &two).unwrap().item(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..5.0)).collect();
        let three: Vec<Tensor<f64>> = vals.iter().map(|&v| Tensor::scalar(v)).collect();
        let got = total_loss(&mut Eager, &three).unwrap().item();
        assert!((got - vals.iter().sum::<f64>() / 3.0).abs() < 1e-9);
        assert!(total_loss::<f64, Eager>(&mut Eager, &[]).is_err());
    }

    #[test]
    fn momentum_one_keeps_prototypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bank = MemoryBank::new(0, unit_rows(3, 4, &mut rng), 1.0, 0.05).unwrap();
        let before = bank.prototypes().clone();
        bank.update(&unit_rows(2, 4, &mut rng), &[0, 2], UpdateRule::Sequential).unwrap();
        assert_eq!(bank.prototypes(), &before);
    }

    #[test]
    fn momentum_step_closed_form() {
        let mut bank = MemoryBank::new(0, Tensor::new(&[1, 2], vec![1.0f64, 0.0]).unwrap(), 0.2, 0.05).unwrap();
        bank.update(&Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(), &[0], UpdateRule::Sequential).unwrap();
        let n = (0.2f64 * 0.2 + 0.8 * 0.8).sqrt();
        let p = bank.prototypes().data();
        assert!((p[0] - 0.2 / n).abs() < 1e-12 && (p[1] - 0.8 / n).abs() < 1e-12);
        assert!((p[0] - 0.2425).abs() < 1e-4 && (p[1] - 0.9701).abs() < 1e-4);

        let mut literal = MemoryBank::new(0, Tensor::new(&[1, 2], vec![1.0f64, 0.0]).unwrap(), 0.2, 0.05).unwrap();
        literal.set_renormalize(false);
        literal.update(&Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(), &[0], UpdateRule::Sequential).unwrap();
        assert_eq!(literal.prototypes().data(), &[0.2, 0.8]);
    }

    #[test]
    fn joint_rule_uses_the_class_mean() {
        let protos = Tensor::new(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let mut bank = MemoryBank::new(0, protos, 0.5, 0.05).unwrap();
        bank.set_renormalize(false);
        let f = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        bank.update(&f, &[0, 0], UpdateRule::Joint).unwrap();
        assert_eq!(bank.prototypes().row(0), &[0.5, 0.0]);
        assert_eq!(bank.prototypes().row(1), &[0.0, 1.0]);
    }

    #[test]
    fn prototypes_from_class_means() {
        let f = Tensor::new(&[1, 3], vec![0.0f64, 0.6, 0.8]).unwrap();
        let bank = MemoryBank::from_embeddings(0, &f, &[0], 1, 0.2, 0.05).unwrap();
        assert_eq!(bank.prototypes().data(), f.data());

        let opposed = Tensor::new(&[2, 2], vec![1.0f64, 0.0, -1.0, 0.0]).unwrap();
        let err = MemoryBank::from_embeddings(0, &opposed, &[0, 0], 1, 0.2, 0.05).unwrap_err();
        assert!(err.to_string().contains("degenerate class centroid"));

        let missing = MemoryBank::from_embeddings(0, &f, &[0], 2, 0.2, 0.05).unwrap_err();
        assert!(matches!(missing, Error::Config(_)));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = unit_rows(12, 5, &mut rng);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let bank = MemoryBank::from_embeddings(0, &feats, &labels, 3, 0.2, 0.05).unwrap();
        for k in 0..3 {
            let mut mean = [0.0; 5];
            for i in (k..12).step_by(3) {
                for j in 0..5 {
                    mean[j] += feats.row(i)[j] / 4.0;
                }
            }
            let n = norm(&mean);
            for j in 0..5 {
                assert!((bank.prototypes().row(k)[j] - mean[j] / n).abs() < 1e-6);
            }
        }
    }

    fn rotation(d: usize, seed: u64) -> Vec<Vec<f64>> {
        // Gram-Schmidt on a random matrix
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = norm(&v);
            q.push(v.into_iter().map(|a| a / n).collect());
        }
        q
    }

    fn rotate(t: &Tensor<f64>, q: &[Vec<f64>]) -> Tensor<f64> {
        let d = t.shape()[1];
        Tensor::from_fn(t.shape(), |i| {
            let (r, j) = (i / d, i % d);
            q[j].iter().zip(t.row(r)).map(|(a, b)| a * b).sum()
        })
    }

    proptest! {
        #[test]
        fn loss_is_rotation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let protos = unit_rows(4, 6, &mut rng);
            let feats = unit_rows(5, 6, &mut rng);
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
            let q = rotation(6, seed ^ 1);
            let a = loss_value(&MemoryBank::new(0, protos.clone(), 0.2, 0.05).unwrap(), &feats, &labels);
            let b = loss_value(&MemoryBank::new(0, rotate(&protos, &q), 0.2, 0.05).unwrap(), &rotate(&feats, &q), &labels);
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn moving_toward_the_positive_lowers_the_loss(
            sims in proptest::collection::vec(-0.4f64..0.4, 4),
            step in 0.01f64..0.2,
            seed in any::<u64>(),
        ) {
            // orthonormal prototypes c_k plus a direction n orthogonal to all
            // of them; f = Σ s_k c_k + r n. Raising s_+ while shrinking r
            // moves f along the sphere toward c_+ with the other
            // similarities held fixed.
            let q = rotation(6, seed);
            let protos = Tensor::from_fn(&[4, 6], |i| q[i / 6][i % 6]);
            let bank = MemoryBank::new(0, protos, 0.2, 0.05).unwrap();
            let feature = |s: &[f64]| {
                let r = (1.0 - s.iter().map(|v| v * v).sum::<f64>()).sqrt();
                Tensor::from_fn(&[1, 6], |j| (0..4).map(|k| s[k] * q[k][j]).sum::<f64>() + r * q[5][j])
            };
            let mut moved = sims.clone();
            moved[2] += step;
            prop_assert!(loss_value(&bank, &feature(&moved), &[2]) < loss_value(&bank, &feature(&sims), &[2]));
        }

        #[test]
        fn updates_are_local_and_keep_unit_norm(seed in any::<u64>(), joint in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = MemoryBank::new(0, unit_rows(6, 5, &mut rng), 0.2, 0.05).unwrap();
            let before = bank.prototypes().clone();
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
            let rule = if joint { UpdateRule::Joint } else { UpdateRule::Sequential };
            bank.update(&unit_rows(4, 5, &mut rng), &labels, rule).unwrap();
            for k in 0..6 {
                let row = bank.prototypes().row(k);
                prop_assert!((norm(row) - 1.0).abs() < 1e-5);
                if !labels.contains(&k) {
                    prop_assert_eq!(row, before.row(k));
                }
            }
        }
    }
}
