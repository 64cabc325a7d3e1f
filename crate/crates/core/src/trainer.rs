//! Training loops: interleaved learning and its ablation variants.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Stage};
use crate::data::{sample_batch, Dataset, DomainBatch};
use crate::error::{Error, Result};
use crate::eval::evaluate_domain;
use crate::memory::{total_loss, MemoryBank, UpdateRule, DEFAULT_MOMENTUM, DEFAULT_TEMPERATURE};
use crate::stylize::{StyleMethod, Stylizer, StylizerSpec};
use crate::tensor::{Eager, Ops, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// One plain forward; banks take the loss features.
    Baseline,
    /// One stylized forward; banks take the (stylized) loss features.
    Aug,
    /// Forward, backward, then a stylized forward of the updated model
    /// whose features only update the banks.
    Il,
    /// `Il` with the stylizer switched off in the second forward.
    IlNoIsg,
    /// `Il` with the second forward moved before the backward pass.
    IlFfb,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [TrainMode::Baseline, TrainMode::Aug, TrainMode::Il, TrainMode::IlNoIsg, TrainMode::IlFfb];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Aug => "aug",
            TrainMode::Il => "il",
            TrainMode::IlNoIsg => "il_no_isg",
            TrainMode::IlFfb => "il_ffb",
        }
    }

    /// Activation probability used when the config does not set one.
    pub fn default_probability(self) -> f64 {
        match self {
            TrainMode::Aug => 0.5,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub stylizer: StylizerSpec,
    pub insertion: Stage,
    pub epochs: usize,
    /// Identities per source domain in a batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
    /// Defaults to one pass over a source domain's images.
    pub iters_per_epoch: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub update_rule: UpdateRule,
    pub augment: bool,
    pub seed: u64,
    /// Store measured iteration times in the metrics. Off by default so
    /// that metrics files are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Il,
            stylizer: StylizerSpec::default(),
            insertion: Stage::AfterStage1,
            epochs: 30,
            p: 16,
            k: 4,
            iters_per_epoch: None,
            lr: 3.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_epochs: 3,
            decay_epochs: vec![15, 25],
            decay_factor: 0.1,
            momentum: DEFAULT_MOMENTUM,
            temperature: DEFAULT_TEMPERATURE,
            update_rule: UpdateRule::Sequential,
            augment: true,
            seed: 0,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn for_mode(mode: TrainMode) -> Self {
        let mut c = TrainConfig { mode, ..Default::default() };
        c.stylizer.p = mode.default_probability();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.stylizer.validate()?;
        if self.p == 0 || self.k == 0 {
            return Err(Error::config("p and k must be positive"));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("lr must be >= 0 and Adam betas in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::config("adam_eps and decay_factor must be > 0"));
        }
        if self.iters_per_epoch == Some(0) {
            return Err(Error::config("iters_per_epoch must be positive"));
        }
        let needs_stylizer = matches!(self.mode, TrainMode::Aug | TrainMode::Il | TrainMode::IlFfb);
        if needs_stylizer && self.stylizer.method == StyleMethod::None {
            return Err(Error::config(format!("mode {} needs a stylizer method", self.mode.name())));
        }
        Ok(())
    }

    /// Linear warmup from `lr / 10`, then step decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let t = epoch as f64 / self.warmup_epochs as f64;
            return self.lr * (0.1 + 0.9 * t);
        }
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

/// Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(backbone: &Backbone<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<Vec<f32>> = backbone.parameters().map(|p| vec![0.0; p.numel()]).collect();
        Adam { beta1, beta2, eps, step: 0, v: m.clone(), m }
    }

    /// Applies and clears the gradients stored on the parameters.
    pub fn step(&mut self, backbone: &mut Backbone<f32>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for ((param, m), v) in backbone.parameters_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = param.grad.take() else { continue };
            for (((w, g), m), v) in param.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Outcome of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    /// Mean identification loss over source domains.
    pub loss: f64,
    pub per_domain: Vec<f64>,
    pub forward_ms: f64,
    pub backward_ms: f64,
    /// Second (bank) forward, zero for single-forward modes.
    pub second_forward_ms: f64,
    pub bank_update_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epoch: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub mean_loss: Option<f64>,
    pub lr: f64,
    pub iter_time_ms: Option<f64>,
    pub map_target: f64,
    pub rank1_target: f64,
}

impl RunMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// One mixed batch: the per-domain batches stacked in domain order.
pub struct MixedBatch {
    pub images: Tensor<f32>,
    /// `(domain, start row, labels)`
    pub parts: Vec<(usize, usize, Vec<usize>)>,
}

impl MixedBatch {
    pub fn new(batches: Vec<DomainBatch>) -> Result<Self> {
        let first = batches.first().ok_or_else(|| Error::usage("empty batch list"))?;
        let mut shape = first.images.shape().to_vec();
        let mut data = Vec::new();
        let mut parts = Vec::new();
        let mut row = 0;
        for b in batches {
            parts.push((b.domain, row, b.labels.clone()));
            row += b.labels.len();
            data.extend(b.images.into_data());
        }
        shape[0] = row;
        Ok(MixedBatch { images: Tensor::new(&shape, data)?, parts })
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub backbone: Backbone<f32>,
    pub banks: Vec<MemoryBank<f32>>,
    pub stylizer: Stylizer,
    optimizer: Adam,
    tape: Tape<f32>,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh model from the config seed, banks from its source embeddings.
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.seed);
        let banks = data
            .sources()
            .iter()
            .enumerate()
            .map(|(d, dom)| {
                MemoryBank::init_prototypes(
                    d,
                    &backbone,
                    &dom.images,
                    &dom.labels,
                    dom.num_identities(),
                    config.momentum,
                    config.temperature,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let stylizer = Stylizer::new(StylizerSpec { seed: config.seed ^ 0x1557_7e11, ..config.stylizer.clone() })?;
        let optimizer = Adam::new(&backbone, config.beta1, config.beta2, config.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(7);
        Ok(Trainer { config, backbone, banks, stylizer, optimizer, tape: Tape::new(), rng })
    }

    pub fn tape(&self) -> &Tape<f32> {
        &self.tape
    }

    pub fn sample(&mut self, data: &Dataset) -> Result<MixedBatch> {
        let batches = data
            .sources()
            .iter()
            .enumerate()
            .map(|(d, dom)| sample_batch(dom, d, self.config.p, self.config.k, self.config.augment, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        MixedBatch::new(batches)
    }

    pub fn iterations_per_epoch(&self, data: &Dataset) -> usize {
        self.config.iters_per_epoch.unwrap_or_else(|| {
            let per_domain = data.sources().iter().map(|d| d.len()).min().unwrap_or(0);
            (per_domain / (self.config.p * self.config.k)).max(1)
        })
    }

    /// Per-domain identification losses of `embeddings` on the tape.
    fn losses(&mut self, embeddings: &crate::tensor::Var, batch: &MixedBatch) -> Result<(crate::tensor::Var, Vec<f64>)> {
        let mut losses = Vec::with_capacity(batch.parts.len());
        for (d, start, labels) in &batch.parts {
            let feats = self.tape.slice_rows(embeddings, *start, start + labels.len())?;
            losses.push(self.banks[*d].identification_loss(&mut self.tape, &feats, labels)?);
        }
        let per_domain: Vec<f64> = losses.iter().map(|l| self.tape.value(l).item() as f64).collect();
        if let Some((d, v)) = per_domain.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            self.tape.clear();
            return Err(Error::Numerical(format!("loss of source domain {d} is {v}")));
        }
        Ok((total_loss(&mut self.tape, &losses)?, per_domain))
    }

    fn update_banks(&mut self, features: &Tensor<f32>, batch: &MixedBatch) -> Result<()> {
        for (d, start, labels) in &batch.parts {
            let rows = crate::tensor::kernels::slice_rows(features, *start, start + labels.len())?;
            self.banks[*d].update(&rows, labels, self.config.update_rule)?;
        }
        Ok(())
    }

    fn backward_and_step(&mut self, loss: crate::tensor::Var, params: &[crate::tensor::Var], lr: f64) -> Result<()> {
        let mut grads = self.tape.backward(loss)?;
        self.backbone.store_gradients(params, &mut grads);
        self.optimizer.step(&mut self.backbone, lr);
        Ok(())
    }

    /// One step of the configured mode on `batch` at learning rate `lr`.
    pub fn step(&mut self, batch: &MixedBatch, lr: f64) -> Result<IterationRecord> {
        let t0 = Instant::now();
        let images = self.tape.constant(batch.images.clone());
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        let stylized_loss = self.config.mode == TrainMode::Aug;
        let fwd = if stylized_loss {
            self.backbone.forward(&mut self.tape, &images, Some(&mut self.stylizer), self.config.insertion, true)?
        } else {
            self.backbone.forward(&mut self.tape, &images, None, self.config.insertion, true)?
        };
        let (loss, per_domain) = self.losses(&fwd.embeddings, batch)?;
        let loss_value = self.tape.value(&loss).item() as f64;
        let t1 = Instant::now();
        let (t_bwd, t_second, t_bank) = match self.config.mode {
            TrainMode::Baseline | TrainMode::Aug => {
                let features = self.tape.value(&fwd.embeddings).clone();
                let t = Instant::now();
                self.backward_and_step(loss, &fwd.params, lr)?;
                let u = Instant::now();
                self.update_banks(&features, batch)?;
                (ms(t, u), 0.0, ms(u, Instant::now()))
            }
            TrainMode::Il | TrainMode::IlNoIsg => {
                let t = Instant::now();
                self.backward_and_step(loss, &fwd.params, lr)?;
                let u = Instant::now();
                debug_assert!(self.tape.is_empty());
                let features = self.second_forward(&batch.images)?;
                let v = Instant::now();
                self.update_banks(&features, batch)?;
                (ms(t, u), ms(u, v), ms(v, Instant::now()))
            }
            TrainMode::IlFfb => {
                let t = Instant::now();
                let features = self.second_forward(&batch.images)?;
                let u = Instant::now();
                self.update_banks(&features, batch)?;
                let v = Instant::now();
                self.backward_and_step(loss, &fwd.params, lr)?;
                (ms(v, Instant::now()), ms(t, u), ms(u, v))
            }
        };
        Ok(IterationRecord {
            loss: loss_value,
            per_domain,
            forward_ms: ms(t0, t1),
            backward_ms: t_bwd,
            second_forward_ms: t_second,
            bank_update_ms: t_bank,
            total_ms: ms(t0, Instant::now()),
        })
    }

    /// Untaped forward of the current model; stylized unless the mode
    /// disables the stylizer.
    fn second_forward(&mut self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let stylizer = (self.config.mode != TrainMode::IlNoIsg).then_some(&mut self.stylizer);
        let out = self.backbone.forward(&mut Eager, images, stylizer, self.config.insertion, true)?;
        Ok(out.embeddings)
    }
}

/// Final state of a training run.
pub struct TrainOutcome {
    pub backbone: Backbone<f32>,
    pub banks: Vec<MemoryBank<f32>>,
    pub metrics: Vec<RunMetrics>,
}

/// Trains for `config.epochs`, evaluating on the target domain after each
/// epoch (or once, for zero epochs) and handing every record to `sink`.
pub fn fit(config: &TrainConfig, data: &Dataset, mut sink: impl FnMut(&RunMetrics) -> Result<()>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    let mut metrics = Vec::new();
    let mut emit = |m: RunMetrics| -> Result<()> {
        sink(&m)?;
        metrics.push(m);
        Ok(())
    };
    if config.epochs == 0 {
        let eval = evaluate_domain(&trainer.backbone, data.target())?;
        emit(RunMetrics {
            epoch: 0,
            mode: config.mode,
            seed: config.seed,
            mean_loss: None,
            lr: config.lr_at(0),
            iter_time_ms: None,
            map_target: eval.map,
            rank1_target: eval.rank1,
        })?;
    }
    let iters = trainer.iterations_per_epoch(data);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let (mut loss, mut time) = (0.0, 0.0);
        for _ in 0..iters {
            let batch = trainer.sample(data)?;
            let rec = trainer.step(&batch, lr)?;
            loss += rec.loss;
            time += rec.total_ms;
        }
        let eval = evaluate_domain(&trainer.backbone, data.target())?;
        emit(RunMetrics {
            epoch: epoch + 1,
            mode: config.mode,
            seed: config.seed,
            mean_loss: Some(loss / iters as f64),
            lr,
            iter_time_ms: config.record_timing.then_some(time / iters as f64),
            map_target: eval.map,
            rank1_target: eval.rank1,
        })?;
    }
    Ok(TrainOutcome { backbone: trainer.backbone, banks: trainer.banks, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::memory::embed_all;

    fn tiny_data() -> Dataset {
        Dataset::generate(&DatasetSpec { identities_per_domain: 6, images_per_identity: 4, ..Default::default() }).unwrap()
    }

    fn tiny_config(mode: TrainMode) -> TrainConfig {
        TrainConfig { p: 3, k: 2, epochs: 2, iters_per_epoch: Some(2), ..TrainConfig::for_mode(mode) }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainConfig::default();
        assert!((c.lr_at(0) - 3.5e-5).abs() < 1e-12);
        assert!(c.lr_at(1) < c.lr_at(2) && c.lr_at(2) < c.lr_at(3));
        assert_eq!(c.lr_at(3), 3.5e-4);
        assert_eq!(c.lr_at(14), 3.5e-4);
        assert!((c.lr_at(15) - 3.5e-5).abs() < 1e-15);
        assert!((c.lr_at(29) - 3.5e-6).abs() < 1e-15);
    }

    #[test]
    fn mode_defaults_and_validation() {
        assert_eq!(TrainConfig::for_mode(TrainMode::Aug).stylizer.p, 0.5);
        assert_eq!(TrainConfig::for_mode(TrainMode::Il).stylizer.p, 1.0);
        let mut c = TrainConfig::default();
        c.stylizer.method = StyleMethod::None;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.mode = TrainMode::Baseline;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn first_loss_matches_a_naive_softmax() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_config(TrainMode::Baseline), &data).unwrap();
        let batch = t.sample(&data).unwrap();
        let emb = embed_all(&t.backbone, &batch.images, 64).unwrap();
        let mut expected = 0.0;
        for (d, start, labels) in &batch.parts {
            let protos = t.banks[*d].prototypes();
            let tau = t.banks[*d].temperature() as f64;
            let mut l = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let f = emb.row(start + i);
                let logits: Vec<f64> = (0..protos.shape()[0])
                    .map(|c| f.iter().zip(protos.row(c)).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / tau)
                    .collect();
                let z: f64 = logits.iter().map(|v| v.exp()).sum();
                l -= (logits[y].exp() / z).ln();
            }
            expected += l / labels.len() as f64;
        }
        expected /= batch.parts.len() as f64;
        let rec = t.step(&batch, 0.0).unwrap();
        assert!((rec.loss - expected).abs() < 1e-4 * expected.max(1.0), "{} vs {expected}", rec.loss);
    }

    #[test]
    fn frozen_model_bank_update_matches_hand_oracle() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_config(TrainMode::Il), &data).unwrap();
        let batch = t.sample(&data).unwrap();
        let before: Vec<Tensor<f32>> = t.banks.iter().map(|b| b.prototypes().clone()).collect();
        let mut stylizer = t.stylizer.clone();
        let fhat = t.backbone.forward(&mut Eager, &batch.images, Some(&mut stylizer), t.config.insertion, true).unwrap().embeddings;
        t.step(&batch, 0.0).unwrap();
        assert!(t.tape().is_empty());
        let eta = t.config.momentum;
        for (d, start, labels) in &batch.parts {
            let mut protos: Vec<Vec<f64>> =
                (0..before[*d].shape()[0]).map(|c| before[*d].row(c).iter().map(|&v| v as f64).collect()).collect();
            for (i, &y) in labels.iter().enumerate() {
                let f = fhat.row(start + i);
                let c = &mut protos[y];
                c.iter_mut().zip(f).for_each(|(c, &f)| *c = eta * *c + (1.0 - eta) * f as f64);
                let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
                c.iter_mut().for_each(|v| *v /= n);
            }
            let got = t.banks[*d].prototypes();
            for (k, row) in protos.iter().enumerate() {
                for (a, b) in row.iter().zip(got.row(k)) {
                    assert!((a - *b as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn only_batch_identities_move() {
        let data = tiny_data();
        for mode in TrainMode::ALL {
            let mut t = Trainer::new(tiny_config(mode), &data).unwrap();
            let batch = t.sample(&data).unwrap();
            let before: Vec<Tensor<f32>> = t.banks.iter().map(|b| b.prototypes().clone()).collect();
            t.step(&batch, 1e-3).unwrap();
            for (d, _, labels) in &batch.parts {
                for k in 0..before[*d].shape()[0] {
                    let moved = before[*d].row(k) != t.banks[*d].prototypes().row(k);
                    assert_eq!(moved, labels.contains(&k), "{mode:?} domain {d} class {k}");
                }
            }
        }
    }

    #[test]
    fn il_and_ffb_agree_when_frozen() {
        let data = tiny_data();
        let run = |mode| {
            let mut t = Trainer::new(tiny_config(mode), &data).unwrap();
            let mut losses = Vec::new();
            for _ in 0..3 {
                let batch = t.sample(&data).unwrap();
                losses.push(t.step(&batch, 0.0).unwrap().loss);
            }
            (losses, t.banks.iter().map(|b| b.prototypes().clone()).collect::<Vec<_>>())
        };
        assert_eq!(run(TrainMode::Il), run(TrainMode::IlFfb));
    }

    #[test]
    fn il_without_isg_still_updates_banks() {
        let data = tiny_data();
        let mut t = Trainer::new(tiny_config(TrainMode::IlNoIsg), &data).unwrap();
        let batch = t.sample(&data).unwrap();
        let before = t.banks[0].prototypes().clone();
        let mut plain = t.backbone.clone();
        t.step(&batch, 1e-3).unwrap();
        assert_ne!(&before, t.banks[0].prototypes());
        // the update used the post-step model without stylization
        plain.load_state(t.backbone.named_parameters()).unwrap();
        let expected = plain.embed(&mut Eager, &batch.images).unwrap();
        let mut bank = MemoryBank::new(0, before, t.config.momentum, t.config.temperature).unwrap();
        let (_, start, labels) = &batch.parts[0];
        let rows = crate::tensor::kernels::slice_rows(&expected, *start, start + labels.len()).unwrap();
        bank.update(&rows, labels, UpdateRule::Sequential).unwrap();
        assert_eq!(bank.prototypes(), t.banks[0].prototypes());
    }

    #[test]
    fn zero_epochs_yields_one_record() {
        let data = tiny_data();
        let out = fit(&TrainConfig { epochs: 0, ..tiny_config(TrainMode::Il) }, &data, |_| Ok(())).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].epoch, 0);
        assert!(out.metrics[0].mean_loss.is_none());
    }

    #[test]
    fn runs_are_deterministic() {
        let data = tiny_data();
        for mode in TrainMode::ALL {
            let a = fit(&tiny_config(mode), &data, |_| Ok(())).unwrap();
            let b = fit(&tiny_config(mode), &data, |_| Ok(())).unwrap();
            let lines = |o: &TrainOutcome| o.metrics.iter().map(RunMetrics::to_json_line).collect::<Vec<_>>();
            assert_eq!(lines(&a), lines(&b));
            assert_eq!(a.metrics.len(), 2);
        }
    }

    #[test]
    fn prototypes_stay_unit_norm() {
        let data = tiny_data();
        let out = fit(&tiny_config(TrainMode::Il), &data, |_| Ok(())).unwrap();
        for bank in &out.banks {
            for k in 0..bank.num_classes() {
                let n = bank.prototypes().row(k).iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
    }
}
