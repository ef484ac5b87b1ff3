//! Synthetic sub-patch orientation dataset and a minimal AdamW training loop.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Tape};
use crate::blocks::Model;
use crate::error::{config_err, contract_err, shape_err, Error, Result};
use crate::nn::{ParamKind, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Each class is a grating with a class-specific orientation whose period
    /// is shorter than a sub-patch.
    SubpatchOrientation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub classes: usize,
    pub image_size: usize,
    pub p: usize,
    pub alpha: usize,
    pub seed: u64,
    pub generator: Generator,
    /// Grating period in pixels; must be below `p / alpha`.
    pub period: f64,
    /// Phase is drawn uniformly from `[-phase_jitter, phase_jitter]` radians.
    pub phase_jitter: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 256,
            classes: 4,
            image_size: 32,
            p: 8,
            alpha: 2,
            seed: 0,
            generator: Generator::SubpatchOrientation,
            period: 3.0,
            phase_jitter: core::f64::consts::FRAC_PI_4,
            noise: 0.1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(config_err!("dataset needs at least one class"));
        }
        if self.p == 0 || self.alpha == 0 || self.p % self.alpha != 0 {
            return Err(config_err!("patch {} must be a positive multiple of alpha {}", self.p, self.alpha));
        }
        if self.image_size == 0 || self.image_size % self.p != 0 {
            return Err(config_err!("image size {} is not divisible by patch {}", self.image_size, self.p));
        }
        let sub = (self.p / self.alpha) as f64;
        if !(self.period > 0.0 && self.period < sub) {
            return Err(config_err!("period {} must lie in (0, {sub}) to stay below sub-patch scale", self.period));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.phase_jitter >= 0.0 && self.phase_jitter.is_finite()) {
            return Err(config_err!("noise and phase jitter must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `(n, 3, S, S)` pixels; may be empty.
    pub pixels: Vec<f64>,
    pub image_size: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<f64>, image_size: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if image_size == 0 || pixels.len() != labels.len() * 3 * image_size * image_size {
            return Err(shape_err!("{} pixels do not hold {} images of size {image_size}", pixels.len(), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(contract_err!("label {l} out of range for {classes} classes"));
        }
        Ok(Self { pixels, image_size, labels, classes })
    }

    pub fn from_tensor(images: &Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(shape_err!("expected (n,3,S,S) images, got {s:?}"));
        }
        Self::new(images.data().to_vec(), s[2], labels, classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    /// Image `i` as a `(1, 3, S, S)` tensor.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.batch(&[i]).map(|b| b.0)
    }

    /// Images at `indices` stacked along the batch axis, with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(contract_err!("sample {i} out of range for {} samples", self.len()));
            }
            data.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        let images = Tensor::new(&[indices.len(), 3, self.image_size, self.image_size], data)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Sample `i` has label `i mod classes`, so labels are balanced within ±1.
/// All three channels carry the same grating
/// `sin(2π(x·cosθ + y·sinθ)/period + φ)` with `θ = π·label/classes`, plus
/// independent noise per channel.
pub fn make_synthetic_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.image_size;
    let mut rng = rng::seeded(spec.seed);
    let mut data = Vec::with_capacity(spec.n_samples * 3 * s * s);
    let mut labels = Vec::with_capacity(spec.n_samples);
    let tau = 2.0 * core::f64::consts::PI;
    for i in 0..spec.n_samples {
        let label = i % spec.classes;
        let theta = core::f64::consts::PI * label as f64 / spec.classes as f64;
        let (dy, dx) = libm::sincos(theta);
        let phase = rng::uniform(&mut rng, -spec.phase_jitter, spec.phase_jitter);
        for _ in 0..3 {
            for y in 0..s {
                for x in 0..s {
                    let v = libm::sin(tau * (x as f64 * dx + y as f64 * dy) / spec.period + phase);
                    let n = if spec.noise > 0.0 { spec.noise * rng::normal(&mut rng) } else { 0.0 };
                    data.push(v + n);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(data, s, labels, spec.classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to weight and embedding tensors only.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Linear learning-rate warmup over this many epochs, then constant.
    pub warmup_epochs: usize,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Adamw,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 200,
            batch: 32,
            warmup_epochs: 0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if self.batch == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(config_err!("invalid adam moments or epsilon"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("weight decay must be finite and non-negative"));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.lr * (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            self.lr
        }
    }
}

/// AdamW state: first and second moments per parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        Self { cfg: cfg.clone(), m: zeros.clone(), v: zeros, step: 0 }
    }

    /// One update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - libm::pow(b1, self.step as f64);
        let c2 = 1.0 - libm::pow(b2, self.step as f64);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let decay = matches!(params.entries()[i].kind, ParamKind::Weight | ParamKind::Embedding);
            let t = params.tensor_mut(id);
            let g = match t.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let update = (m[j] / c1) / (libm::sqrt(v[j] / c2) + self.cfg.eps);
                let wd = if decay { self.cfg.weight_decay * *p } else { 0.0 };
                *p -= lr * (update + wd);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the dataset after the epoch's updates.
    pub loss: f64,
    /// Accuracy over the dataset after the epoch's updates.
    pub train_acc: f64,
    /// Lowest `loss` seen so far.
    pub best_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Parameters at `best_epoch`.
    pub best_params: ParamSet,
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let size = model.cfg.image_size;
    if data.image_size != size {
        return Err(shape_err!("model expects {size}x{size} images, dataset has {}", data.image_size));
    }
    if data.classes != model.cfg.classes {
        return Err(contract_err!("dataset has {} classes, model predicts {}", data.classes, model.cfg.classes));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 64;

/// Mean cross-entropy and argmax accuracy over the whole dataset.
pub fn loss_and_accuracy(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(contract_err!("cannot evaluate on an empty dataset"));
    }
    check_compatible(model, data)?;
    let (mut loss, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &model.params);
        let x = cx.constant(images);
        let logits = model.logits(&mut cx, x)?;
        let l = cx.cross_entropy(logits, &labels)?;
        loss += cx.value(l).data()[0] * chunk.len() as f64;
        let k = model.cfg.classes;
        for (row, &y) in cx.value(logits).data().chunks(k).zip(&labels) {
            correct += usize::from(argmax(row) == y);
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    Ok(loss_and_accuracy(model, data)?.1)
}

/// Minimizes cross-entropy with AdamW, shuffling every epoch. The model keeps
/// its final parameters; the best epoch (lowest loss, earliest on ties) is
/// returned alongside the history.
pub fn train(model: &mut Model, data: &Dataset, opt: &OptimizerConfig) -> Result<TrainOutcome> {
    opt.validate()?;
    if data.is_empty() {
        return Err(contract_err!("cannot train on an empty dataset"));
    }
    check_compatible(model, data)?;
    let mut adam = AdamW::new(opt, &model.params);
    let mut rng = rng::seeded(opt.seed);
    let mut history = Vec::with_capacity(opt.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    for epoch in 0..opt.epochs {
        let order = rng::permutation(&mut rng, data.len());
        let lr = opt.lr_at(epoch);
        for chunk in order.chunks(opt.batch) {
            let (images, labels) = data.batch(chunk)?;
            model.params.zero_grads();
            let mut tape = Tape::new();
            let step = (|| {
                let mut cx = Ctx::new(&mut tape, &model.params);
                let x = cx.constant(images);
                let logits = model.logits(&mut cx, x)?;
                let loss = cx.cross_entropy(logits, &labels)?;
                let value = cx.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, loss: value });
                }
                cx.backward(loss)
            })();
            match step {
                Err(Error::Numeric(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                other => other?,
            }
            model.params.absorb_grads(&tape)?;
            adam.step(&mut model.params, lr);
            if model.params.entries().iter().any(|e| !e.tensor.is_finite()) {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
        }
        let (loss, train_acc) = match loss_and_accuracy(model, data) {
            Ok(r) => r,
            Err(Error::Numeric(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        if best.as_ref().is_none_or(|b| loss < b.1) {
            best = Some((epoch, loss, model.params.clone()));
        }
        let best_loss = best.as_ref().map_or(loss, |b| b.1);
        history.push(EpochStats { epoch, loss, train_acc, best_loss });
    }
    let (best_epoch, best_params) = match best {
        Some((e, _, p)) => (e, p),
        None => (0, model.params.clone()),
    };
    Ok(TrainOutcome { history, best_epoch, best_params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{build_model, ModelConfig};

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn labels_are_balanced() {
        let spec = DatasetSpec { n_samples: 10, classes: 4, ..Default::default() };
        let d = make_synthetic_dataset(&spec).unwrap();
        let mut counts = [0usize; 4];
        d.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn period_must_stay_below_sub_patch() {
        let spec = DatasetSpec { period: 4.0, ..Default::default() };
        assert!(matches!(make_synthetic_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn empty_dataset_is_a_contract_error() {
        let model = build_model(&ModelConfig::tiny_mixer(), 0).unwrap();
        let d = Dataset::new(vec![], 32, vec![], 4).unwrap();
        assert!(matches!(evaluate(&model, &d), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut model = build_model(&ModelConfig::tiny_mixer(), 0).unwrap();
        let before = model.params.clone();
        let d = make_synthetic_dataset(&DatasetSpec { n_samples: 8, ..Default::default() }).unwrap();
        let opt = OptimizerConfig { lr: 0.0, epochs: 2, batch: 4, ..Default::default() };
        let out = train(&mut model, &d, &opt).unwrap();
        assert_eq!(out.history[0].loss, out.history[1].loss);
        for (a, b) in before.entries().iter().zip(model.params.entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }
}
