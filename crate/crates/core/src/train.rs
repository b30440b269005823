//! Grouped AdamW, augmentation, the training loop and evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardOptions, Model};
use crate::dataset::{self, Dataset, Image, Split};
use crate::error::{Error, Result};
use crate::moe::{utilization_from_counts, RoutingRecord};
use crate::params::{ParamGroup, ParamSet};
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_moe: f64,
    pub lr_classifier: f64,
    pub lr_rest: f64,
    pub wd_classifier: f64,
    pub wd_other: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_moe: 0.005,
            lr_classifier: 1e-5,
            lr_rest: 5e-5,
            wd_classifier: 1e-8,
            wd_other: 0.0,
            betas: (0.9, 0.99),
            eps: 1e-8,
            batch_size: 32,
            epochs: 80,
        }
    }
}

impl OptimConfig {
    /// One learning rate for every group.
    pub fn uniform(lr: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            lr_moe: lr,
            lr_classifier: lr,
            lr_rest: lr,
            wd_classifier: 0.0,
            batch_size,
            epochs,
            ..Self::default()
        }
    }

    pub fn group(&self, g: ParamGroup) -> (f64, f64) {
        match g {
            ParamGroup::Moe => (self.lr_moe, self.wd_other),
            ParamGroup::Classifier => (self.lr_classifier, self.wd_classifier),
            ParamGroup::Rest => (self.lr_rest, self.wd_other),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_moe, self.lr_classifier, self.lr_rest];
        if lrs.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub mixup_alpha: f64,
    pub classifier_dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            mixup_alpha: 0.2,
            classifier_dropout: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            hflip_p: 0.0,
            mixup_alpha: 0.0,
            classifier_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_p) || !(0.0..1.0).contains(&self.classifier_dropout) {
            return Err(Error::Config("augment probabilities must lie in [0, 1]".into()));
        }
        if !(self.mixup_alpha >= 0.0) {
            return Err(Error::Config("mixup_alpha must be non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let z: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// Decoupled-weight-decay Adam with per-group learning rates; clamped
/// parameters are projected back into range afterwards.
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.value.shape() || state.m[i].shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{}: param {:?}, grad {:?}", p.name, p.value.shape(), g.shape()),
            ));
        }
        let (lr, wd) = cfg.group(p.group);
        let (lr_t, wd_t) = (T::c(lr), T::c(lr * wd));
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (w, &gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = T::c(b1) * m[k] + T::c(1.0 - b1) * gk;
            v[k] = T::c(b2) * v[k] + T::c(1.0 - b2) * gk * gk;
            let mhat = m[k] / T::c(bc1);
            let vhat = v[k] / T::c(bc2);
            *w -= wd_t * *w;
            *w = *w - lr_t * mhat / (vhat.sqrt() + T::c(cfg.eps));
        }
        if let Some((lo, hi)) = p.clamp {
            for w in p.value.data_mut() {
                *w = num_traits::clamp(*w, T::c(lo), T::c(hi));
            }
        }
    }
    Ok(())
}

/// Mirrors the image along its width with probability `p`.
pub fn hflip(image: &Image, p: f64, rng: &mut SeededRng) -> Image {
    if rng.bernoulli(p) {
        image.flipped()
    } else {
        image.clone()
    }
}

/// `λ ~ Beta(α, α)`; each sample is blended with a random partner. `α = 0`
/// gives `λ = 1` (no mixing).
pub fn mixup<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    alpha: f64,
    rng: &mut SeededRng,
) -> Result<(Tensor<T>, Tensor<T>, f64)> {
    let b = x.shape().first().copied().unwrap_or(0);
    if y.shape().first() != Some(&b) {
        return Err(Error::shape("mixup", format!("x {:?}, y {:?}", x.shape(), y.shape())));
    }
    let lambda = rng.beta_symmetric(alpha);
    let perm = rng.permutation(b);
    let blend = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let stride = t.numel() / b.max(1);
        let mut out = t.data().to_vec();
        let (l, r) = (T::c(lambda), T::c(1.0 - lambda));
        for i in 0..b {
            let j = perm[i];
            for k in 0..stride {
                out[i * stride + k] = l * t.data()[i * stride + k] + r * t.data()[j * stride + k];
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    };
    Ok((blend(x)?, blend(y)?, lambda))
}

pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.row_mut(i)[l] = T::one();
    }
    t
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Routing counts accumulated over batches, per MoE layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTally {
    pub layers: Vec<(usize, Vec<usize>)>,
}

impl RoutingTally {
    pub fn add(&mut self, records: &[(usize, RoutingRecord)]) {
        for (l, r) in records {
            match self.layers.iter_mut().find(|(k, _)| k == l) {
                Some((_, c)) => {
                    for (a, b) in c.iter_mut().zip(&r.counts) {
                        *a += b;
                    }
                }
                None => self.layers.push((*l, r.counts.clone())),
            }
        }
    }

    pub fn entropies(&self) -> Vec<(usize, f64)> {
        self.layers
            .iter()
            .map(|(l, c)| (*l, utilization_from_counts(c).entropy))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub top1: f64,
    /// `None` for classes absent from the evaluated split.
    pub per_class: Vec<Option<f64>>,
    pub routing: RoutingTally,
    pub predictions: Vec<usize>,
}

/// Evaluation-mode metrics on `indices` (dropout off, no augmentation).
pub fn evaluate<T: Real>(model: &Model<T>, ds: &Dataset, indices: &[usize], batch_size: usize) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    let classes = model.config.num_classes;
    let mut loss = 0.0;
    let mut correct = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    let mut routing = RoutingTally::default();
    let mut predictions = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let imgs: Vec<&Image> = chunk.iter().map(|&i| &ds.items[i].image).collect();
        let x = dataset::images_to_tensor::<T>(&imgs)?;
        let (logits, records) = model.predict(&x)?;
        routing.add(&records);
        for (r, &i) in chunk.iter().enumerate() {
            let row = logits.row(r);
            let label = ds.items[i].class;
            if label >= classes {
                return Err(Error::Data(format!("label {label} with {classes} model classes")));
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[label].as_f64();
            let pred = argmax(row);
            predictions.push(pred);
            seen[label] += 1;
            if pred == label {
                correct[label] += 1;
            }
        }
    }
    let n = indices.len();
    Ok(EvalReport {
        samples: n,
        loss: loss / n as f64,
        top1: correct.iter().sum::<usize>() as f64 / n as f64,
        per_class: seen
            .iter()
            .zip(&correct)
            .map(|(&s, &c)| (s > 0).then(|| c as f64 / s as f64))
            .collect(),
        routing,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub entropies: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let layers: Vec<usize> = self
            .rows
            .iter()
            .flat_map(|r| r.entropies.iter().map(|(l, _)| *l))
            .fold(Vec::new(), |mut v, l| {
                if !v.contains(&l) {
                    v.push(l);
                }
                v
            });
        let mut s = String::from("epoch,split,loss,top1");
        for l in &layers {
            let _ = write!(s, ",expert_entropy_layer_{l}");
        }
        s.push('\n');
        for r in &self.rows {
            let split = match r.split {
                Split::Train => "train",
                Split::Val => "val",
            };
            let _ = write!(s, "{},{split},{:.6},{:.6}", r.epoch, r.loss, r.top1);
            for l in &layers {
                match r.entropies.iter().find(|(k, _)| k == l) {
                    Some((_, e)) => {
                        let _ = write!(s, ",{e:.6}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn last(&self, split: Split) -> Option<&EpochMetrics> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from 1 to 0 over the planned steps.
    Cosine,
}

impl Schedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl OptimConfig {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lr_moe: self.lr_moe * factor,
            lr_classifier: self.lr_classifier * factor,
            lr_rest: self.lr_rest * factor,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub schedule: Schedule,
    pub seed: u64,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    pub eval_batch_size: usize,
}

/// Trains `model` in place on the training split and evaluates on the
/// validation split after every epoch.
pub fn train<T: Real>(model: &mut Model<T>, ds: &Dataset, cfg: &TrainConfig) -> Result<MetricsLog> {
    cfg.optim.validate()?;
    cfg.augment.validate()?;
    let train_idx = ds.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    if ds.num_classes() > model.config.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model {}",
            ds.num_classes(),
            model.config.num_classes
        )));
    }
    let val_idx = ds.split_indices(Split::Val);
    model.config.classifier_dropout = cfg.augment.classifier_dropout;
    let root = SeededRng::new(cfg.seed);
    let mut state = AdamState::new(&model.params);
    let mut log = MetricsLog::default();
    let mut steps = 0usize;
    let per_epoch = train_idx.len().div_ceil(cfg.optim.batch_size);
    let planned = cfg
        .max_steps
        .map_or(per_epoch * cfg.optim.epochs, |m| m.min(per_epoch * cfg.optim.epochs));
    'epochs: for epoch in 0..cfg.optim.epochs {
        let mut order = train_idx.clone();
        root.derive(&[0xE90C, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0.0;
        let mut seen = 0usize;
        let mut tally = RoutingTally::default();
        for (b, chunk) in order.chunks(cfg.optim.batch_size).enumerate() {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break 'epochs;
            }
            let mut rng = root.derive(&[0xBA7C, epoch as u64, b as u64]);
            let imgs: Vec<Image> = chunk
                .iter()
                .map(|&i| hflip(&ds.items[i].image, cfg.augment.hflip_p, &mut rng))
                .collect();
            let refs: Vec<&Image> = imgs.iter().collect();
            let x = dataset::images_to_tensor::<T>(&refs)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.items[i].class).collect();
            let y = one_hot::<T>(&labels, model.config.num_classes);
            let (x, y, _) = mixup(&x, &y, cfg.augment.mixup_alpha, &mut rng)?;

            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, true);
            let opts = ForwardOptions {
                train: true,
                dropout_seed: Some(rng.next_u64()),
                ..Default::default()
            };
            let out = model.forward(&mut tape, &vars, &x, &opts)?;
            let logits = out.logits.expect("full forward");
            let loss = tape.soft_cross_entropy(logits, y.clone())?;
            let lv = tape.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("loss {lv} at epoch {epoch}, batch {b}")));
            }
            for r in 0..chunk.len() {
                if argmax(tape.value(logits).row(r)) == argmax(y.row(r)) {
                    correct += 1.0;
                }
            }
            tally.add(&out.routing);
            let mut grads = tape.backward(loss)?;
            let g = model.params.collect_grads(&vars, &mut grads);
            if let Some(bad) = g.iter().position(|t| !t.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for {} at epoch {epoch}, batch {b}",
                    model.params.iter().nth(bad).unwrap().name
                )));
            }
            let step_cfg = match cfg.schedule {
                Schedule::Constant => cfg.optim.clone(),
                s => cfg.optim.scaled(s.factor(steps, planned)),
            };
            adamw_step(&mut model.params, &g, &mut state, &step_cfg)?;
            loss_sum += lv * chunk.len() as f64;
            seen += chunk.len();
            steps += 1;
        }
        if seen > 0 {
            log.rows.push(EpochMetrics {
                epoch,
                split: Split::Train,
                loss: loss_sum / seen as f64,
                top1: correct / seen as f64,
                entropies: tally.entropies(),
            });
        }
        if !val_idx.is_empty() {
            let r = evaluate(model, ds, &val_idx, cfg.eval_batch_size)?;
            log.rows.push(EpochMetrics {
                epoch,
                split: Split::Val,
                loss: r.loss,
                top1: r.top1,
                entropies: r.routing.entropies(),
            });
        }
    }
    Ok(log)
}
