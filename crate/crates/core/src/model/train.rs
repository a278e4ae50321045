use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use rustfft::FftPlanner;

use super::graph::Tensor;
use super::{round_f32, DualNetModel, Example, ModelConfig};
use crate::augment::{augment_batch, gaussian_balance, smote_balance, AugmentPolicy};
use crate::dataio::histogram;
use crate::error::{Error, Result};
use crate::preprocess::{spectrogram_with, PreprocessConfig, Spectrogram};
use crate::rng::{substream_seed, SplitMix64};
use crate::types::{EcgRecord, Label, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Balance {
    None,
    Smote,
    Gaussian,
}

impl Balance {
    pub fn as_str(self) -> &'static str {
        match self {
            Balance::None => "none",
            Balance::Smote => "smote",
            Balance::Gaussian => "gaussian",
        }
    }
}

impl FromStr for Balance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Balance::None),
            "smote" => Ok(Balance::Smote),
            "gaussian" => Ok(Balance::Gaussian),
            _ => Err(Error::Config(format!("balance must be none, smote or gaussian, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay on weight matrices and kernels.
    pub weight_decay: f64,
    pub augment: bool,
    pub balance: Balance,
    /// Neighbours considered by SMOTE.
    pub smote_k: usize,
    /// Jitter scale of Gaussian balancing, relative to each record's std.
    pub gaussian_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            augment: false,
            balance: Balance::None,
            smote_k: 5,
            gaussian_sigma: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DualNetModel,
    pub history: Vec<EpochMetrics>,
    /// Class counts after balancing.
    pub class_counts: BTreeMap<Label, usize>,
}

/// Adam with bias correction. Parameters are kept at single precision after
/// every step.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    cfg: TrainConfig,
}

impl Adam {
    pub fn new(model: &DualNetModel, cfg: &TrainConfig) -> Self {
        Self {
            m: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
            cfg: cfg.clone(),
        }
    }

    pub fn step(&mut self, model: &mut DualNetModel, grads: &[Tensor]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let trainable: Vec<bool> = (0..grads.len()).map(|i| model.is_trainable(i)).collect();
        for (i, (p, g)) in model.tensors_mut().iter_mut().zip(grads).enumerate() {
            if !trainable[i] {
                continue;
            }
            let decay = if p.shape.len() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                let w = p.data[j] * (1.0 - c.learning_rate * decay) - c.learning_rate * update;
                p.data[j] = round_f32(w);
            }
        }
    }
}

fn spectrograms(records: &[EcgRecord], pre: &PreprocessConfig) -> Result<Vec<Spectrogram>> {
    records
        .par_iter()
        .map_init(FftPlanner::new, |planner, r| {
            spectrogram_with(&r.samples, r.fs_hz, pre.spec_window, pre.spec_hop, planner)
        })
        .collect()
}

/// Trains a fresh model on preprocessed records. See [`train_with`].
pub fn train(
    dataset: &[EcgRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    policy: &AugmentPolicy,
    pre: &PreprocessConfig,
) -> Result<TrainOutcome> {
    train_with(dataset, model_cfg, train_cfg, policy, pre, |_| {})
}

/// Trains a fresh model, calling `on_epoch` after every epoch.
///
/// Balancing runs once up front. Each epoch shuffles the (balanced) set and,
/// with augmentation on, passes every record through a freshly sampled
/// augmentation. All randomness derives from `train_cfg.seed`.
pub fn train_with(
    dataset: &[EcgRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    policy: &AugmentPolicy,
    pre: &PreprocessConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    policy.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for r in dataset {
        if r.label.is_none() {
            return Err(Error::InvalidArgument(format!("record {} has no label", r.id)));
        }
        if r.len() != model_cfg.input_len {
            return Err(Error::Shape(format!(
                "record {} has {} samples, model expects {}",
                r.id,
                r.len(),
                model_cfg.input_len
            )));
        }
    }
    let seed = train_cfg.seed;
    let mut model = DualNetModel::new(model_cfg.clone(), substream_seed(seed, 0))?;
    let mut balance_rng = SplitMix64::substream(seed, 1);
    let data = match train_cfg.balance {
        Balance::None => dataset.to_vec(),
        Balance::Smote => smote_balance(dataset, train_cfg.smote_k, &mut balance_rng)?,
        Balance::Gaussian => gaussian_balance(dataset, train_cfg.gaussian_sigma, &mut balance_rng)?,
    };
    let class_counts = histogram(data.iter().filter_map(|r| r.label));
    let mut history = Vec::with_capacity(train_cfg.epochs);
    if train_cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history,
            class_counts,
        });
    }

    let fixed_specs = if train_cfg.augment { None } else { Some(spectrograms(&data, pre)?) };
    let mut adam = Adam::new(&model, train_cfg);
    let mut step = 0;
    for epoch in 0..train_cfg.epochs {
        let epoch_seed = substream_seed(seed, 2 + epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        SplitMix64::substream(epoch_seed, 0).shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<EcgRecord> = idx.iter().map(|&i| data[i].clone()).collect();
            let (signals, specs) = match &fixed_specs {
                Some(all) => (batch, idx.iter().map(|&i| all[i].clone()).collect()),
                None => {
                    let aug = augment_batch(&batch, policy, substream_seed(epoch_seed, 1 + 2 * b as u64))?;
                    let specs = spectrograms(&aug, pre)?;
                    (aug, specs)
                }
            };
            let examples: Vec<Example> = signals
                .iter()
                .zip(&specs)
                .map(|(r, s)| Example {
                    signal: &r.samples,
                    spec: s,
                    label: r.label.expect("labels checked above"),
                })
                .collect();
            let mut dropout = SplitMix64::substream(epoch_seed, 2 + 2 * b as u64);
            let out = model.gradients(&examples, Mode::Train, Some(&mut dropout)).map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    loss,
                },
                other => other,
            })?;
            loss_sum += out.loss * examples.len() as f64;
            correct += out
                .probs
                .iter()
                .zip(&examples)
                .filter(|(p, e)| p.argmax() == e.label)
                .count();
            adam.step(&mut model, &out.grads);
            model.update_running_stats(&out.batch_stats);
            step += 1;
        }
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(TrainOutcome {
        model,
        history,
        class_counts,
    })
}
