//! Toy-scale training: synthetic data, per-sample graphs with a fixed-order gradient
//! sum, AdamW, Bayar re-projection after every step and the plateau schedule.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{model_tensors, read_tensor_file, restore_model, write_tensor_file};
use crate::config::ModelConfig;
use crate::data::{augment, derive_seed, synth_set, AugmentConfig, Sample, TamperKind};
use crate::decoder::{predict_mask, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{combined_recorded, LossConfig};
use crate::metrics::Confusion;
use crate::model::Forma;
use crate::optim::{AdamW, LrSchedule, PlateauMode};
use crate::tensor::Tensor;

// stream tags for derive_seed
const MODEL_STREAM: u64 = 0x4d4f_4445_4c00;
const DATA_STREAM: u64 = 0x4441_5441_0000;
const ORDER_STREAM: u64 = 0x4f52_4445_5200;
const BATCH_STREAM: u64 = 0x4241_5443_4800;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Size of the synthetic training set.
    pub samples: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Plateau patience and decay factor, in epochs.
    pub patience: u32,
    pub factor: f64,
    pub seed: u64,
    /// Tamper kinds of the training set, cycled.
    pub kinds: Vec<TamperKind>,
    /// `None` trains on the clean samples.
    pub augment: Option<AugmentConfig>,
    pub loss: LossConfig,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            batch_size: 8,
            steps: 500,
            lr: 1e-4,
            weight_decay: 1e-2,
            patience: 3,
            factor: 0.1,
            seed: 0,
            kinds: TamperKind::TAMPERED.to_vec(),
            augment: Some(AugmentConfig::default()),
            loss: LossConfig::default(),
            tau: DEFAULT_TAU,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.batch_size == 0 {
            return Err(Error::Usage("samples and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Usage("learning rate must be positive and decay non-negative".into()));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Usage("plateau factor must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Usage(format!("threshold {} outside [0, 1]", self.tau)));
        }
        if self.kinds.is_empty() {
            return Err(Error::Usage("no tamper kinds given".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples.div_ceil(self.batch_size)
    }

    /// Seed of the synthetic training set.
    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, DATA_STREAM)
    }

    /// Seed of the model initialization.
    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, MODEL_STREAM)
    }
}

/// What one optimizer step saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub epoch: u64,
    /// Mean combined loss over the batch, before the update.
    pub loss: f64,
    /// Learning rate used by the update.
    pub lr: f64,
    /// Mean per-image F1 / IoU of the batch predictions, before the update.
    pub f1: f64,
    pub iou: f64,
    pub batch_seed: u64,
    /// Set on the last step of an epoch, with the epoch's mean loss.
    pub epoch_loss: Option<f64>,
}

struct SampleResult {
    loss: f64,
    confusion: Confusion,
    grads: Vec<Option<Vec<f64>>>,
}

/// Loss, prediction quality and parameter gradients for one sample.
fn sample_gradients(model: &Forma, s: &Sample, loss_cfg: &LossConfig, tau: f64) -> Result<SampleResult> {
    let mut g = Graph::new();
    let x = g.constant(s.image.clone());
    let f = model.forward(&mut g, x, None)?;
    let gt: Arc<[f64]> = s.mask.data().into();
    let loss = combined_recorded(&mut g, f.out.prob, gt, loss_cfg)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss value {value}")));
    }
    g.backward(loss)?;
    let confusion = Confusion::from_masks(&predict_mask(g.value(f.out.prob), tau), &s.mask)?;
    let mut grads = vec![None; model.store.len()];
    for (id, gr) in g.param_grads() {
        grads[id] = Some(gr.to_vec());
    }
    Ok(SampleResult {
        loss: value,
        confusion,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainState {
    config: TrainConfig,
    step: u64,
    adam_step: u64,
    lr: f64,
    schedule: LrSchedule,
    epoch_loss_sum: f64,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    model: ModelConfig,
    train: TrainState,
}

/// Training driver. Every random choice is keyed by `(seed, step)`, so a resumed run
/// continues exactly where the saved one stopped.
pub struct Trainer {
    pub model: Forma,
    pub opt: AdamW,
    pub schedule: LrSchedule,
    pub cfg: TrainConfig,
    data: Vec<Sample>,
    step: u64,
    epoch_loss_sum: f64,
}

impl Trainer {
    /// Fresh model and synthetic training set, both derived from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Forma::new(model_cfg, cfg.model_seed())?;
        Self::with_model(model, cfg)
    }

    fn with_model(model: Forma, cfg: TrainConfig) -> Result<Self> {
        let (h, w) = model.cfg.input_size;
        let data = synth_set(cfg.data_seed(), cfg.samples, h, w, &cfg.kinds)?;
        let opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
        let schedule = LrSchedule::new(cfg.lr, cfg.patience, cfg.factor, PlateauMode::Min);
        Ok(Self {
            model,
            opt,
            schedule,
            cfg,
            data,
            step: 0,
            epoch_loss_sum: 0.0,
        })
    }

    pub fn data(&self) -> &[Sample] {
        &self.data
    }

    /// Number of steps taken so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Sample indices of step `step` (0-based): each epoch visits a fresh permutation.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.cfg.steps_per_epoch() as u64;
        let (epoch, k) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed ^ ORDER_STREAM, epoch));
        order.shuffle(&mut rng);
        let b = self.cfg.batch_size;
        order[k * b..((k + 1) * b).min(order.len())].to_vec()
    }

    fn batch_seed(&self, step: u64) -> u64 {
        derive_seed(self.cfg.seed ^ BATCH_STREAM, step)
    }

    /// One optimizer step over the next batch.
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let batch_seed = self.batch_seed(step);
        let idx = self.batch_indices(step);
        let batch: Vec<Sample> = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| match &self.cfg.augment {
                Some(a) => augment(&self.data[i], derive_seed(batch_seed, j as u64), a),
                None => Ok(self.data[i].clone()),
            })
            .collect::<Result<_>>()?;

        let (model, loss_cfg, tau) = (&self.model, &self.cfg.loss, self.cfg.tau);
        let results: Vec<Result<SampleResult>> = batch
            .par_iter()
            .map(|s| sample_gradients(model, s, loss_cfg, tau))
            .collect();
        let results: Vec<SampleResult> = results
            .into_iter()
            .collect::<Result<_>>()
            .map_err(|e| self.diagnose(e, step, batch_seed, &idx))?;

        // fixed-order reduction keeps the update independent of the thread count
        let n = results.len() as f64;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.model.store.len()];
        for r in &results {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                if let Some(g) = g {
                    let a = acc.get_or_insert_with(|| vec![0.0; g.len()]);
                    for (a, v) in a.iter_mut().zip(g) {
                        *a += v / n;
                    }
                }
            }
        }
        let loss = results.iter().map(|r| r.loss).sum::<f64>() / n;
        let (f1, iou) = results.iter().fold((0.0, 0.0), |(f, i), r| {
            let (a, b) = r.confusion.f1_iou();
            (f + a / n, i + b / n)
        });

        let lr = self.opt.lr;
        self.opt.step(&mut self.model.store, &grads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(batch_seed, u64::MAX));
        self.model.project_constraints(&mut rng)?;

        self.step += 1;
        self.epoch_loss_sum += loss;
        let spe = self.cfg.steps_per_epoch() as u64;
        let epoch_loss = self.step.is_multiple_of(spe).then(|| {
            let mean = self.epoch_loss_sum / spe as f64;
            self.epoch_loss_sum = 0.0;
            self.opt.lr = self.schedule.step(mean);
            mean
        });
        Ok(StepLog {
            step: self.step,
            epoch: (self.step - 1) / spe,
            loss,
            lr,
            f1,
            iou,
            batch_seed,
            epoch_loss,
        })
    }

    fn diagnose(&self, e: Error, step: u64, batch_seed: u64, idx: &[usize]) -> Error {
        match e {
            Error::NonFinite(what) => {
                let seeds: Vec<String> = idx.iter().map(|&i| format!("{:#x}", self.data[i].seed)).collect();
                Error::NonFinite(format!(
                    "{what} at step {}: batch seed {batch_seed:#x}, sample seeds [{}]",
                    step + 1,
                    seeds.join(", ")
                ))
            }
            other => other,
        }
    }

    /// Runs until `cfg.steps` steps are done or `stop` returns true for a step log.
    pub fn run(&mut self, mut stop: impl FnMut(&StepLog) -> bool) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while (self.step as usize) < self.cfg.steps {
            let log = self.step()?;
            let done = stop(&log);
            logs.push(log);
            if done {
                break;
            }
        }
        Ok(logs)
    }

    /// Mean per-image F1 and IoU of the current model on `samples`.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<(f64, f64)> {
        evaluate_samples(&self.model, samples, self.cfg.tau)
    }

    /// Saves weights, optimizer moments and schedule.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = TrainMeta {
            model: self.model.cfg.clone(),
            train: TrainState {
                config: self.cfg.clone(),
                step: self.step,
                adam_step: self.opt.step_count(),
                lr: self.opt.lr,
                schedule: self.schedule.clone(),
                epoch_loss_sum: self.epoch_loss_sum,
            },
        };
        let mut tensors = model_tensors(&self.model);
        let mut moments = Vec::new();
        for (id, name, t) in self.model.store.iter() {
            let (m, v) = self.opt.moments(id);
            moments.push((format!("adam.m/{name}"), Tensor::new(t.shape(), m.to_vec())?));
            moments.push((format!("adam.v/{name}"), Tensor::new(t.shape(), v.to_vec())?));
        }
        tensors.extend(moments.iter().map(|(n, t)| (n.clone(), t)));
        write_tensor_file(path, &meta, &tensors)
    }

    /// Restores a trainer saved by [`Trainer::save`].
    pub fn resume(path: &Path) -> Result<Self> {
        let (meta, tensors): (TrainMeta, _) = read_tensor_file(path)?;
        let model = restore_model(meta.model, &tensors, path)?;
        let st = meta.train;
        let mut t = Self::with_model(model, st.config)?;
        let lookup = |prefix: &str, name: &str| -> Result<Vec<f64>> {
            let key = format!("{prefix}/{name}");
            tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::format(path, format!("missing tensor {key}")))
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, name, _) in t.model.store.iter() {
            m.push(lookup("adam.m", name)?);
            v.push(lookup("adam.v", name)?);
        }
        t.opt.restore(st.adam_step, m, v)?;
        t.opt.lr = st.lr;
        t.schedule = st.schedule;
        t.step = st.step;
        t.epoch_loss_sum = st.epoch_loss_sum;
        Ok(t)
    }
}

/// Mean per-image F1 and IoU of `model` on `samples` at threshold `tau`.
pub fn evaluate_samples(model: &Forma, samples: &[Sample], tau: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Usage("no samples to evaluate".into()));
    }
    let scores: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let prob = model.predict(&s.image, None)?;
            Ok(Confusion::from_masks(&predict_mask(&prob, tau), &s.mask)?.f1_iou())
        })
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    Ok(scores.iter().fold((0.0, 0.0), |(f, i), s| (f + s.0 / n, i + s.1 / n)))
}

/// Writes `step,epoch,loss,lr,f1,iou` rows.
pub fn write_loss_curve(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut s = String::from("step,epoch,loss,lr,f1,iou\n");
    for l in logs {
        s.push_str(&format!("{},{},{:.10},{:e},{:.6},{:.6}\n", l.step, l.epoch, l.loss, l.lr, l.f1, l.iou));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
