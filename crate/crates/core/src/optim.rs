use crate::error::{Error, Result};
use crate::graph::ParamId;
use crate::params::{ParamKind, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with bias-corrected moments and decoupled weight decay.
///
/// Decay touches only `Weight` parameters; biases, norms, SSM parameters and the
/// constrained Bayar kernels are left alone.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id], &self.v[id])
    }

    /// Restores state saved by a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let shapes_ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !shapes_ok {
            return Err(Error::Usage("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. `grads[id]` is `None` for parameters that received no gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids() {
            let decay = if store.kind(id) == ParamKind::Weight {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = store.get_mut(id).data_mut();
            let g = grads[id].as_deref();
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::dim("adamw_step", &[p.len()], &[g.len()]));
                }
            }
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                p[i] -= self.lr * decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Whether a larger or a smaller metric counts as progress.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauMode {
    Min,
    Max,
}

/// Reduce-on-plateau learning-rate schedule.
///
/// A call improves on the best metric when it beats it by a relative margin of
/// `threshold`. After `patience` calls in a row without improvement the rate is
/// multiplied by `factor`, never going below `floor`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub floor: f64,
    pub initial: f64,
    pub patience: u32,
    pub factor: f64,
    pub threshold: f64,
    pub mode: PlateauMode,
    pub best: Option<f64>,
    pub bad_calls: u32,
}

pub const LR_INITIAL: f64 = 1e-4;
pub const LR_FLOOR: f64 = 1e-8;

impl Default for LrSchedule {
    fn default() -> Self {
        Self::new(LR_INITIAL, 3, 0.1, PlateauMode::Min)
    }
}

impl LrSchedule {
    pub fn new(initial: f64, patience: u32, factor: f64, mode: PlateauMode) -> Self {
        Self {
            lr: initial.max(LR_FLOOR),
            floor: LR_FLOOR,
            initial,
            patience,
            factor,
            threshold: 1e-4,
            mode,
            best: None,
            bad_calls: 0,
        }
    }

    fn improves(&self, metric: f64) -> bool {
        match self.best {
            None => true,
            Some(best) => match self.mode {
                PlateauMode::Min => metric < best - self.threshold * best.abs(),
                PlateauMode::Max => metric > best + self.threshold * best.abs(),
            },
        }
    }

    /// Feeds one validation metric and returns the (possibly reduced) learning rate.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric.is_finite() && self.improves(metric) {
            self.best = Some(metric);
            self.bad_calls = 0;
        } else {
            self.bad_calls += 1;
            if self.bad_calls >= self.patience.max(1) {
                self.lr = (self.lr * self.factor).max(self.floor);
                self.bad_calls = 0;
            }
        }
        self.lr
    }
}

/// Free-function form of [`LrSchedule::step`].
pub fn plateau_step(schedule: &mut LrSchedule, val_metric: f64) -> f64 {
    schedule.step(val_metric)
}

/// Free-function form of [`AdamW::step`].
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamW,
) -> Result<()> {
    state.step(store, grads)
}
