//! Dice and focal losses on a probability map against a binary mask.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::Variant;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Additive smoothing in the numerator and denominator of the dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub w_dice: f64,
    pub w_focal: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.5,
            w_dice: 1.0,
            w_focal: 1.0,
        }
    }
}

impl LossConfig {
    /// Default weights with the term removed by a loss ablation set to zero.
    pub fn for_variant(v: Variant) -> Self {
        let base = Self::default();
        match v {
            Variant::NoDice => Self { w_dice: 0.0, ..base },
            Variant::NoFocal => Self { w_focal: 0.0, ..base },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_dice >= 0.0 && self.w_focal >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Usage(
                "loss weights and gamma must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Usage("focal alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn mask_values(prob: &Tensor, gt: &Tensor) -> Result<Arc<[f64]>> {
    if prob.shape() != gt.shape() {
        return Err(Error::dim("loss", prob.shape(), gt.shape()));
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::domain("loss", format!("mask value {v} is not 0 or 1")));
    }
    Ok(gt.data().into())
}

fn eval(prob: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::inference();
    let p = g.constant(prob.clone());
    let l = f(&mut g, p)?;
    Ok(g.value(l).data()[0])
}

/// `1 − (2Σpg + 1) / (Σp + Σg + 1)`.
pub fn dice_loss(prob: &Tensor, gt: &Tensor) -> Result<f64> {
    let m = mask_values(prob, gt)?;
    eval(prob, |g, p| g.dice_loss(p, m, DICE_SMOOTH))
}

/// Mean of `−α_t (1 − p_t)^γ ln p_t`.
pub fn focal_loss(prob: &Tensor, gt: &Tensor, gamma: f64, alpha: f64) -> Result<f64> {
    let m = mask_values(prob, gt)?;
    eval(prob, |g, p| g.focal_loss(p, m, gamma, alpha))
}

/// `w_dice · dice + w_focal · focal`.
pub fn combined_loss(prob: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let m = mask_values(prob, gt)?;
    eval(prob, |g, p| combined_recorded(g, p, m, cfg))
}

/// Records the combined loss; a term with zero weight is left out of the graph.
pub fn combined_recorded(g: &mut Graph, prob: Var, gt: Arc<[f64]>, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let mut total: Option<Var> = None;
    if cfg.w_dice > 0.0 {
        let d = g.dice_loss(prob, gt.clone(), DICE_SMOOTH)?;
        total = Some(if cfg.w_dice == 1.0 { d } else { g.scale(d, cfg.w_dice) });
    }
    if cfg.w_focal > 0.0 {
        let f = g.focal_loss(prob, gt, cfg.gamma, cfg.alpha)?;
        let f = if cfg.w_focal == 1.0 { f } else { g.scale(f, cfg.w_focal) };
        total = Some(match total {
            Some(t) => g.add(t, f)?,
            None => f,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => {
            // both weights zero: a constant zero that still depends on prob
            let z = g.scale(prob, 0.0);
            Ok(g.sum(z))
        }
    }
}
