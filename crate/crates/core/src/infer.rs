//! Inference on files at their native size, manifest evaluation and robustness sweeps.

use std::io::Write as _;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, load_image, load_mask, load_prob_map, perturb, ManifestEntry, Perturbation};
use crate::decoder::predict_mask;
use crate::error::{Error, Result};
use crate::metrics::{Confusion, EvalReport, ImageRecord};
use crate::model::Forma;
use crate::ops::{bilinear_resize, nearest_resize};
use crate::tensor::Tensor;

/// How images reach the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Bilinear resize to the configured input size; the prediction is mapped back to
    /// the native size with nearest-neighbor sampling.
    #[default]
    Resize,
    /// Run at the native size, padding to a multiple of 32 and cropping if needed.
    Native,
}

/// Probability map and binary mask at the image's native size.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub prob: Tensor,
    pub mask: Tensor,
}

fn plane(t: &Tensor) -> Result<Tensor> {
    let s = t.shape().to_vec();
    t.clone().reshape(&s[1..])
}

/// Edge-replicating pad of `[C, H, W]` on the bottom and right.
fn pad_to(image: &Tensor, hp: usize, wp: usize) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    Tensor::from_fn(&[c, hp, wp], |i| {
        let (ch, r) = (i / (hp * wp), i % (hp * wp));
        let (y, x) = ((r / wp).min(h - 1), (r % wp).min(w - 1));
        image.data()[(ch * h + y) * w + x]
    })
}

fn crop(prob: &Tensor, h: usize, w: usize) -> Tensor {
    let wp = prob.shape()[1];
    Tensor::from_fn(&[h, w], |i| prob.data()[(i / w) * wp + i % w])
}

/// Tampering probability and mask for `image: [3, H, W]` at any size.
pub fn predict_image(model: &Forma, image: &Tensor, mode: InputMode, tau: f64) -> Result<Prediction> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("predict_image", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let prob = match mode {
        InputMode::Resize => {
            let (th, tw) = model.cfg.input_size;
            let x = if (h, w) == (th, tw) { image.clone() } else { bilinear_resize(image, th, tw)? };
            let p = model.predict(&x, None)?;
            let p = p.reshape(&[1, th, tw])?;
            plane(&nearest_resize(&p, h, w)?)?
        }
        InputMode::Native => {
            let (hp, wp) = (h.div_ceil(32) * 32, w.div_ceil(32) * 32);
            if (hp, wp) == (h, w) {
                model.predict(image, None)?
            } else {
                warn!("{h}x{w} is not divisible by 32; padding to {hp}x{wp} and cropping the prediction");
                crop(&model.predict(&pad_to(image, hp, wp), None)?, h, w)
            }
        }
    };
    let mask = predict_mask(&prob, tau);
    Ok(Prediction { prob, mask })
}

/// Settings shared by manifest evaluation and robustness sweeps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub tau: f64,
    pub mode: InputMode,
    /// Seeds per-image perturbation noise.
    pub seed: u64,
}

enum Outcome {
    Scored(ImageRecord),
    Skipped,
}

fn score_entry(
    model: Option<&Forma>,
    e: &ManifestEntry,
    index: usize,
    opts: &EvalOptions,
    pert: Option<Perturbation>,
) -> Result<Outcome> {
    if !e.mask_path.exists() {
        warn!("skipping {}: mask {} is missing", e.image_path.display(), e.mask_path.display());
        return Ok(Outcome::Skipped);
    }
    let gt = load_mask(&e.mask_path)?;
    let prob = match (&e.prob_path, pert, model) {
        (Some(p), None, _) => load_prob_map(p)?,
        (_, _, Some(m)) => {
            let mut image = load_image(&e.image_path)?;
            if let Some(p) = pert {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, index as u64));
                image = perturb(&image, p, &mut rng)?;
            }
            predict_image(m, &image, opts.mode, opts.tau)?.prob
        }
        (_, _, None) => {
            return Err(Error::Usage(format!(
                "{} has no precomputed probability map and no model was given",
                e.image_path.display()
            )))
        }
    };
    if prob.shape() != gt.shape() {
        return Err(Error::dim("eval", prob.shape(), gt.shape()));
    }
    let c = Confusion::from_masks(&predict_mask(&prob, opts.tau), &gt)?;
    Ok(Outcome::Scored(ImageRecord::new(
        e.image_path.display().to_string(),
        e.dataset_name.clone(),
        c,
    )))
}

/// Scores every manifest entry; entries whose mask file is missing are skipped and counted.
pub fn evaluate_manifest(
    model: Option<&Forma>,
    entries: &[ManifestEntry],
    opts: &EvalOptions,
    pert: Option<Perturbation>,
) -> Result<EvalReport> {
    let outcomes: Vec<Outcome> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| score_entry(model, e, i, opts, pert))
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for o in outcomes {
        match o {
            Outcome::Scored(r) => records.push(r),
            Outcome::Skipped => skipped += 1,
        }
    }
    EvalReport::from_records(records, skipped)
}

/// One point of a robustness sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub perturbation: Perturbation,
    pub f1: f64,
    pub iou: f64,
}

/// Perturb, predict and score the manifest at every grid point.
pub fn robustness_sweep(
    model: &Forma,
    entries: &[ManifestEntry],
    grid: &[Perturbation],
    opts: &EvalOptions,
) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &p in grid {
        let report = evaluate_manifest(Some(model), entries, opts, Some(p))?;
        let (f1, iou) = report
            .average
            .ok_or_else(|| Error::Usage("no manifest entry could be scored".into()))?;
        rows.push(RobustnessRow { perturbation: p, f1, iou });
    }
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.perturbation.kind == b.perturbation.kind && b.f1 > a.f1 {
            log::info!(
                "{} F1 rises from {:.4} at {} to {:.4} at {}",
                a.perturbation.kind,
                a.f1,
                a.perturbation.strength,
                b.f1,
                b.perturbation.strength
            );
        }
    }
    Ok(rows)
}

/// `kind,strength,f1,iou` with one row per grid point.
pub fn write_robustness_csv(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    let mut s = String::from("kind,strength,f1,iou\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.perturbation.kind, r.perturbation.strength, r.f1, r.iou
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_is_identity_on_the_original_area() {
        let x = Tensor::from_fn(&[1, 3, 5], |i| i as f64);
        let p = pad_to(&x, 32, 32);
        assert_eq!(p.shape(), &[1, 32, 32]);
        assert_eq!(p.at(&[0, 31, 31]), x.at(&[0, 2, 4]));
        assert_eq!(crop(&plane(&p).unwrap(), 3, 5), plane(&x).unwrap());
    }
}
