//! Pixel-level F1 / IoU and dataset-level aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel confusion counts of a binary prediction against a binary mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(mask: &Tensor, gt: &Tensor) -> Result<Self> {
        if mask.shape() != gt.shape() {
            return Err(Error::dim("f1_iou", mask.shape(), gt.shape()));
        }
        let mut c = Confusion::default();
        for (&m, &g) in mask.data().iter().zip(gt.data()) {
            match (m > 0.5, g > 0.5) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// `(2TP / (2TP + FP + FN), TP / (TP + FP + FN))`; two empty masks score `(1, 1)`.
    pub fn f1_iou(&self) -> (f64, f64) {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if self.tp + self.fp + self.fn_ == 0 {
            return (1.0, 1.0);
        }
        (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
    }
}

pub fn f1_iou(mask: &Tensor, gt: &Tensor) -> Result<(f64, f64)> {
    Ok(Confusion::from_masks(mask, gt)?.f1_iou())
}

/// Image-count-weighted mean of per-dataset `(F1, IoU, count)` triples.
pub fn dataset_average(datasets: &[(f64, f64, usize)]) -> Result<(f64, f64)> {
    let total: usize = datasets.iter().map(|d| d.2).sum();
    if total == 0 {
        return Err(Error::Usage("no images to average".into()));
    }
    let (mut f, mut i) = (0.0, 0.0);
    for &(f1, iou, n) in datasets {
        f += f1 * n as f64;
        i += iou * n as f64;
    }
    Ok((f / total as f64, i / total as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: String,
    pub dataset: String,
    pub f1: f64,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ImageRecord {
    pub fn new(path: impl Into<String>, dataset: impl Into<String>, c: Confusion) -> Self {
        let (f1, iou) = c.f1_iou();
        Self {
            path: path.into(),
            dataset: dataset.into(),
            f1,
            iou,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub images: usize,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageRecord>,
    pub datasets: Vec<DatasetSummary>,
    /// Weighted average over datasets; `None` when no image was scored.
    pub average: Option<(f64, f64)>,
    /// Manifest entries skipped because their inputs were missing.
    pub skipped: usize,
}

impl EvalReport {
    /// Groups the records by dataset (sorted by name) and averages.
    pub fn from_records(images: Vec<ImageRecord>, skipped: usize) -> Result<Self> {
        let mut groups: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
        for r in &images {
            groups.entry(&r.dataset).or_default().push(r);
        }
        let datasets: Vec<DatasetSummary> = groups
            .into_iter()
            .map(|(name, rs)| {
                let n = rs.len() as f64;
                DatasetSummary {
                    name: name.to_string(),
                    images: rs.len(),
                    f1: rs.iter().map(|r| r.f1).sum::<f64>() / n,
                    iou: rs.iter().map(|r| r.iou).sum::<f64>() / n,
                }
            })
            .collect();
        let average = if datasets.is_empty() {
            None
        } else {
            let triples: Vec<_> = datasets.iter().map(|d| (d.f1, d.iou, d.images)).collect();
            Some(dataset_average(&triples)?)
        };
        Ok(Self {
            images,
            datasets,
            average,
            skipped,
        })
    }

    /// Plain-text table: one line per dataset and the weighted average.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>7} {:>8} {:>8}", "dataset", "images", "F1", "IoU");
        for d in &self.datasets {
            let _ = writeln!(s, "{:<24} {:>7} {:>8.4} {:>8.4}", d.name, d.images, d.f1, d.iou);
        }
        if let Some((f, i)) = self.average {
            let n: usize = self.datasets.iter().map(|d| d.images).sum();
            let _ = writeln!(s, "{:<24} {:>7} {:>8.4} {:>8.4}", "weighted average", n, f, i);
        }
        if self.skipped > 0 {
            let _ = writeln!(s, "skipped entries: {}", self.skipped);
        }
        s
    }

    /// One JSON object per image: path, dataset, F1, IoU, TP, FP, FN.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.images {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::format(path, e.to_string()))?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}
