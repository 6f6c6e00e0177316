//! Top-k error, per-image confidence reports and robustness-curve summaries.
//!
//! Errors are fractions in `[0, 1]`; percentages only appear in the report
//! writers.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::autodiff::softmax_with_temperature;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::tensor::Tensor;

/// Rows per forward pass when evaluating a whole dataset.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Fgsm,
    Cw,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Cw => "cw",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "cw" => Ok(AttackKind::Cw),
            other => Err(Error::Config(format!("unknown attack `{other}`"))),
        }
    }
}

/// One row of a robustness table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRecord {
    pub epsilon: f64,
    pub top1_error: f64,
    pub top5_error: f64,
    pub mean_l2: f64,
    pub success_rate: f64,
    pub attack: AttackKind,
}

impl SweepRecord {
    pub fn top1_accuracy(&self) -> f64 {
        1.0 - self.top1_error
    }
}

/// Position of `label` when classes are ordered by descending score, ties
/// going to the lower class index. Rank 0 is the top prediction.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < label))
        .count()
}

/// Highest-scoring class, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > scores[best] { i } else { best })
}

/// Top-k error over precomputed `[N×K]` scores.
pub fn topk_error_from_scores(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let classes = scores.row_len();
    if k == 0 || k > classes {
        return Err(Error::TopKTooLarge { k, classes });
    }
    if scores.rows() != labels.len() {
        return Err(Error::CountMismatch {
            images: scores.rows(),
            labels: labels.len(),
        });
    }
    let misses = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| rank_of(scores.row(i), y) >= k)
        .count();
    Ok(misses as f64 / labels.len() as f64)
}

/// Logits for every image of a `[N×...]` batch, evaluated in parallel chunks.
pub fn logits_for(model: &ModelState, images: &Tensor) -> Result<Tensor> {
    let n = images.rows();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(n)).collect();
            model.forward_logits(&images.select_rows(&idx))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = model.spec.classes;
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![n, k], data)
}

/// Fraction of items whose true label is not among the `k` highest logits.
pub fn topk_error(model: &ModelState, ds: &LabeledDataset, k: usize) -> Result<f64> {
    topk_error_from_scores(&logits_for(model, &ds.images)?, &ds.labels, k)
}

/// Top-1 and top-5 error from one forward pass; top-5 uses `min(5, K)`.
pub fn top1_top5(model: &ModelState, images: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let z = logits_for(model, images)?;
    let k5 = 5.min(z.row_len());
    Ok((
        topk_error_from_scores(&z, labels, 1)?,
        topk_error_from_scores(&z, labels, k5)?,
    ))
}

pub fn accuracy(model: &ModelState, ds: &LabeledDataset) -> Result<f64> {
    Ok(1.0 - topk_error(model, ds, 1)?)
}

/// Argmax prediction for every item.
pub fn predictions(model: &ModelState, images: &Tensor) -> Result<Vec<usize>> {
    let z = logits_for(model, images)?;
    Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
}

/// The five most probable classes of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceReport {
    pub index: usize,
    pub true_class: String,
    /// `(class name, probability)`, descending.
    pub top: Vec<(String, f64)>,
}

impl fmt::Display for ConfidenceReport {
    /// `index<TAB>true class<TAB>names…<TAB>confidences…` with four decimals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.top.iter().map(|(n, _)| n.as_str()).collect();
        let confs: Vec<String> = self.top.iter().map(|(_, p)| format!("{p:.4}")).collect();
        write!(
            f,
            "{}\t{}\t{}\t{}",
            self.index,
            self.true_class,
            names.join(" "),
            confs.join(" ")
        )
    }
}

pub fn confidence_report(
    model: &ModelState,
    ds: &LabeledDataset,
    indices: &[usize],
    class_names: &[String],
) -> Result<Vec<ConfidenceReport>> {
    if class_names.len() < model.spec.classes {
        return Err(Error::Config(format!(
            "{} class names for {} classes",
            class_names.len(),
            model.spec.classes
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            classes: ds.len(),
        });
    }
    let z = model.forward_logits(&ds.images.select_rows(indices))?;
    let probs = softmax_with_temperature(&z, 1.0)?;
    Ok(indices
        .iter()
        .enumerate()
        .map(|(r, &index)| {
            let row = probs.row(r);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by_key(|&c| rank_of(row, c));
            ConfidenceReport {
                index,
                true_class: class_names[ds.labels[index]].clone(),
                top: order
                    .into_iter()
                    .take(5)
                    .map(|c| (class_names[c].clone(), row[c]))
                    .collect(),
            }
        })
        .collect())
}

/// Peak errors of a sweep and where top-1 error saturates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveSummary {
    pub peak_top1: f64,
    pub peak_top5: f64,
    /// Smallest ε whose top-1 error reaches 95% of the peak.
    pub saturation_epsilon: f64,
}

pub fn robustness_curve(records: &[SweepRecord]) -> Result<CurveSummary> {
    if records.is_empty() {
        return Err(Error::Empty("sweep records"));
    }
    if records.windows(2).any(|w| w[1].epsilon < w[0].epsilon) {
        return Err(Error::Malformed {
            what: "sweep records",
            detail: "not sorted by epsilon".into(),
        });
    }
    let peak_top1 = records.iter().map(|r| r.top1_error).fold(f64::NEG_INFINITY, f64::max);
    let peak_top5 = records.iter().map(|r| r.top5_error).fold(f64::NEG_INFINITY, f64::max);
    let saturation_epsilon = records
        .iter()
        .find(|r| r.top1_error >= 0.95 * peak_top1)
        .map(|r| r.epsilon)
        .expect("the peak itself qualifies");
    Ok(CurveSummary {
        peak_top1,
        peak_top5,
        saturation_epsilon,
    })
}
