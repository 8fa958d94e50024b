//! Ensemble-diversity timelines, selective-prediction curves, AUROC, and ECE.

use std::cmp::Ordering;

use ndarray::ArrayView2;

use crate::ept::{LabelVector, PredictionTensor, Task};
use crate::error::{require_positive, Error, Result};
use crate::margin::{decide_multiclass, top2};
use crate::stats::{ensemble_std, ClassStats};

/// Default collapse threshold on the diversity scalar.
pub const DEFAULT_TAU: f64 = 1e-3;
/// Default ECE bin count.
pub const DEFAULT_BINS: usize = 15;

/// Mean ensemble standard deviation over every `(sample, class)`.
pub fn diversity(tensor: &PredictionTensor) -> Result<f64> {
    let sigma = ensemble_std(tensor)?;
    Ok(sigma.iter().sum::<f64>() / sigma.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityPoint {
    pub epoch: u64,
    pub diversity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversitySeries {
    pub points: Vec<DiversityPoint>,
    /// First epoch whose diversity falls below `tau`.
    pub collapse_epoch: Option<u64>,
    pub tau: f64,
}

/// Diversity per snapshot and the first epoch below `tau`.
///
/// Snapshots must share `(N, C)` and have strictly increasing epochs.
pub fn collapse_epoch(snapshots: &[(u64, PredictionTensor)], tau: f64) -> Result<DiversitySeries> {
    require_positive("tau", tau)?;
    let (_, first) = snapshots.first().ok_or(Error::Empty("snapshot series"))?;
    let shape = (first.samples(), first.classes());
    let mut points = Vec::with_capacity(snapshots.len());
    for (i, (epoch, tensor)) in snapshots.iter().enumerate() {
        if i > 0 && *epoch <= snapshots[i - 1].0 {
            return Err(Error::EpochOrder {
                previous: snapshots[i - 1].0,
                current: *epoch,
            });
        }
        if (tensor.samples(), tensor.classes()) != shape {
            return Err(Error::ShapeMismatch(format!(
                "snapshot at epoch {epoch} has (N, C) = ({}, {}), expected {:?}",
                tensor.samples(),
                tensor.classes(),
                shape
            )));
        }
        points.push(DiversityPoint {
            epoch: *epoch,
            diversity: diversity(tensor)?,
        });
    }
    let collapse_epoch = points.iter().find(|p| p.diversity < tau).map(|p| p.epoch);
    Ok(DiversitySeries {
        points,
        collapse_epoch,
        tau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoveragePoint {
    pub k: f64,
    pub decided: usize,
    /// Fraction of samples the rule decides.
    pub coverage: f64,
    /// Error rate among decided samples; `None` when nothing is decided.
    pub risk: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRiskCurve {
    pub points: Vec<CoveragePoint>,
}

fn multiclass_labels(labels: &LabelVector, expected: usize) -> Result<&[usize]> {
    let labels = labels.as_multiclass().ok_or(Error::TaskMismatch {
        expected: Task::Multiclass,
        found: Task::Multilabel,
    })?;
    if labels.len() != expected {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected,
            found: labels.len(),
        });
    }
    Ok(labels)
}

/// Coverage and selective risk of the top-2 SNR rule at each `k`.
pub fn coverage_risk(stats: &ClassStats, labels: &LabelVector, k_grid: &[f64], eps: f64) -> Result<CoverageRiskCurve> {
    if stats.task != Task::Multiclass {
        return Err(Error::TaskMismatch {
            expected: Task::Multiclass,
            found: stats.task,
        });
    }
    let labels = multiclass_labels(labels, stats.samples())?;
    if k_grid.is_empty() {
        return Err(Error::Empty("k grid"));
    }
    if k_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidConfig("k grid must be sorted ascending".into()));
    }
    let n = stats.samples() as f64;
    let points = k_grid
        .iter()
        .map(|&k| {
            let decisions = decide_multiclass(stats, k, eps)?;
            let mut decided = 0usize;
            let mut wrong = 0usize;
            for (d, &label) in decisions.iter().zip(labels) {
                if let crate::margin::Decision::Class(c) = d.decision {
                    decided += 1;
                    if c != label {
                        wrong += 1;
                    }
                }
            }
            Ok(CoveragePoint {
                k,
                decided,
                coverage: decided as f64 / n,
                risk: (decided > 0).then(|| wrong as f64 / decided as f64),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageRiskCurve { points })
}

/// Area under the ROC curve with `positive` scored as the high class,
/// computed as the Mann-Whitney statistic with midranks for ties.
pub fn auroc(negative: &[f64], positive: &[f64]) -> Result<f64> {
    if negative.is_empty() || positive.is_empty() {
        return Err(Error::Empty("AUROC score list"));
    }
    if negative.iter().chain(positive).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("AUROC scores"));
    }
    let mut all: Vec<(f64, bool)> = negative
        .iter()
        .map(|&s| (s, false))
        .chain(positive.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares the midrank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = all[i..=j].iter().filter(|(_, p)| *p).count();
        rank_sum_pos += midrank * pos_in_group as f64;
        i = j + 1;
    }
    let n_pos = positive.len() as f64;
    let n_neg = negative.len() as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

/// Expected calibration error over `bins` equal-width confidence bins.
///
/// Confidence is the row maximum, the prediction its (lowest-index) argmax.
pub fn ece(mean_probs: ArrayView2<'_, f64>, labels: &LabelVector, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidConfig("ECE needs at least one bin".into()));
    }
    let n = mean_probs.nrows();
    let labels = multiclass_labels(labels, n)?;
    if n == 0 {
        return Err(Error::Empty("ECE input"));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (row, &label) in mean_probs.rows().into_iter().zip(labels) {
        let row = row.to_vec();
        let (pred, _) = top2(&row)?;
        let conf = row[pred];
        let b = ((conf * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == label {
            correct[b] += 1;
        }
    }
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let size = count[b] as f64;
            let acc = correct[b] as f64 / size;
            let conf = conf_sum[b] / size;
            size / n as f64 * (acc - conf).abs()
        })
        .sum())
}
