//! Temperature scaling of logits.
//!
//! The temperature is searched over `[0.01, 10]`: a 64-point log-uniform grid
//! scan, then golden-section refinement (in `ln T`) on the interval between
//! the grid neighbours of the best point, down to a relative width of `1e-4`.
//! `T = 1` is always evaluated too, so the fitted NLL never exceeds the
//! uncalibrated one. The search is fully deterministic.

use ndarray::{Array3, ArrayView2};

use crate::ept::{Kind, LabelVector, PredictionTensor, Task};
use crate::error::{require_positive, Error, Result};
use crate::stats::{clamped_ln, softmax_in_place};
use crate::LOG_CLAMP;

pub const T_MIN: f64 = 0.01;
pub const T_MAX: f64 = 10.0;
pub const GRID_POINTS: usize = 64;
pub const REL_WIDTH: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitScope {
    /// One temperature shared by all members, scored on the ensemble mean.
    Global,
    /// One temperature per member, each scored on its own predictions.
    PerMember,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureFit {
    pub scope: FitScope,
    pub temperatures: Vec<f64>,
    /// Mean NLL per sample at `T = 1`. For per-member fits, averaged over members.
    pub nll_before: f64,
    pub nll_after: f64,
}

/// `softmax(logits / T)`.
pub fn apply_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    require_positive("temperature", temperature)?;
    let mut row: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut row);
    Ok(row)
}

fn labels_for(labels: &LabelVector, samples: usize) -> Result<&[usize]> {
    let v = labels.as_multiclass().ok_or(Error::TaskMismatch {
        expected: Task::Multiclass,
        found: Task::Multilabel,
    })?;
    if v.len() != samples {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: samples,
            found: v.len(),
        });
    }
    Ok(v)
}

/// Mean negative log-likelihood of `labels` under `probs`, with the log clamp.
pub fn nll(probs: ArrayView2<'_, f64>, labels: &LabelVector) -> Result<f64> {
    let labels = labels_for(labels, probs.nrows())?;
    if labels.is_empty() {
        return Err(Error::Empty("NLL input"));
    }
    let total: f64 = probs
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| -clamped_ln(row[y]))
        .sum();
    Ok(total / labels.len() as f64)
}

/// `-ln softmax(z / T)[y]`, clamped like [`nll`].
fn logit_row_nll(z: &[f64], y: usize, temperature: f64) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let lse = max + z.iter().map(|v| (v / temperature - max).exp()).sum::<f64>().ln();
    (lse - z[y] / temperature).min(-LOG_CLAMP.ln())
}

/// Mean NLL of `logits` at one temperature.
pub fn logit_nll(logits: ArrayView2<'_, f64>, labels: &LabelVector, temperature: f64) -> Result<f64> {
    require_positive("temperature", temperature)?;
    let labels = labels_for(labels, logits.nrows())?;
    if labels.is_empty() {
        return Err(Error::Empty("NLL input"));
    }
    Ok(mean_logit_nll(logits, labels, temperature))
}

fn mean_logit_nll(logits: ArrayView2<'_, f64>, labels: &[usize], temperature: f64) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| logit_row_nll(row.as_slice().expect("standard layout"), y, temperature))
        .sum();
    total / labels.len() as f64
}

/// The log-uniform scan grid over `[T_MIN, T_MAX]`.
pub fn temperature_grid() -> Vec<f64> {
    let (lo, hi) = (T_MIN.ln(), T_MAX.ln());
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    (0..GRID_POINTS)
        .map(|i| {
            if i == GRID_POINTS - 1 {
                T_MAX
            } else {
                (lo + step * i as f64).exp()
            }
        })
        .collect()
}

/// Minimizes `objective` over `[T_MIN, T_MAX]`; returns `(T, objective(T))`.
fn search(objective: impl Fn(f64) -> f64) -> (f64, f64) {
    let grid = temperature_grid();
    let values: Vec<f64> = grid.iter().map(|&t| objective(t)).collect();
    let mut best_i = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best_i] {
            best_i = i;
        }
    }
    let mut best = (grid[best_i], values[best_i]);

    let mut a = grid[best_i.saturating_sub(1)].ln();
    let mut b = grid[(best_i + 1).min(GRID_POINTS - 1)].ln();
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = objective(x1.exp());
    let mut f2 = objective(x2.exp());
    while b.exp() - a.exp() > REL_WIDTH * (0.5 * (a + b)).exp() {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = objective(x1.exp());
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = objective(x2.exp());
        }
    }
    for (x, f) in [(x1, f1), (x2, f2)] {
        if f < best.1 {
            best = (x.exp(), f);
        }
    }
    let at_one = objective(1.0);
    if at_one < best.1 {
        best = (1.0, at_one);
    }
    best
}

/// Fits one temperature to an `N x C` logit matrix.
pub fn fit_temperature(logits: ArrayView2<'_, f64>, labels: &LabelVector) -> Result<TemperatureFit> {
    let labels = labels_for(labels, logits.nrows())?;
    if labels.is_empty() {
        return Err(Error::Empty("calibration input"));
    }
    let logits = logits.as_standard_layout();
    let view = logits.view();
    let before = mean_logit_nll(view, labels, 1.0);
    let (t, after) = search(|t| mean_logit_nll(view, labels, t));
    Ok(TemperatureFit {
        scope: FitScope::PerMember,
        temperatures: vec![t],
        nll_before: before,
        nll_after: after,
    })
}

fn require_logits(tensor: &PredictionTensor) -> Result<()> {
    if tensor.kind() != Kind::Logits {
        return Err(Error::KindMismatch {
            expected: Kind::Logits,
            found: tensor.kind(),
        });
    }
    if tensor.task() != Task::Multiclass {
        return Err(Error::TaskMismatch {
            expected: Task::Multiclass,
            found: tensor.task(),
        });
    }
    Ok(())
}

/// NLL of the ensemble mean of `softmax(z_m / T)`.
fn ensemble_nll(tensor: &PredictionTensor, labels: &[usize], temperature: f64) -> f64 {
    let m = tensor.members();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(n, &y)| {
            let p: f64 = (0..m)
                .map(|k| (-logit_row_nll_unclamped(tensor.row(k, n), y, temperature)).exp())
                .sum::<f64>()
                / m as f64;
            -clamped_ln(p)
        })
        .sum();
    total / labels.len() as f64
}

fn logit_row_nll_unclamped(z: &[f64], y: usize, temperature: f64) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let lse = max + z.iter().map(|v| (v / temperature - max).exp()).sum::<f64>().ln();
    lse - z[y] / temperature
}

/// One temperature shared by every member, minimizing the NLL of the
/// ensemble-mean prediction. With `M = 1` this equals [`fit_temperature`].
pub fn fit_ensemble_temperature(tensor: &PredictionTensor, labels: &LabelVector) -> Result<TemperatureFit> {
    require_logits(tensor)?;
    let labels = labels_for(labels, tensor.samples())?;
    let before = ensemble_nll(tensor, labels, 1.0);
    let (t, after) = search(|t| ensemble_nll(tensor, labels, t));
    Ok(TemperatureFit {
        scope: FitScope::Global,
        temperatures: vec![t],
        nll_before: before,
        nll_after: after,
    })
}

/// Independent temperature per member slice.
pub fn fit_per_member(tensor: &PredictionTensor, labels: &LabelVector) -> Result<TemperatureFit> {
    require_logits(tensor)?;
    labels_for(labels, tensor.samples())?;
    let fits = (0..tensor.members())
        .map(|k| fit_temperature(tensor.member(k), labels))
        .collect::<Result<Vec<_>>>()?;
    let m = fits.len() as f64;
    Ok(TemperatureFit {
        scope: FitScope::PerMember,
        temperatures: fits.iter().map(|f| f.temperatures[0]).collect(),
        nll_before: fits.iter().map(|f| f.nll_before).sum::<f64>() / m,
        nll_after: fits.iter().map(|f| f.nll_after).sum::<f64>() / m,
    })
}

/// Calibrated probabilities: member `m` uses `temperatures[m]`, or the
/// single shared temperature.
pub fn apply_fit(tensor: &PredictionTensor, temperatures: &[f64]) -> Result<PredictionTensor> {
    require_logits(tensor)?;
    let m = tensor.members();
    if temperatures.len() != 1 && temperatures.len() != m {
        return Err(Error::LengthMismatch {
            what: "temperatures",
            expected: m,
            found: temperatures.len(),
        });
    }
    for &t in temperatures {
        require_positive("temperature", t)?;
    }
    let (n, c) = (tensor.samples(), tensor.classes());
    let mut data = Array3::<f64>::zeros((m, n, c));
    for k in 0..m {
        let t = temperatures[if temperatures.len() == 1 { 0 } else { k }];
        for s in 0..n {
            let p = apply_temperature(tensor.row(k, s), t)?;
            data.slice_mut(ndarray::s![k, s, ..])
                .iter_mut()
                .zip(p)
                .for_each(|(dst, v)| *dst = v);
        }
    }
    Ok(PredictionTensor::new(Kind::Probs, Task::Multiclass, data)?.with_epoch(tensor.epoch()))
}
