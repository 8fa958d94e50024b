//! Top-2 signal-to-noise decisions and variance-gated margin uncertainty.
//!
//! Multiclass, with `i`, `j` the two largest ensemble means:
//!
//! ```text
//! snr      = (mu_i - mu_j) / (sigma_i + sigma_j + eps)
//! decision = i if mu_i - k sigma_i > mu_j + k sigma_j, else uncertain
//! gate     = 1 - exp(-snr)
//! gmu      = 1 - mu_i * gate
//! ```
//!
//! Multilabel folds each label's mean `u` to `mu_i = max(u, 1 - u)` and uses
//! its complement as the runner-up, so `sigma_i = sigma_j`.

use std::fmt;

use crate::error::{require_non_negative, require_positive, Error, Result};
use crate::gating::saturating_gate;
use crate::stats::ClassStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Class(usize),
    Present,
    Absent,
    Uncertain,
}

impl Decision {
    pub fn is_decided(&self) -> bool {
        !matches!(self, Decision::Uncertain)
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Class(c) => write!(f, "class:{c}"),
            Decision::Present => f.write_str("present"),
            Decision::Absent => f.write_str("absent"),
            Decision::Uncertain => f.write_str("uncertain"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginDecision {
    pub top1: usize,
    /// Runner-up class; `None` for multilabel, where it is the complement.
    pub top2: Option<usize>,
    pub snr: f64,
    pub decision: Decision,
    pub gmu: f64,
}

/// Indices of the two largest values, ties going to the lower index.
pub fn top2(row: &[f64]) -> Result<(usize, usize)> {
    if row.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "top-2 needs at least 2 classes, got {}",
            row.len()
        )));
    }
    let (mut i, mut j) = if row[1] > row[0] { (1, 0) } else { (0, 1) };
    for (c, &v) in row.iter().enumerate().skip(2) {
        if v > row[i] {
            j = i;
            i = c;
        } else if v > row[j] {
            j = c;
        }
    }
    Ok((i, j))
}

/// `margin / (spread + eps)`; zero margin gives zero even when the
/// denominator vanishes.
#[inline]
fn snr(margin: f64, spread: f64, eps: f64) -> f64 {
    if margin == 0.0 {
        0.0
    } else {
        margin / (spread + eps)
    }
}

fn check_k_eps(k: f64, eps: f64) -> Result<()> {
    require_positive("k", k)?;
    require_non_negative("epsilon", eps)
}

/// Decision, SNR, and GMU for one sample's mean and spread rows.
pub fn decide_row(mu: &[f64], sigma: &[f64], k: f64, eps: f64) -> Result<MarginDecision> {
    check_k_eps(k, eps)?;
    if mu.len() != sigma.len() {
        return Err(Error::LengthMismatch {
            what: "sigma row",
            expected: mu.len(),
            found: sigma.len(),
        });
    }
    let (i, j) = top2(mu)?;
    let margin = mu[i] - mu[j];
    let spread = sigma[i] + sigma[j];
    let snr = snr(margin, spread, eps);
    let decision = if mu[i] - k * sigma[i] > mu[j] + k * sigma[j] {
        Decision::Class(i)
    } else {
        Decision::Uncertain
    };
    Ok(MarginDecision {
        top1: i,
        top2: Some(j),
        snr,
        decision,
        gmu: 1.0 - mu[i] * saturating_gate(snr),
    })
}

/// Per-sample multiclass decisions at sensitivity `k`.
pub fn decide_multiclass(stats: &ClassStats, k: f64, eps: f64) -> Result<Vec<MarginDecision>> {
    check_k_eps(k, eps)?;
    (0..stats.samples())
        .map(|n| decide_row(stats.mu_row(n), stats.sigma_row(n), k, eps))
        .collect()
}

/// Per-sample `(gmu, gate)` for multiclass statistics.
pub fn gmu_multiclass(stats: &ClassStats, eps: f64) -> Result<Vec<(f64, f64)>> {
    require_non_negative("epsilon", eps)?;
    (0..stats.samples())
        .map(|n| {
            let mu = stats.mu_row(n);
            let sigma = stats.sigma_row(n);
            let (i, j) = top2(mu)?;
            let gate = saturating_gate(snr(mu[i] - mu[j], sigma[i] + sigma[j], eps));
            Ok((1.0 - mu[i] * gate, gate))
        })
        .collect()
}

/// Folded top-1 mean `max(u, 1 - u)`.
#[inline]
fn fold(u: f64) -> f64 {
    u.max(1.0 - u)
}

/// Decision for one label with ensemble mean `u` and spread `sigma`.
pub fn decide_multilabel(u: f64, sigma: f64, k: f64, eps: f64) -> Result<MarginDecision> {
    check_k_eps(k, eps)?;
    let top = fold(u);
    let margin = 2.0 * top - 1.0;
    let snr = snr(margin, 2.0 * sigma, eps);
    let decision = if top - k * sigma > (1.0 - top) + k * sigma {
        if u > 0.5 {
            Decision::Present
        } else {
            Decision::Absent
        }
    } else {
        Decision::Uncertain
    };
    Ok(MarginDecision {
        top1: usize::from(u > 0.5),
        top2: None,
        snr,
        decision,
        gmu: 1.0 - top * saturating_gate(snr),
    })
}

/// Multilabel GMU: `1 - mu_i * gate` on the folded mean. At `u = 0.5` the
/// gate is zero and GMU is one, matching both one-sided limits.
pub fn gmu_multilabel(u: f64, sigma: f64, eps: f64) -> Result<f64> {
    require_non_negative("epsilon", eps)?;
    let top = fold(u);
    let gate = saturating_gate(snr(2.0 * top - 1.0, 2.0 * sigma, eps));
    Ok(1.0 - top * gate)
}

/// Decisions for every `(sample, label)` of multilabel statistics.
pub fn decide_multilabel_stats(stats: &ClassStats, k: f64, eps: f64) -> Result<Vec<Vec<MarginDecision>>> {
    (0..stats.samples())
        .map(|n| {
            stats
                .mu_row(n)
                .iter()
                .zip(stats.sigma_row(n))
                .map(|(&u, &s)| decide_multilabel(u, s, k, eps))
                .collect()
        })
        .collect()
}
