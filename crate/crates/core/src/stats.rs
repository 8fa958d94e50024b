//! Ensemble moments, softmax, and entropy.
//!
//! Every reduction runs in a fixed index order so results do not depend on
//! how callers split work across samples.

use ndarray::{Array2, ArrayView2};

use crate::ept::{Kind, PredictionTensor, Task};
use crate::error::{Error, Result};
use crate::LOG_CLAMP;

/// Per-sample, per-class ensemble mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
    pub task: Task,
}

impl ClassStats {
    /// Wraps externally computed statistics after checking shapes and ranges.
    pub fn new(mu: Array2<f64>, sigma: Array2<f64>, task: Task) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(Error::ShapeMismatch(format!(
                "mu {:?} vs sigma {:?}",
                mu.dim(),
                sigma.dim()
            )));
        }
        if mu.ncols() < 2 {
            return Err(Error::ShapeMismatch("need at least 2 classes".into()));
        }
        if mu.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class statistics"));
        }
        if let Some(&v) = mu.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter {
                name: "mu",
                value: v,
                reason: "must lie in [0, 1]",
            });
        }
        if let Some(&v) = sigma.iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidParameter {
                name: "sigma",
                value: v,
                reason: "must be >= 0",
            });
        }
        Ok(Self { mu, sigma, task })
    }

    pub fn samples(&self) -> usize {
        self.mu.nrows()
    }

    pub fn classes(&self) -> usize {
        self.mu.ncols()
    }

    pub fn mu_row(&self, n: usize) -> &[f64] {
        row_slice(self.mu.view(), n)
    }

    pub fn sigma_row(&self, n: usize) -> &[f64] {
        row_slice(self.sigma.view(), n)
    }
}

pub(crate) fn row_slice<'a>(a: ArrayView2<'a, f64>, n: usize) -> &'a [f64] {
    let c = a.ncols();
    let flat = a.to_slice().expect("standard layout");
    &flat[n * c..(n + 1) * c]
}

/// Per-sample `(TU, AU, EU)` in nats, with `EU = TU - AU`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub tu: f64,
    pub au: f64,
    pub eu: f64,
}

impl Decomposition {
    /// `EU = TU - AU`; TU is then re-formed as `AU + EU` so the identity
    /// holds exactly in floating point (a change of at most one ulp).
    pub fn from_parts(tu: f64, au: f64) -> Self {
        let eu = tu - au;
        Self { tu: au + eu, au, eu }
    }
}

/// Numerically stable softmax (row max subtracted before exponentiation).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn require_probs(tensor: &PredictionTensor) -> Result<()> {
    if tensor.kind() != Kind::Probs {
        return Err(Error::KindMismatch {
            expected: Kind::Probs,
            found: tensor.kind(),
        });
    }
    Ok(())
}

pub(crate) fn require_multiclass_probs(tensor: &PredictionTensor) -> Result<()> {
    require_probs(tensor)?;
    if tensor.task() != Task::Multiclass {
        return Err(Error::TaskMismatch {
            expected: Task::Multiclass,
            found: tensor.task(),
        });
    }
    Ok(())
}

/// `mu[n][c] = (1/M) sum_m p[m][n][c]`.
pub fn ensemble_mean(tensor: &PredictionTensor) -> Result<Array2<f64>> {
    require_probs(tensor)?;
    let (m, n, c) = (tensor.members(), tensor.samples(), tensor.classes());
    // Accumulate offsets from member 0 so identical members give an exact mean.
    let mut mu = Array2::<f64>::zeros((n, c));
    for s in 0..n {
        let first = tensor.row(0, s);
        let mut out = mu.row_mut(s);
        for k in 1..m {
            for ((dst, &p), &p0) in out.iter_mut().zip(tensor.row(k, s)).zip(first) {
                *dst += p - p0;
            }
        }
        for (dst, &p0) in out.iter_mut().zip(first) {
            *dst = p0 + *dst / m as f64;
        }
    }
    Ok(mu)
}

/// Population standard deviation over members (divide by `M`).
pub fn ensemble_std(tensor: &PredictionTensor) -> Result<Array2<f64>> {
    let mu = ensemble_mean(tensor)?;
    Ok(std_around(tensor, &mu))
}

fn std_around(tensor: &PredictionTensor, mu: &Array2<f64>) -> Array2<f64> {
    let (m, n, c) = (tensor.members(), tensor.samples(), tensor.classes());
    let mut var = Array2::<f64>::zeros((n, c));
    for s in 0..n {
        let mean = row_slice(mu.view(), s);
        for k in 0..m {
            let row = tensor.row(k, s);
            for ((dst, &p), &mean) in var.row_mut(s).iter_mut().zip(row).zip(mean) {
                let d = p - mean;
                *dst += d * d;
            }
        }
    }
    var.mapv_inplace(|v| (v / m as f64).sqrt());
    var
}

/// Mean and standard deviation in one pass over the tensor layout.
pub fn class_stats(tensor: &PredictionTensor) -> Result<ClassStats> {
    let mu = ensemble_mean(tensor)?;
    let sigma = std_around(tensor, &mu);
    Ok(ClassStats {
        mu,
        sigma,
        task: tensor.task(),
    })
}

/// `ln(max(p, 1e-12))`.
#[inline]
pub fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if let Some((index, &value)) = dist.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativeProbability { index, value });
    }
    Ok(entropy_unchecked(dist))
}

/// Entropy without the sign check; non-positive entries contribute zero.
#[inline]
pub(crate) fn entropy_unchecked(dist: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in dist {
        if p > 0.0 {
            h -= p * clamped_ln(p);
        }
    }
    h
}
