//! Standard entropy decomposition and expected pairwise divergences.
//!
//! Pairwise measures average over all `M^2` ordered member pairs, self-pairs
//! included:
//!
//! | Measure | Pair term |
//! |---------|-----------|
//! | EPCE | `CE(p, q) = -sum p ln q` |
//! | EPKL | `KL(p || q) = sum p (ln p - ln q)` |
//! | EPJS | `JS(p, q) = H((p + q) / 2) - (H(p) + H(q)) / 2` |
//!
//! Logs use the shared `1e-12` clamp, so `EPKL = EPCE - AU` holds exactly
//! (up to rounding) and one-hot disagreement stays finite.

use crate::ept::PredictionTensor;
use crate::error::Result;
use crate::stats::{clamped_ln, entropy_unchecked, require_multiclass_probs, Decomposition};

/// All baseline measures for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineMeasures {
    pub tu: f64,
    pub au: f64,
    pub eu: f64,
    pub epce: f64,
    pub epkl: f64,
    pub epjs: f64,
}

impl BaselineMeasures {
    pub fn decomposition(&self) -> Decomposition {
        Decomposition {
            tu: self.tu,
            au: self.au,
            eu: self.eu,
        }
    }
}

/// Scratch buffers reused across samples.
struct SampleScratch {
    mean: Vec<f64>,
    mean_log: Vec<f64>,
    mix: Vec<f64>,
}

impl SampleScratch {
    fn new(classes: usize) -> Self {
        Self {
            mean: vec![0.0; classes],
            mean_log: vec![0.0; classes],
            mix: vec![0.0; classes],
        }
    }
}

/// `(TU, AU, EPCE)` for one sample in `O(M C)`.
///
/// EPCE over all ordered pairs factorizes as `-sum_c mu(c) * mean_m ln p_m(c)`.
/// Means accumulate offsets from member 0 so coinciding members give exact zeros.
fn entropy_terms(tensor: &PredictionTensor, s: usize, scratch: &mut SampleScratch) -> (f64, f64, f64) {
    let m = tensor.members();
    let first = tensor.row(0, s);
    let h0 = entropy_unchecked(first);
    scratch.mean.iter_mut().for_each(|v| *v = 0.0);
    scratch.mean_log.iter_mut().for_each(|v| *v = 0.0);
    let mut au = 0.0;
    for k in 1..m {
        let row = tensor.row(k, s);
        au += entropy_unchecked(row) - h0;
        for (((mu, ml), &p), &p0) in scratch.mean.iter_mut().zip(scratch.mean_log.iter_mut()).zip(row).zip(first) {
            *mu += p - p0;
            *ml += clamped_ln(p) - clamped_ln(p0);
        }
    }
    let inv = 1.0 / m as f64;
    for ((mu, ml), &p0) in scratch.mean.iter_mut().zip(scratch.mean_log.iter_mut()).zip(first) {
        *mu = p0 + *mu * inv;
        *ml = clamped_ln(p0) + *ml * inv;
    }
    au = h0 + au * inv;
    let tu = entropy_unchecked(&scratch.mean);
    let mut epce = 0.0;
    for (&mu, &ml) in scratch.mean.iter().zip(&scratch.mean_log) {
        if mu > 0.0 {
            epce -= mu * ml;
        }
    }
    (tu, au, epce)
}

fn epjs_sample(tensor: &PredictionTensor, s: usize, scratch: &mut SampleScratch) -> f64 {
    let m = tensor.members();
    let mut total = 0.0;
    for a in 0..m {
        let p = tensor.row(a, s);
        let hp = entropy_unchecked(p);
        for b in (a + 1)..m {
            let q = tensor.row(b, s);
            for ((dst, &x), &y) in scratch.mix.iter_mut().zip(p).zip(q) {
                *dst = 0.5 * (x + y);
            }
            let js = entropy_unchecked(&scratch.mix) - 0.5 * (hp + entropy_unchecked(q));
            total += js;
        }
    }
    // each unordered pair counts twice; self-pairs contribute zero
    2.0 * total / (m * m) as f64
}

/// TU, AU, EU, EPCE, EPKL, and EPJS for every sample.
pub fn baseline_measures(tensor: &PredictionTensor) -> Result<Vec<BaselineMeasures>> {
    require_multiclass_probs(tensor)?;
    let mut scratch = SampleScratch::new(tensor.classes());
    Ok((0..tensor.samples())
        .map(|s| {
            let (tu, au, epce) = entropy_terms(tensor, s, &mut scratch);
            let epjs = epjs_sample(tensor, s, &mut scratch);
            let d = Decomposition::from_parts(tu, au);
            BaselineMeasures {
                tu: d.tu,
                au,
                eu: d.eu,
                epce,
                epkl: epce - au,
                epjs,
            }
        })
        .collect())
}

/// Entropy of the ensemble mean, mean member entropy, and their difference.
pub fn standard_decomposition(tensor: &PredictionTensor) -> Result<Vec<Decomposition>> {
    require_multiclass_probs(tensor)?;
    let mut scratch = SampleScratch::new(tensor.classes());
    Ok((0..tensor.samples())
        .map(|s| {
            let (tu, au, _) = entropy_terms(tensor, s, &mut scratch);
            Decomposition::from_parts(tu, au)
        })
        .collect())
}

/// Expected pairwise cross-entropy.
pub fn epce(tensor: &PredictionTensor) -> Result<Vec<f64>> {
    require_multiclass_probs(tensor)?;
    let mut scratch = SampleScratch::new(tensor.classes());
    Ok((0..tensor.samples())
        .map(|s| entropy_terms(tensor, s, &mut scratch).2)
        .collect())
}

/// Expected pairwise KL divergence.
pub fn epkl(tensor: &PredictionTensor) -> Result<Vec<f64>> {
    require_multiclass_probs(tensor)?;
    let mut scratch = SampleScratch::new(tensor.classes());
    Ok((0..tensor.samples())
        .map(|s| {
            let (_, au, epce) = entropy_terms(tensor, s, &mut scratch);
            epce - au
        })
        .collect())
}

/// Expected pairwise Jensen-Shannon divergence.
pub fn epjs(tensor: &PredictionTensor) -> Result<Vec<f64>> {
    require_multiclass_probs(tensor)?;
    let mut scratch = SampleScratch::new(tensor.classes());
    Ok((0..tensor.samples())
        .map(|s| epjs_sample(tensor, s, &mut scratch))
        .collect())
}
