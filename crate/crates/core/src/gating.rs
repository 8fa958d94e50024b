//! Variance-gated member distributions and the gated uncertainty
//! decomposition.
//!
//! For each sample the ensemble mean `mu` and population spread `sigma`
//! define a per-class gate
//!
//! ```text
//! gate(c) = 1 - exp(-mu(c) / (k * sigma(c) + epsilon))
//! ```
//!
//! which lies in `[0, 1)`. The same gate row rescales every member, and each
//! rescaled member row is renormalized:
//!
//! ```text
//! p~[m](c) = p[m](c) * gate(c) / sum_j p[m](j) * gate(j)
//! ```
//!
//! The gated predictive distribution is the arithmetic mean of the `p~[m]`.
//! TU is its entropy, AU the mean member entropy, and EU = TU - AU. Because
//! the predictive is a member average, EU is non-negative by concavity of
//! entropy.
//!
//! Classes with a high mean and low spread keep their mass; classes the
//! members disagree on are attenuated. Larger `k` attenuates harder. When all
//! members agree (`sigma = 0`) the gate saturates at one and the gated
//! quantities reduce to the standard ones.

use ndarray::{Array2, Array3, ArrayView2, Zip};

use crate::ept::PredictionTensor;
use crate::error::{require_positive, Error, Result};
use crate::stats::{class_stats, entropy_unchecked, require_multiclass_probs, Decomposition};
use crate::DEFAULT_EPSILON;

/// Largest `f64` strictly below one. Gate values are capped here so the
/// half-open range `[0, 1)` survives rounding.
pub const GATE_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Renormalization denominators at or below this count as degenerate.
pub const DEGENERATE_MASS: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    k: f64,
    epsilon: f64,
}

impl GateConfig {
    /// Sensitivity `k` with the default `epsilon = 1e-8`.
    pub fn new(k: f64) -> Result<Self> {
        Self::with_epsilon(k, DEFAULT_EPSILON)
    }

    pub fn with_epsilon(k: f64, epsilon: f64) -> Result<Self> {
        require_positive("k", k)?;
        require_positive("epsilon", epsilon)?;
        Ok(Self { k, epsilon })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// `1 - exp(-x)` for `x >= 0`, capped at [`GATE_MAX`].
#[inline]
pub(crate) fn saturating_gate(x: f64) -> f64 {
    (-(-x).exp_m1()).clamp(0.0, GATE_MAX)
}

/// Gate for a single class.
#[inline]
pub fn gate_value(mu: f64, sigma: f64, cfg: &GateConfig) -> f64 {
    saturating_gate(mu / (cfg.k * sigma + cfg.epsilon))
}

/// Elementwise gate over `N x C` statistics.
pub fn gate(mu: ArrayView2<'_, f64>, sigma: ArrayView2<'_, f64>, cfg: &GateConfig) -> Result<Array2<f64>> {
    if mu.dim() != sigma.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mu {:?} vs sigma {:?}",
            mu.dim(),
            sigma.dim()
        )));
    }
    Ok(Zip::from(&mu)
        .and(&sigma)
        .map_collect(|&m, &s| gate_value(m, s, cfg)))
}

/// Gated, renormalized member distributions for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedEnsemble {
    /// `N x C` gate values, shared across members.
    pub gates: Array2<f64>,
    /// `M x N x C` renormalized gated member rows.
    pub members: Array3<f64>,
    /// `N x C` mean of the gated member rows.
    pub predictive: Array2<f64>,
    /// Samples where at least one member's gated mass vanished; those member
    /// rows were left ungated.
    pub fallback: Vec<bool>,
}

impl GatedEnsemble {
    pub fn member_row(&self, member: usize, sample: usize) -> &[f64] {
        let c = self.members.dim().2;
        let n = self.members.dim().1;
        let flat = self.members.as_slice().expect("standard layout");
        let start = (member * n + sample) * c;
        &flat[start..start + c]
    }

    pub fn predictive_row(&self, sample: usize) -> &[f64] {
        crate::stats::row_slice(self.predictive.view(), sample)
    }
}

/// Writes the renormalized gated row for member row `p` into `out`, using
/// `mass` as scratch. Returns `false` (and copies `p` unchanged) when the
/// gated mass is degenerate.
fn gate_row(p: &[f64], gates: &[f64], mass: &mut [f64], out: &mut [f64]) -> bool {
    let mut total = 0.0;
    for ((dst, &pc), &gc) in mass.iter_mut().zip(p).zip(gates) {
        *dst = pc * gc;
        total += *dst;
    }
    if total > DEGENERATE_MASS {
        out.iter_mut().zip(mass.iter()).for_each(|(dst, &v)| *dst = v / total);
        true
    } else {
        out.copy_from_slice(p);
        false
    }
}

/// Applies the shared per-sample gate to every member and renormalizes.
pub fn gated_members(tensor: &PredictionTensor, cfg: &GateConfig) -> Result<GatedEnsemble> {
    require_multiclass_probs(tensor)?;
    let stats = class_stats(tensor)?;
    let gates = gate(stats.mu.view(), stats.sigma.view(), cfg)?;
    let (m, n, c) = (tensor.members(), tensor.samples(), tensor.classes());

    let mut members = Array3::<f64>::zeros((m, n, c));
    let mut predictive = Array2::<f64>::zeros((n, c));
    let mut fallback = vec![false; n];
    let mut mass = vec![0.0; c];

    for s in 0..n {
        let g = crate::stats::row_slice(gates.view(), s);
        for k in 0..m {
            let p = tensor.row(k, s);
            let mut out = members.slice_mut(ndarray::s![k, s, ..]);
            let row = out.as_slice_mut().expect("standard layout");
            if !gate_row(p, g, &mut mass, row) {
                fallback[s] = true;
            }
        }
        // offsets from member 0 keep the mean exact when members coincide
        for j in 0..c {
            let base = members[[0, s, j]];
            let spread: f64 = (1..m).map(|k| members[[k, s, j]] - base).sum();
            predictive[[s, j]] = base + spread / m as f64;
        }
    }

    Ok(GatedEnsemble {
        gates,
        members,
        predictive,
        fallback,
    })
}

/// Per-sample gated `(TU, AU, EU)`.
pub fn gated_decomposition(tensor: &PredictionTensor, cfg: &GateConfig) -> Result<Vec<Decomposition>> {
    let gated = gated_members(tensor, cfg)?;
    Ok(decompose(&gated))
}

pub fn decompose(gated: &GatedEnsemble) -> Vec<Decomposition> {
    let (m, n, _) = gated.members.dim();
    (0..n)
        .map(|s| {
            let tu = entropy_unchecked(gated.predictive_row(s));
            let h0 = entropy_unchecked(gated.member_row(0, s));
            let spread: f64 = (1..m).map(|k| entropy_unchecked(gated.member_row(k, s)) - h0).sum();
            let au = h0 + spread / m as f64;
            Decomposition::from_parts(tu, au)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ept::{Kind, Task};
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn probs(data: Array3<f64>) -> PredictionTensor {
        PredictionTensor::new(Kind::Probs, Task::Multiclass, data).unwrap()
    }

    const TINY_EPS: f64 = 1e-300;

    #[test]
    fn config_rejects_non_positive() {
        assert!(GateConfig::new(0.0).is_err());
        assert!(GateConfig::new(-1.0).is_err());
        assert!(GateConfig::with_epsilon(1.0, 0.0).is_err());
        assert!(GateConfig::new(f64::NAN).is_err());
        assert_eq!(GateConfig::new(2.0).unwrap().epsilon(), 1e-8);
    }

    #[test]
    fn gate_examples() {
        let cfg = GateConfig::new(1.0).unwrap();
        let certain = gate_value(0.5, 0.0, &cfg);
        assert!(certain < 1.0 && 1.0 - certain < 1e-15);

        let cfg2 = GateConfig::with_epsilon(2.0, TINY_EPS).unwrap();
        let g = gate_value(0.6, 0.3, &cfg2);
        // 1 - e^{-1}
        assert!((g - 0.632_120_558_828_557_7).abs() < 1e-15);

        assert_eq!(gate_value(0.0, 0.3, &cfg), 0.0);
        assert_eq!(gate_value(0.0, 0.0, &cfg), 0.0);
    }

    #[test]
    fn gate_shape_mismatch() {
        let cfg = GateConfig::new(1.0).unwrap();
        let mu = array![[0.5, 0.5]];
        let sigma = array![[0.1, 0.1, 0.1]];
        assert!(gate(mu.view(), sigma.view(), &cfg).is_err());
    }

    #[test]
    fn single_member_is_unchanged() {
        let t = probs(array![[[0.2, 0.5, 0.3], [0.9, 0.05, 0.05]]]);
        let g = gated_members(&t, &GateConfig::new(1.0).unwrap()).unwrap();
        for n in 0..2 {
            for (a, b) in g.member_row(0, n).iter().zip(t.row(0, n)) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn worked_two_member_example() {
        let t = probs(array![[[0.9, 0.1]], [[0.5, 0.5]]]);
        let g = gated_members(&t, &GateConfig::with_epsilon(1.0, TINY_EPS).unwrap()).unwrap();
        assert!((g.gates[[0, 0]] - 0.969_803).abs() < 1e-6);
        assert!((g.gates[[0, 1]] - 0.776_870).abs() < 1e-6);
        assert!((g.member_row(0, 0)[0] - 0.918_269).abs() < 1e-6);
        assert!((g.member_row(0, 0)[1] - 0.081_731).abs() < 1e-6);
        assert!(!g.fallback[0]);
    }

    #[test]
    fn identical_members_zero_eu() {
        let t = probs(array![[[0.6, 0.3, 0.1]], [[0.6, 0.3, 0.1]]]);
        for k in [0.5, 1.0, 4.0] {
            let d = gated_decomposition(&t, &GateConfig::new(k).unwrap()).unwrap();
            assert!(d[0].eu.abs() < 1e-9);
            assert!((d[0].tu - d[0].au).abs() < 1e-9);
        }
    }

    #[test]
    fn extreme_disagreement() {
        let t = probs(array![[[1.0, 0.0]], [[0.0, 1.0]]]);
        let d = gated_decomposition(&t, &GateConfig::new(1e-12).unwrap()).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((d[0].tu - ln2).abs() < 1e-12);
        assert!(d[0].au.abs() < 1e-12);
        assert!((d[0].eu - ln2).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mass_falls_back() {
        let p = [0.3, 0.7];
        let mut mass = [0.0; 2];
        let mut out = [0.0; 2];
        assert!(!gate_row(&p, &[0.0, 0.0], &mut mass, &mut out));
        assert_eq!(out, p);
        assert!(!gate_row(&p, &[1e-301, 0.0], &mut mass, &mut out));
        assert!(gate_row(&p, &[0.5, 0.25], &mut mass, &mut out));
        assert!((out[0] - 0.15 / 0.325).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn gate_monotone(
            mu in 0.01f64..1.0,
            sigma in 0.01f64..0.5,
            k in 0.1f64..5.0,
            bump in 1.01f64..2.0,
        ) {
            let cfg = GateConfig::new(k).unwrap();
            let base = gate_value(mu, sigma, &cfg);
            prop_assert!((0.0..1.0).contains(&base));
            // only assert strictness while the gate is away from saturation
            if mu / (k * sigma) < 30.0 {
                prop_assert!(gate_value(mu, sigma * bump, &cfg) < base);
                let cfg_k = GateConfig::new(k * bump).unwrap();
                prop_assert!(gate_value(mu, sigma, &cfg_k) < base);
                prop_assert!(gate_value((mu * bump).min(1.0), sigma, &cfg) > base || mu * bump > 1.0);
            } else {
                prop_assert!(gate_value(mu, sigma * bump, &cfg) <= base);
            }
        }

        #[test]
        fn gated_eu_non_negative(
            rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 4), 2..7),
            k in 0.1f64..5.0,
        ) {
            let m = rows.len();
            let flat: Vec<f64> = rows
                .iter()
                .flat_map(|r| {
                    let s: f64 = r.iter().sum::<f64>() + 1e-6;
                    r.iter().map(move |v| (v + 0.25e-6) / s).collect::<Vec<_>>()
                })
                .collect();
            let t = probs(Array3::from_shape_vec((m, 1, 4), flat).unwrap());
            let d = gated_decomposition(&t, &GateConfig::new(k).unwrap()).unwrap();
            prop_assert!(d[0].eu >= -1e-9);
            prop_assert_eq!(d[0].eu, d[0].tu - d[0].au);
        }
    }
}
