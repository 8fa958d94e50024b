//! Seeded synthetic ensembles.
//!
//! Per sample `n`, true logits `z_n[c] ~ N(0, s_signal²)`; member `m` sees
//! `logit_scale · (z_n + ε_{n,m})` with `ε ~ N(0, s_noise²)` per class, and the
//! label is drawn from `softmax(z_n)`. Collapse series reuse the same `z` and
//! the same unit noise draws, scaling the noise by `exp(-λ t)` at epoch `t`.
//!
//! # Fixture contract
//!
//! Every draw is addressed, never sequenced. The generator is ChaCha8
//! (`rand_chacha::ChaCha8Rng::seed_from_u64(seed)`), the stream is the sample
//! index `n`, and the 32-bit word position of a draw is
//! `4 · ((tag << 48) | (member << 24) | class)`, with tag 0 for true logits,
//! 1 for member noise and 2 for the label. A Gaussian consumes the two `u64`s
//! at that position via Box–Muller (`u1 = ((a >> 11) + 1)·2⁻⁵³`,
//! `u2 = (b >> 11)·2⁻⁵³`, `g = √(−2 ln u1)·cos 2πu2`); a label uses
//! `u = (a >> 11)·2⁻⁵³` with inverse-CDF lookup. Output therefore does not
//! depend on generation order.

use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::ept::{Kind, LabelVector, PredictionTensor, Task};
use crate::error::{Error, Result};
use crate::stats::softmax_in_place;

const TAG_SIGNAL: u64 = 0;
const TAG_NOISE: u64 = 1;
const TAG_LABEL: u64 = 2;
/// Members and classes are packed into 24-bit fields of the draw address.
pub const MAX_INDEX: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthMode {
    Static,
    Collapse { epochs: usize, decay: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub samples: usize,
    pub classes: usize,
    pub members: usize,
    pub s_signal: f64,
    pub s_noise: f64,
    pub seed: u64,
    pub mode: SynthMode,
    /// Multiplies every member logit; `T*` for miscalibration fixtures.
    pub logit_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            classes: 10,
            members: 5,
            s_signal: 1.0,
            s_noise: 0.5,
            seed: 0,
            mode: SynthMode::Static,
            logit_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidConfig(msg));
        if self.samples == 0 || self.classes == 0 || self.members == 0 {
            return invalid("samples, classes and members must be positive".into());
        }
        if self.members > MAX_INDEX || self.classes > MAX_INDEX {
            return invalid(format!("members and classes must be at most {MAX_INDEX}"));
        }
        if !(self.s_signal.is_finite() && self.s_signal >= 0.0) {
            return invalid(format!("s_signal must be finite and >= 0, got {}", self.s_signal));
        }
        if !(self.s_noise.is_finite() && self.s_noise >= 0.0) {
            return invalid(format!("s_noise must be finite and >= 0, got {}", self.s_noise));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return invalid(format!("logit_scale must be finite and > 0, got {}", self.logit_scale));
        }
        if let SynthMode::Collapse { epochs, decay } = self.mode {
            if epochs == 0 {
                return invalid("collapse mode needs at least one epoch".into());
            }
            if !(decay.is_finite() && decay > 0.0) {
                return invalid(format!("decay must be finite and > 0, got {decay}"));
            }
        }
        Ok(())
    }

    /// Noise scale used at `epoch`; the static scale outside collapse mode.
    pub fn noise_at(&self, epoch: usize) -> f64 {
        match self.mode {
            SynthMode::Static => self.s_noise,
            SynthMode::Collapse { decay, .. } => self.s_noise * (-decay * epoch as f64).exp(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub probs: PredictionTensor,
    pub logits: PredictionTensor,
    pub labels: LabelVector,
}

struct Draws {
    rng: ChaCha8Rng,
}

impl Draws {
    fn new(seed: u64, sample: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(sample as u64);
        Self { rng }
    }

    fn seek(&mut self, tag: u64, member: usize, class: usize) {
        let address = (tag << 48) | ((member as u64) << 24) | class as u64;
        self.rng.set_word_pos(4 * address as u128);
    }

    /// Next Gaussian; successive calls after a seek walk consecutive classes.
    fn gaussian(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        let u1 = ((a >> 11) + 1) as f64 * f64::EPSILON / 2.0;
        let u2 = (b >> 11) as f64 * f64::EPSILON / 2.0;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn uniform(&mut self) -> f64 {
        let a = self.rng.next_u64();
        self.rng.next_u64();
        (a >> 11) as f64 * f64::EPSILON / 2.0
    }
}

/// Unit-scale draws for one sample, shared by every epoch.
struct SampleDraws {
    z: Vec<f64>,
    /// `members × classes`, standard normal.
    noise: Vec<f64>,
    label: usize,
}

fn draw_sample(cfg: &SynthConfig, n: usize) -> SampleDraws {
    let c = cfg.classes;
    let mut d = Draws::new(cfg.seed, n);
    d.seek(TAG_SIGNAL, 0, 0);
    let z: Vec<f64> = (0..c).map(|_| cfg.s_signal * d.gaussian()).collect();
    let mut noise = Vec::with_capacity(cfg.members * c);
    for m in 0..cfg.members {
        d.seek(TAG_NOISE, m, 0);
        noise.extend((0..c).map(|_| d.gaussian()));
    }
    d.seek(TAG_LABEL, 0, 0);
    let u = d.uniform();
    let mut p = z.clone();
    softmax_in_place(&mut p);
    let mut acc = 0.0;
    let label = p
        .iter()
        .position(|&q| {
            acc += q;
            u < acc
        })
        .unwrap_or(c - 1);
    SampleDraws { z, noise, label }
}

fn draw_all(cfg: &SynthConfig) -> Vec<SampleDraws> {
    (0..cfg.samples).map(|n| draw_sample(cfg, n)).collect()
}

fn logits_at(cfg: &SynthConfig, draws: &[SampleDraws], s_noise: f64) -> Array3<f64> {
    let (m, n, c) = (cfg.members, cfg.samples, cfg.classes);
    Array3::from_shape_fn((m, n, c), |(k, s, j)| {
        let d = &draws[s];
        cfg.logit_scale * (d.z[j] + s_noise * d.noise[k * c + j])
    })
}

fn probs_of(logits: &Array3<f64>) -> Array3<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    probs
}

fn tensor(kind: Kind, data: Array3<f64>) -> Result<PredictionTensor> {
    Ok(PredictionTensor::new(kind, Task::Multiclass, data)?)
}

/// Static ensemble with matching probs/logits tensors and labels.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    if cfg.mode != SynthMode::Static {
        return Err(Error::InvalidConfig("generate requires static mode".into()));
    }
    let draws = draw_all(cfg);
    let logits = logits_at(cfg, &draws, cfg.s_noise);
    let probs = probs_of(&logits);
    Ok(SynthOutput {
        probs: tensor(Kind::Probs, probs)?,
        logits: tensor(Kind::Logits, logits)?,
        labels: LabelVector::Multiclass(draws.iter().map(|d| d.label).collect()),
    })
}

/// One probs tensor per epoch `0..E`, each tagged with its epoch.
pub fn generate_collapse_series(cfg: &SynthConfig) -> Result<Vec<(u64, PredictionTensor)>> {
    let (series, _) = generate_collapse_series_with_labels(cfg)?;
    Ok(series)
}

/// As [`generate_collapse_series`], also returning the shared labels.
pub fn generate_collapse_series_with_labels(
    cfg: &SynthConfig,
) -> Result<(Vec<(u64, PredictionTensor)>, LabelVector)> {
    cfg.validate()?;
    let SynthMode::Collapse { epochs, .. } = cfg.mode else {
        return Err(Error::InvalidConfig("generate_collapse_series requires collapse mode".into()));
    };
    let draws = draw_all(cfg);
    let series = (0..epochs)
        .map(|t| {
            let probs = probs_of(&logits_at(cfg, &draws, cfg.noise_at(t)));
            Ok((t as u64, tensor(Kind::Probs, probs)?.with_epoch(Some(t as u64))))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = LabelVector::Multiclass(draws.iter().map(|d| d.label).collect());
    Ok((series, labels))
}
