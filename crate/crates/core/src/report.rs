//! Per-sample report rows and their CSV/JSON encodings.
//!
//! CSV numbers carry 9 significant digits in `%.9g` style with a `.` decimal
//! separator, so tables are stable across platforms. Multilabel tensors are
//! reported per `(sample, label)`: each label is treated as the two-way
//! distribution `(1 - p, p)` for the entropy and pairwise measures, and the
//! gated columns are omitted because gating applies to multiclass tensors only.

use std::io::Write;
use std::str::FromStr;

use ndarray::Array3;
use serde_json::{Map, Value};

use crate::baseline::{baseline_measures, BaselineMeasures};
use crate::ept::{Kind, LabelVector, PredictionTensor, Task};
use crate::error::{require_positive, Error, Result};
use crate::gating::{gated_decomposition, GateConfig};
use crate::margin::{decide_multiclass, decide_multilabel_stats, Decision, MarginDecision};
use crate::stats::{class_stats, require_probs, Decomposition};
use crate::DEFAULT_EPSILON;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    /// Gate sharpness values, one gated column group each.
    pub k: Vec<f64>,
    pub epsilon: f64,
    /// `k` used for the SNR decision column.
    pub decision_k: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            k: vec![1.0],
            epsilon: DEFAULT_EPSILON,
            decision_k: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatedValues {
    pub k: f64,
    pub tu: f64,
    pub au: f64,
    pub eu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub sample: usize,
    /// Label index for multilabel rows.
    pub label: Option<usize>,
    pub tu: f64,
    pub au: f64,
    pub eu: f64,
    pub gated: Vec<GatedValues>,
    pub gmu: f64,
    pub snr: f64,
    pub decision: Decision,
    pub epce: f64,
    pub epkl: f64,
    pub epjs: f64,
    /// Whether the top-1 prediction matches the label, when labels are given.
    pub correct: Option<bool>,
}

fn validate_config(cfg: &ReportConfig) -> Result<()> {
    if cfg.k.is_empty() {
        return Err(Error::Empty("k list"));
    }
    for &k in &cfg.k {
        require_positive("k", k)?;
    }
    require_positive("decision_k", cfg.decision_k)?;
    require_positive("epsilon", cfg.epsilon)?;
    Ok(())
}

/// Builds report rows for a probability tensor, ordered by sample (then label).
pub fn build_report(tensor: &PredictionTensor, labels: Option<&LabelVector>, cfg: &ReportConfig) -> Result<Vec<ReportRow>> {
    validate_config(cfg)?;
    require_probs(tensor)?;
    if let Some(labels) = labels {
        if labels.task() != tensor.task() {
            return Err(Error::TaskMismatch {
                expected: tensor.task(),
                found: labels.task(),
            });
        }
        if labels.len() != tensor.samples() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: tensor.samples(),
                found: labels.len(),
            });
        }
    }
    match tensor.task() {
        Task::Multiclass => multiclass_rows(tensor, labels, cfg),
        Task::Multilabel => multilabel_rows(tensor, labels, cfg),
    }
}

fn multiclass_rows(tensor: &PredictionTensor, labels: Option<&LabelVector>, cfg: &ReportConfig) -> Result<Vec<ReportRow>> {
    let base = baseline_measures(tensor)?;
    let stats = class_stats(tensor)?;
    let decisions = decide_multiclass(&stats, cfg.decision_k, cfg.epsilon)?;
    let gated: Vec<Vec<Decomposition>> = cfg
        .k
        .iter()
        .map(|&k| gated_decomposition(tensor, &GateConfig::with_epsilon(k, cfg.epsilon)?))
        .collect::<Result<_>>()?;
    let truth = labels.and_then(LabelVector::as_multiclass);
    Ok((0..tensor.samples())
        .map(|n| {
            let g = cfg
                .k
                .iter()
                .zip(&gated)
                .map(|(&k, d)| GatedValues {
                    k,
                    tu: d[n].tu,
                    au: d[n].au,
                    eu: d[n].eu,
                })
                .collect();
            row(n, None, &base[n], g, &decisions[n], truth.map(|t| decisions[n].top1 == t[n]))
        })
        .collect())
}

fn row(
    sample: usize,
    label: Option<usize>,
    b: &BaselineMeasures,
    gated: Vec<GatedValues>,
    d: &MarginDecision,
    correct: Option<bool>,
) -> ReportRow {
    ReportRow {
        sample,
        label,
        tu: b.tu,
        au: b.au,
        eu: b.eu,
        gated,
        gmu: d.gmu,
        snr: d.snr,
        decision: d.decision,
        epce: b.epce,
        epkl: b.epkl,
        epjs: b.epjs,
        correct,
    }
}

/// `M x (N*C) x 2` tensor of `(1 - p, p)` rows, sample-major.
fn binary_expansion(tensor: &PredictionTensor) -> Result<PredictionTensor> {
    let (m, n, c) = (tensor.members(), tensor.samples(), tensor.classes());
    let data = tensor.data();
    let expanded = Array3::from_shape_fn((m, n * c, 2), |(k, r, b)| {
        let p = data[[k, r / c, r % c]];
        if b == 1 {
            p
        } else {
            1.0 - p
        }
    });
    Ok(PredictionTensor::new(Kind::Probs, Task::Multiclass, expanded)?)
}

fn multilabel_rows(tensor: &PredictionTensor, labels: Option<&LabelVector>, cfg: &ReportConfig) -> Result<Vec<ReportRow>> {
    let c = tensor.classes();
    let base = baseline_measures(&binary_expansion(tensor)?)?;
    let stats = class_stats(tensor)?;
    let decisions = decide_multilabel_stats(&stats, cfg.decision_k, cfg.epsilon)?;
    let truth = match labels {
        Some(LabelVector::Multilabel(m)) => Some(m),
        _ => None,
    };
    let mut rows = Vec::with_capacity(tensor.samples() * c);
    for (n, per_label) in decisions.iter().enumerate() {
        for (j, d) in per_label.iter().enumerate() {
            let correct = truth.map(|t| (d.top1 == 1) == (t[[n, j]] == 1));
            rows.push(row(n, Some(j), &base[n * c + j], Vec::new(), d, correct));
        }
    }
    Ok(rows)
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros removed,
/// exponent form outside `[1e-4, 1e9)`.
pub fn format_sig9(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", strip_zeros(mantissa), exp.abs())
    } else {
        let prec = (8 - exp) as usize;
        strip_zeros(&format!("{v:.prec$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn has_labels(rows: &[ReportRow]) -> (bool, bool) {
    let first = rows.first();
    (
        first.is_some_and(|r| r.label.is_some()),
        first.is_some_and(|r| r.correct.is_some()),
    )
}

/// Column names in CSV order.
pub fn header(rows: &[ReportRow], ks: &[f64]) -> Vec<String> {
    let (multilabel, correct) = has_labels(rows);
    let mut cols = vec!["sample".to_string()];
    if multilabel {
        cols.push("label".into());
    }
    cols.extend(["tu", "au", "eu"].map(String::from));
    if !multilabel {
        for &k in ks {
            let k = format_sig9(k);
            cols.extend(["tu", "au", "eu"].map(|m| format!("{m}_gated_k{k}")));
        }
    }
    cols.extend(["gmu", "snr", "decision", "epce", "epkl", "epjs"].map(String::from));
    if correct {
        cols.push("correct".into());
    }
    cols
}

fn fields(r: &ReportRow) -> Vec<(String, Value, String)> {
    let num = |name: &str, v: f64| (name.to_string(), Value::from(v), format_sig9(v));
    let mut out = vec![(
        "sample".to_string(),
        Value::from(r.sample),
        r.sample.to_string(),
    )];
    if let Some(l) = r.label {
        out.push(("label".into(), Value::from(l), l.to_string()));
    }
    out.extend([num("tu", r.tu), num("au", r.au), num("eu", r.eu)]);
    for g in &r.gated {
        let k = format_sig9(g.k);
        out.push(num(&format!("tu_gated_k{k}"), g.tu));
        out.push(num(&format!("au_gated_k{k}"), g.au));
        out.push(num(&format!("eu_gated_k{k}"), g.eu));
    }
    out.extend([num("gmu", r.gmu), num("snr", r.snr)]);
    let decision = r.decision.to_string();
    out.push(("decision".into(), Value::from(decision.clone()), decision));
    out.extend([num("epce", r.epce), num("epkl", r.epkl), num("epjs", r.epjs)]);
    if let Some(c) = r.correct {
        out.push(("correct".into(), Value::from(c), u8::from(c).to_string()));
    }
    out
}

/// Header line plus one LF-terminated line per row.
pub fn write_csv<W: Write>(rows: &[ReportRow], ks: &[f64], mut sink: W) -> std::io::Result<()> {
    writeln!(sink, "{}", header(rows, ks).join(","))?;
    for r in rows {
        let line: Vec<String> = fields(r).into_iter().map(|(_, _, s)| s).collect();
        writeln!(sink, "{}", line.join(","))?;
    }
    Ok(())
}

/// Flat JSON objects keyed by the CSV column names.
pub fn to_json(rows: &[ReportRow]) -> Value {
    Value::Array(
        rows.iter()
            .map(|r| Value::Object(fields(r).into_iter().map(|(k, v, _)| (k, v)).collect::<Map<_, _>>()))
            .collect(),
    )
}

/// Per-sample scores for OOD detection; higher means more uncertain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    Tu,
    Au,
    Eu,
    Epce,
    Epkl,
    Epjs,
    Gmu,
    TuGated,
    AuGated,
    EuGated,
}

impl Measure {
    pub const ALL: [Measure; 10] = [
        Measure::Tu,
        Measure::Au,
        Measure::Eu,
        Measure::Epce,
        Measure::Epkl,
        Measure::Epjs,
        Measure::Gmu,
        Measure::TuGated,
        Measure::AuGated,
        Measure::EuGated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Tu => "tu",
            Measure::Au => "au",
            Measure::Eu => "eu",
            Measure::Epce => "epce",
            Measure::Epkl => "epkl",
            Measure::Epjs => "epjs",
            Measure::Gmu => "gmu",
            Measure::TuGated => "tu_gated",
            Measure::AuGated => "au_gated",
            Measure::EuGated => "eu_gated",
        }
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown measure `{s}`")))
    }
}

/// Scores of one measure for every sample of a multiclass probs tensor.
pub fn measure_scores(tensor: &PredictionTensor, measure: Measure, k: f64, eps: f64) -> Result<Vec<f64>> {
    let scores = match measure {
        Measure::Tu | Measure::Au | Measure::Eu | Measure::Epce | Measure::Epkl | Measure::Epjs => {
            baseline_measures(tensor)?
                .into_iter()
                .map(|b| match measure {
                    Measure::Tu => b.tu,
                    Measure::Au => b.au,
                    Measure::Eu => b.eu,
                    Measure::Epce => b.epce,
                    Measure::Epkl => b.epkl,
                    _ => b.epjs,
                })
                .collect()
        }
        Measure::Gmu => decide_multiclass(&class_stats(tensor)?, k, eps)?
            .into_iter()
            .map(|d| d.gmu)
            .collect(),
        Measure::TuGated | Measure::AuGated | Measure::EuGated => {
            gated_decomposition(tensor, &GateConfig::with_epsilon(k, eps)?)?
                .into_iter()
                .map(|d| match measure {
                    Measure::TuGated => d.tu,
                    Measure::AuGated => d.au,
                    _ => d.eu,
                })
                .collect()
        }
    };
    Ok(scores)
}
