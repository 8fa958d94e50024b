//! EPT container for ensemble prediction tensors, plus CSV label files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EPT1"            4 bytes magic
//! header_len        u32
//! manifest          header_len bytes of UTF-8 JSON
//! payload           M*N*C IEEE-754 values (binary32 or binary64), row-major [m][n][c]
//! ```
//!
//! The payload length must match the manifest exactly. Loads are strict:
//! any malformed input yields an [`EptError`] and no tensor.
//!
//! Label files are UTF-8 CSV, one record per sample, LF line endings.
//! Multiclass records hold a single class index; multilabel records hold
//! `C` comma-separated `0`/`1` flags.

use std::fmt;
use std::io::{Read, Write};

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Tolerance on the row sum of multiclass probability rows at load time.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;
/// Slack allowed outside `[0, 1]` for stored probabilities.
pub const PROB_RANGE_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EptError {
    #[error("unrecognized container: magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("truncated header: {0}")]
    TruncatedHeader(&'static str),

    #[error("header length {declared} exceeds the {available} bytes left in the stream")]
    HeaderTooLong { declared: usize, available: usize },

    #[error("manifest is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("payload has {extra} trailing bytes beyond the declared shape")]
    TrailingBytes { extra: usize },

    #[error("non-finite value {value} at [{member}][{sample}][{class}]")]
    NonFinite {
        member: usize,
        sample: usize,
        class: usize,
        value: f64,
    },

    #[error("probability {value} at [{member}][{sample}][{class}] is outside [0, 1]")]
    ProbabilityOutOfRange {
        member: usize,
        sample: usize,
        class: usize,
        value: f64,
    },

    #[error("row [{member}][{sample}] sums to {sum}, which exceeds the tolerance around 1")]
    RowSum {
        member: usize,
        sample: usize,
        sum: f64,
    },

    #[error("label file has {found} records, expected {expected}")]
    LabelCount { expected: usize, found: usize },

    #[error("line {line}: class index {value} out of range for {classes} classes")]
    ClassOutOfRange {
        line: usize,
        value: u64,
        classes: usize,
    },

    #[error("line {line}: multilabel entry {text:?} is not 0 or 1")]
    NonBinary { line: usize, text: String },

    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: cannot parse {text:?} as a class index")]
    LabelParse { line: usize, text: String },

    #[error("label file is not valid UTF-8")]
    Utf8,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type EptResult<T> = std::result::Result<T, EptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Probs,
    Logits,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Probs => "probs",
            Kind::Logits => "logits",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Multiclass,
    Multilabel,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Multiclass => "multiclass",
            Task::Multilabel => "multilabel",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Binary32,
    Binary64,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::Binary32 => 4,
            Precision::Binary64 => 8,
        }
    }
}

/// JSON header of an EPT file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EptManifest {
    pub version: u32,
    pub kind: Kind,
    pub task: Task,
    pub members: usize,
    pub samples: usize,
    pub classes: usize,
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
}

impl EptManifest {
    /// Exact payload size in bytes, or an error if the shape is invalid.
    pub fn payload_len(&self) -> EptResult<usize> {
        self.check()?;
        self.members
            .checked_mul(self.samples)
            .and_then(|v| v.checked_mul(self.classes))
            .and_then(|v| v.checked_mul(self.precision.width()))
            .ok_or_else(|| EptError::Manifest("payload size overflows".into()))
    }

    fn check(&self) -> EptResult<()> {
        if self.version != FORMAT_VERSION {
            return Err(EptError::Manifest(format!(
                "unsupported version {}",
                self.version
            )));
        }
        if self.members == 0 || self.samples == 0 {
            return Err(EptError::Manifest(
                "members and samples must be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(EptError::Manifest(format!(
                "classes must be >= 2, got {}",
                self.classes
            )));
        }
        Ok(())
    }
}

/// `M x N x C` member outputs together with their manifest.
///
/// Values are held as `f64`. For `binary32` tensors every value is exactly
/// representable in `f32`, so writing and re-reading is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTensor {
    manifest: EptManifest,
    data: Array3<f64>,
}

impl PredictionTensor {
    /// Builds a validated `binary64` tensor from an `[m][n][c]` array.
    pub fn new(kind: Kind, task: Task, data: Array3<f64>) -> EptResult<Self> {
        let (members, samples, classes) = data.dim();
        let manifest = EptManifest {
            version: FORMAT_VERSION,
            kind,
            task,
            members,
            samples,
            classes,
            precision: Precision::Binary64,
            epoch: None,
        };
        Self::from_parts(manifest, data)
    }

    /// Builds a tensor from a manifest and a matching array, validating both.
    pub fn from_parts(manifest: EptManifest, data: Array3<f64>) -> EptResult<Self> {
        manifest.check()?;
        if data.dim() != (manifest.members, manifest.samples, manifest.classes) {
            return Err(EptError::Manifest(format!(
                "array shape {:?} does not match manifest ({}, {}, {})",
                data.dim(),
                manifest.members,
                manifest.samples,
                manifest.classes
            )));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        let tensor = Self { manifest, data };
        tensor.validate()?;
        Ok(tensor)
    }

    /// Re-encodes at `precision`; narrowing to `binary32` rounds every value.
    pub fn with_precision(mut self, precision: Precision) -> EptResult<Self> {
        if precision == Precision::Binary32 {
            self.data.mapv_inplace(|v| v as f32 as f64);
        }
        self.manifest.precision = precision;
        self.validate()?;
        Ok(self)
    }

    pub fn with_epoch(mut self, epoch: Option<u64>) -> Self {
        self.manifest.epoch = epoch;
        self
    }

    pub fn manifest(&self) -> &EptManifest {
        &self.manifest
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn kind(&self) -> Kind {
        self.manifest.kind
    }

    pub fn task(&self) -> Task {
        self.manifest.task
    }

    pub fn members(&self) -> usize {
        self.manifest.members
    }

    pub fn samples(&self) -> usize {
        self.manifest.samples
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes
    }

    pub fn epoch(&self) -> Option<u64> {
        self.manifest.epoch
    }

    /// Row `[m][n][..]` as a contiguous slice.
    pub fn row(&self, member: usize, sample: usize) -> &[f64] {
        let c = self.manifest.classes;
        let start = (member * self.manifest.samples + sample) * c;
        &self.flat()[start..start + c]
    }

    /// Member slice `[m][..][..]` as an `N x C` view.
    pub fn member(&self, member: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(ndarray::Axis(0), member)
    }

    fn flat(&self) -> &[f64] {
        self.data
            .as_slice()
            .expect("tensor data is kept in standard layout")
    }

    /// Converts logits to probabilities: softmax per row for multiclass,
    /// the logistic function per entry for multilabel. Probability tensors
    /// are returned unchanged.
    pub fn to_probs(&self) -> PredictionTensor {
        if self.kind() == Kind::Probs {
            return self.clone();
        }
        let mut data = self.data.clone();
        match self.task() {
            Task::Multiclass => {
                for mut row in data.rows_mut() {
                    let p = crate::stats::softmax(row.as_slice().expect("standard layout"));
                    row.iter_mut().zip(p).for_each(|(dst, v)| *dst = v);
                }
            }
            Task::Multilabel => data.mapv_inplace(logistic),
        }
        let mut manifest = self.manifest.clone();
        manifest.kind = Kind::Probs;
        manifest.precision = Precision::Binary64;
        PredictionTensor { manifest, data }
    }

    fn validate(&self) -> EptResult<()> {
        let (members, samples, classes) = self.data.dim();
        let check_probs = self.manifest.kind == Kind::Probs;
        let check_sums = check_probs && self.manifest.task == Task::Multiclass;
        for m in 0..members {
            for n in 0..samples {
                let row = self.row(m, n);
                for (c, &value) in row.iter().enumerate() {
                    if !value.is_finite() {
                        return Err(EptError::NonFinite {
                            member: m,
                            sample: n,
                            class: c,
                            value,
                        });
                    }
                    if check_probs
                        && !(-PROB_RANGE_SLACK..=1.0 + PROB_RANGE_SLACK).contains(&value)
                    {
                        return Err(EptError::ProbabilityOutOfRange {
                            member: m,
                            sample: n,
                            class: c,
                            value,
                        });
                    }
                }
                if check_sums {
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(EptError::RowSum {
                            member: m,
                            sample: n,
                            sum,
                        });
                    }
                }
                debug_assert_eq!(row.len(), classes);
            }
        }
        Ok(())
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Serializes `tensor` to `sink` and returns the number of bytes written.
pub fn write_ept<W: Write>(tensor: &PredictionTensor, mut sink: W) -> EptResult<usize> {
    tensor.validate()?;
    let header = serde_json::to_vec(&tensor.manifest)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| EptError::Manifest("manifest longer than u32::MAX bytes".into()))?;

    let payload_len = tensor.manifest.payload_len()?;
    let mut buf = Vec::with_capacity(8 + header.len() + payload_len);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&header);
    match tensor.manifest.precision {
        Precision::Binary32 => {
            for &v in tensor.flat() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::Binary64 => {
            for &v in tensor.flat() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len())
}

/// Parses an EPT container, validating the manifest, payload length, and
/// value constraints.
pub fn read_ept<R: Read>(mut source: R) -> EptResult<PredictionTensor> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_ept(&bytes)
}

pub fn decode_ept(bytes: &[u8]) -> EptResult<PredictionTensor> {
    if bytes.len() < 4 {
        return Err(EptError::TruncatedHeader("stream shorter than magic"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if &magic != MAGIC {
        return Err(EptError::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(EptError::TruncatedHeader("missing header length"));
    }
    let declared = u32::from_le_bytes(bytes[4..8].try_into().expect("length checked")) as usize;
    let rest = &bytes[8..];
    if declared > rest.len() {
        return Err(EptError::HeaderTooLong {
            declared,
            available: rest.len(),
        });
    }
    let manifest: EptManifest = serde_json::from_slice(&rest[..declared])?;
    let expected = manifest.payload_len()?;
    let payload = &rest[declared..];
    if payload.len() < expected {
        return Err(EptError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(EptError::TrailingBytes {
            extra: payload.len() - expected,
        });
    }

    let values: Vec<f64> = match manifest.precision {
        Precision::Binary32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")) as f64)
            .collect(),
        Precision::Binary64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect(),
    };
    let shape = (manifest.members, manifest.samples, manifest.classes);
    let data = Array3::from_shape_vec(shape, values)
        .map_err(|e| EptError::Manifest(e.to_string()))?;
    PredictionTensor::from_parts(manifest, data)
}

/// Ground-truth labels paired with a tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelVector {
    Multiclass(Vec<usize>),
    /// `N x C` matrix of 0/1 flags.
    Multilabel(Array2<u8>),
}

impl LabelVector {
    pub fn len(&self) -> usize {
        match self {
            LabelVector::Multiclass(v) => v.len(),
            LabelVector::Multilabel(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            LabelVector::Multiclass(_) => Task::Multiclass,
            LabelVector::Multilabel(_) => Task::Multilabel,
        }
    }

    pub fn as_multiclass(&self) -> Option<&[usize]> {
        match self {
            LabelVector::Multiclass(v) => Some(v),
            LabelVector::Multilabel(_) => None,
        }
    }
}

/// Parses a label CSV whose shape is fixed by `manifest`.
pub fn read_labels<R: Read>(mut source: R, manifest: &EptManifest) -> EptResult<LabelVector> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| EptError::Utf8)?;
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    if lines.len() != manifest.samples {
        return Err(EptError::LabelCount {
            expected: manifest.samples,
            found: lines.len(),
        });
    }
    let classes = manifest.classes;

    match manifest.task {
        Task::Multiclass => {
            let mut labels = Vec::with_capacity(lines.len());
            for (i, raw) in lines.iter().enumerate() {
                let line = i + 1;
                let field = raw.trim_end_matches('\r').trim();
                let value: u64 = field.parse().map_err(|_| EptError::LabelParse {
                    line,
                    text: field.to_string(),
                })?;
                if value >= classes as u64 {
                    return Err(EptError::ClassOutOfRange {
                        line,
                        value,
                        classes,
                    });
                }
                labels.push(value as usize);
            }
            Ok(LabelVector::Multiclass(labels))
        }
        Task::Multilabel => {
            let mut matrix = Array2::<u8>::zeros((lines.len(), classes));
            for (i, raw) in lines.iter().enumerate() {
                let line = i + 1;
                let fields: Vec<&str> = raw.trim_end_matches('\r').split(',').collect();
                if fields.len() != classes {
                    return Err(EptError::FieldCount {
                        line,
                        expected: classes,
                        found: fields.len(),
                    });
                }
                for (c, f) in fields.iter().enumerate() {
                    matrix[[i, c]] = match f.trim() {
                        "0" => 0,
                        "1" => 1,
                        other => {
                            return Err(EptError::NonBinary {
                                line,
                                text: other.to_string(),
                            })
                        }
                    };
                }
            }
            Ok(LabelVector::Multilabel(matrix))
        }
    }
}

/// Writes labels in the CSV layout accepted by [`read_labels`].
pub fn write_labels<W: Write>(labels: &LabelVector, mut sink: W) -> EptResult<()> {
    let mut out = String::new();
    match labels {
        LabelVector::Multiclass(v) => {
            for l in v {
                out.push_str(&l.to_string());
                out.push('\n');
            }
        }
        LabelVector::Multilabel(m) => {
            for row in m.rows() {
                let fields: Vec<String> = row.iter().map(|b| b.to_string()).collect();
                out.push_str(&fields.join(","));
                out.push('\n');
            }
        }
    }
    sink.write_all(out.as_bytes())?;
    sink.flush()?;
    Ok(())
}
