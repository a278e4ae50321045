//! Shared domain types and classification metrics.

use std::fmt;

use crate::error::{Error, Result};

/// Rhythm class, in canonical order N, A, O, ~.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    AF,
    Other,
    Noisy,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Normal, Label::AF, Label::Other, Label::Noisy];
    pub const COUNT: usize = 4;

    pub fn code(self) -> char {
        match self {
            Label::Normal => 'N',
            Label::AF => 'A',
            Label::Other => 'O',
            Label::Noisy => '~',
        }
    }

    pub fn from_code(code: &str) -> Result<Self> {
        match code {
            "N" => Ok(Label::Normal),
            "A" => Ok(Label::AF),
            "O" => Ok(Label::Other),
            "~" => Ok(Label::Noisy),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }

    /// Position in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// Whether a stage runs with training-time randomness or deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Two-class view used on the Normal/AF evaluation sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Positive,
    Negative,
}

/// AF is the positive class; every other rhythm is negative.
pub fn binarize(label: Label) -> Binary {
    if label == Label::AF {
        Binary::Positive
    } else {
        Binary::Negative
    }
}

/// A single-lead ECG recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    pub samples: Vec<f64>,
    pub fs_hz: u32,
    pub label: Option<Label>,
}

impl EcgRecord {
    pub fn new(id: impl Into<String>, samples: Vec<f64>, fs_hz: u32, label: Option<Label>) -> Result<Self> {
        let rec = Self {
            id: id.into(),
            samples,
            fs_hz,
            label,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidRecord(format!("{}: no samples", self.id)));
        }
        if self.fs_hz == 0 {
            return Err(Error::InvalidRecord(format!("{}: sampling rate is zero", self.id)));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord(format!(
                "{}: non-finite sample at index {i}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs_hz as f64
    }

    /// Same id, rate and label with new samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            id: self.id.clone(),
            samples,
            fs_hz: self.fs_hz,
            label: self.label,
        }
    }
}

/// Class probabilities in canonical label order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbVector(pub [f64; 4]);

impl ProbVector {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn uniform() -> Self {
        ProbVector([0.25; 4])
    }

    /// Numerically stable softmax of raw scores.
    pub fn from_logits(logits: &[f64]) -> Self {
        assert_eq!(logits.len(), 4, "expected 4 logits");
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p = [0.0; 4];
        let mut sum = 0.0;
        for (pi, &z) in p.iter_mut().zip(logits) {
            *pi = (z - max).exp();
            sum += *pi;
        }
        for pi in &mut p {
            *pi /= sum;
        }
        ProbVector(p)
    }

    pub fn get(&self, label: Label) -> f64 {
        self.0[label.index()]
    }

    /// Highest-probability label; ties go to the earlier canonical class.
    pub fn argmax(&self) -> Label {
        let mut best = 0;
        for i in 1..4 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        Label::ALL[best]
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|p| (0.0..=1.0).contains(p))
            && (self.0.iter().sum::<f64>() - 1.0).abs() <= Self::TOLERANCE
    }

    /// Per-class mean of a non-empty set of vectors.
    pub fn mean(vectors: &[ProbVector]) -> Self {
        assert!(!vectors.is_empty());
        let mut acc = [0.0; 4];
        for v in vectors {
            for (a, p) in acc.iter_mut().zip(v.0) {
                *a += p;
            }
        }
        let n = vectors.len() as f64;
        ProbVector(acc.map(|a| a / n))
    }
}

/// Binary confusion counts for one designated positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts for `positive` over paired (truth, prediction) labels.
    pub fn for_class(pairs: impl IntoIterator<Item = (Label, Label)>, positive: Label) -> Self {
        let mut c = Self::default();
        for (truth, pred) in pairs {
            match (truth == positive, pred == positive) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// AF-vs-rest counts after [`binarize`].
    pub fn binary_af(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut c = Self::default();
        for (truth, pred) in pairs {
            match (binarize(truth), binarize(pred)) {
                (Binary::Positive, Binary::Positive) => c.tp += 1,
                (Binary::Negative, Binary::Positive) => c.fp += 1,
                (Binary::Positive, Binary::Negative) => c.fn_ += 1,
                (Binary::Negative, Binary::Negative) => c.tn += 1,
            }
        }
        c
    }
}

pub fn f1_score(c: &ConfusionCounts) -> Result<f64> {
    if c.tp + c.fp + c.fn_ == 0 {
        return Err(Error::UndefinedMetric("F1 needs tp + fp + fn > 0"));
    }
    let precision = if c.tp + c.fp > 0 {
        c.tp as f64 / (c.tp + c.fp) as f64
    } else {
        0.0
    };
    let recall = if c.tp + c.fn_ > 0 {
        c.tp as f64 / (c.tp + c.fn_) as f64
    } else {
        0.0
    };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("accuracy of an empty evaluation"));
    }
    Ok((c.tp + c.tn) as f64 / total as f64)
}

/// Summary metrics over paired (truth, prediction) labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Binary F1 of AF against every other class. Zero when the set has
    /// neither true nor predicted AF.
    pub f1_af: f64,
    /// Mean per-class F1 over classes that occur in truth or prediction.
    pub f1_macro: f64,
    /// Four-class accuracy.
    pub accuracy: f64,
}

pub fn evaluate(pairs: &[(Label, Label)]) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("evaluation over zero records"));
    }
    let f1_af = f1_score(&ConfusionCounts::binary_af(pairs.iter().copied())).unwrap_or(0.0);
    let per_class: Vec<f64> = Label::ALL
        .iter()
        .filter_map(|&l| f1_score(&ConfusionCounts::for_class(pairs.iter().copied(), l)).ok())
        .collect();
    let f1_macro = per_class.iter().sum::<f64>() / per_class.len() as f64;
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    Ok(EvalMetrics {
        f1_af,
        f1_macro,
        accuracy: correct as f64 / pairs.len() as f64,
    })
}
