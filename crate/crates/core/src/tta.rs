//! Monte Carlo test-time augmentation.
//!
//! Each replica `n` samples a transformation sequence and a fresh acquisition
//! noise draw on its own substream of the configured seed, perturbs the
//! preprocessed signal, recomputes the spectrogram and runs the model in eval
//! mode. Replicas are aggregated by the mode of their argmax labels (or by
//! averaging probabilities). Because replica `n` only depends on `(seed, n)`,
//! the first `k` runs of an `N`-run prediction are exactly the runs of a
//! `k`-run prediction.

use std::f64::consts::PI;
use std::str::FromStr;

use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::augment::{add_sine, apply_all, sample_policy, AugmentPolicy, NoiseSpec, TransformSpec};
use crate::error::{Error, Result};
use crate::model::DualNetModel;
use crate::preprocess::{preprocess, spectrogram_with, PreprocessConfig, Spectrogram};
use crate::rng::SplitMix64;
use crate::types::{EcgRecord, Label, Mode, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mode,
    MeanProb,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Mode => "mode",
            Aggregation::MeanProb => "mean_prob",
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mode" => Ok(Aggregation::Mode),
            "mean_prob" => Ok(Aggregation::MeanProb),
            _ => Err(Error::Config(format!("aggregation must be mode or mean_prob, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaConfig {
    pub n_runs: usize,
    /// Sampled with CutMix disabled regardless of its configured probability.
    pub policy: AugmentPolicy,
    pub noise: NoiseSpec,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            n_runs: 25,
            policy: AugmentPolicy::default().test_time(),
            noise: NoiseSpec::default(),
            aggregation: Aggregation::Mode,
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("tta n_runs must be >= 1".into()));
        }
        if !(self.noise.sigma >= 0.0) || !self.noise.mu.is_finite() {
            return Err(Error::Config(format!("invalid noise spec {:?}", self.noise)));
        }
        self.policy.validate()
    }
}

/// One Monte Carlo replica.
#[derive(Debug, Clone, PartialEq)]
pub struct TtaRun {
    pub specs: Vec<TransformSpec>,
    pub probs: ProbVector,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub runs: Vec<TtaRun>,
    pub final_label: Label,
    /// Per-class mean of the run probabilities.
    pub final_probs: ProbVector,
}

impl PredictionSet {
    /// Aggregate of the first `n` runs, which is what an `n`-run prediction
    /// with the same seed would have returned.
    pub fn prefix(&self, n: usize, aggregation: Aggregation) -> Result<PredictionSet> {
        if n == 0 || n > self.runs.len() {
            return Err(Error::InvalidArgument(format!("prefix {n} of {} runs", self.runs.len())));
        }
        aggregate(self.runs[..n].to_vec(), aggregation)
    }
}

/// Most frequent label. Ties go to the label with the highest summed
/// probability across runs, then to the earlier label in canonical order.
pub fn mode_of(labels: &[Label], probs: &[ProbVector]) -> Result<Label> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("mode of an empty prediction set".into()));
    }
    if labels.len() != probs.len() {
        return Err(Error::InvalidArgument(format!("{} labels but {} probability vectors", labels.len(), probs.len())));
    }
    let mut counts = [0usize; Label::COUNT];
    let mut mass = [0.0f64; Label::COUNT];
    for (l, p) in labels.iter().zip(probs) {
        counts[l.index()] += 1;
        for (m, v) in mass.iter_mut().zip(&p.0) {
            *m += v;
        }
    }
    let mut best = 0;
    for c in 1..Label::COUNT {
        if counts[c] > counts[best] || (counts[c] == counts[best] && mass[c] > mass[best]) {
            best = c;
        }
    }
    Ok(Label::ALL[best])
}

/// Final label and mean probabilities of a set of runs.
pub fn aggregate(runs: Vec<TtaRun>, aggregation: Aggregation) -> Result<PredictionSet> {
    let probs: Vec<ProbVector> = runs.iter().map(|r| r.probs).collect();
    let labels: Vec<Label> = runs.iter().map(|r| r.label).collect();
    let final_probs = ProbVector::mean(&probs);
    let final_label = match aggregation {
        Aggregation::Mode => mode_of(&labels, &probs)?,
        Aggregation::MeanProb => final_probs.argmax(),
    };
    Ok(PredictionSet {
        runs,
        final_label,
        final_probs,
    })
}

/// Perturbed input of replica `n`: sampled transformations, then `e ~ N(mu, sigma)`.
pub fn replica_input(x: &EcgRecord, cfg: &TtaConfig, n: usize) -> Result<(Vec<TransformSpec>, EcgRecord)> {
    let mut rng = SplitMix64::substream(cfg.seed, n as u64);
    let policy = cfg.policy.test_time();
    let specs = sample_policy(&policy, x.len(), &mut rng);
    let mut y = apply_all(&specs, x, &[], &mut rng)?;
    let NoiseSpec { mu, sigma } = cfg.noise;
    if mu != 0.0 || sigma > 0.0 {
        for v in y.samples.iter_mut() {
            *v += mu + sigma * rng.normal();
        }
    }
    Ok((specs, y))
}

/// TTA on an already preprocessed record.
pub fn tta_predict_prepared(
    model: &DualNetModel,
    x: &EcgRecord,
    pre: &PreprocessConfig,
    cfg: &TtaConfig,
) -> Result<PredictionSet> {
    cfg.validate()?;
    let replicas: Vec<(Vec<TransformSpec>, EcgRecord, Spectrogram)> = (0..cfg.n_runs)
        .into_par_iter()
        .map_init(FftPlanner::new, |planner, n| {
            let (specs, y) = replica_input(x, cfg, n)?;
            let spec = spectrogram_with(&y.samples, y.fs_hz, pre.spec_window, pre.spec_hop, planner)?;
            Ok((specs, y, spec))
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<(&[f64], &Spectrogram)> = replicas.iter().map(|(_, y, s)| (&y.samples[..], s)).collect();
    let outputs = model.predict(&inputs)?;
    let runs = replicas
        .into_iter()
        .zip(outputs)
        .map(|((specs, _, _), (probs, _))| TtaRun {
            specs,
            label: probs.argmax(),
            probs,
        })
        .collect();
    aggregate(runs, cfg.aggregation)
}

/// TTA on a raw record: preprocess (eval mode), then [`tta_predict_prepared`].
pub fn tta_predict(model: &DualNetModel, x: &EcgRecord, pre: &PreprocessConfig, cfg: &TtaConfig) -> Result<PredictionSet> {
    let prepared = preprocess(x, pre, Mode::Eval, &mut SplitMix64::new(cfg.seed))?;
    tta_predict_prepared(model, &prepared, pre, cfg)
}

/// Plain eval-mode prediction of preprocessed records.
pub fn predict_plain(model: &DualNetModel, records: &[EcgRecord], pre: &PreprocessConfig) -> Result<Vec<ProbVector>> {
    let specs: Vec<Spectrogram> = records
        .par_iter()
        .map_init(FftPlanner::new, |planner, r| {
            spectrogram_with(&r.samples, r.fs_hz, pre.spec_window, pre.spec_hop, planner)
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<(&[f64], &Spectrogram)> = records.iter().zip(&specs).map(|(r, s)| (&r.samples[..], s)).collect();
    Ok(model.predict(&inputs)?.into_iter().map(|(p, _)| p).collect())
}

/// Undoes an invertible transformation: Flip negates, Sine subtracts the same
/// sinusoid, Shift moves the signal back left with a zero tail (exact on the
/// first `L - k` samples).
pub fn apply_inverse(spec: &TransformSpec, x: &EcgRecord) -> Result<EcgRecord> {
    let samples = match *spec {
        TransformSpec::Flip => x.samples.iter().map(|v| -v).collect(),
        TransformSpec::Sine { amp, freq_hz, phase } => add_sine(&x.samples, amp, freq_hz, phase, x.fs_hz as f64, -1.0),
        TransformSpec::Shift { k } if k < x.len() => {
            let mut s = vec![0.0; x.len()];
            s[..x.len() - k].copy_from_slice(&x.samples[k..]);
            s
        }
        TransformSpec::Shift { .. } => return Err(Error::NotInvertible("shift by the full length")),
        TransformSpec::Drop { .. } => return Err(Error::NotInvertible("drop")),
        TransformSpec::Mask { .. } => return Err(Error::NotInvertible("mask")),
        TransformSpec::BandPass { .. } => return Err(Error::NotInvertible("bandpass")),
        TransformSpec::CutMix { .. } => return Err(Error::NotInvertible("cutmix")),
        TransformSpec::Noise { .. } => return Err(Error::NotInvertible("noise")),
    };
    Ok(x.with_samples(samples))
}

/// The forward transformation whose effect equals `apply_inverse(spec, .)`,
/// when one exists in the operator family: Flip is an involution and the
/// inverse of a sinusoid is the same sinusoid shifted by half a period.
pub fn inverse_as_forward(spec: &TransformSpec) -> Option<TransformSpec> {
    match *spec {
        TransformSpec::Flip => Some(TransformSpec::Flip),
        TransformSpec::Sine { amp, freq_hz, phase } => Some(TransformSpec::Sine {
            amp,
            freq_hz,
            phase: (phase + PI).rem_euclid(2.0 * PI),
        }),
        _ => None,
    }
}

/// Label of one replica computed along the formal path: undo each
/// transformation (in reverse order), predict, and map the label back, which
/// is the identity for class labels.
pub fn formal_path_label(
    model: &DualNetModel,
    x: &EcgRecord,
    specs: &[TransformSpec],
    pre: &PreprocessConfig,
) -> Result<Label> {
    let mut y = x.clone();
    for s in specs.iter().rev() {
        y = apply_inverse(s, &y)?;
    }
    Ok(predict_plain(model, std::slice::from_ref(&y), pre)?[0].argmax())
}
