//! Label-invariant augmentation operators, random policy sampling and class
//! balancing (random resampling with SMOTE, or with Gaussian jitter).

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::preprocess::Biquad;
use crate::rng::SplitMix64;
use crate::types::{EcgRecord, Label};

/// Operators in canonical composition order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Drop,
    Mask,
    Shift,
    Sine,
    BandPass,
    CutMix,
    Flip,
    Noise,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::Drop,
        OpKind::Mask,
        OpKind::Shift,
        OpKind::Sine,
        OpKind::BandPass,
        OpKind::CutMix,
        OpKind::Flip,
        OpKind::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Drop => "drop",
            OpKind::Mask => "mask",
            OpKind::Shift => "shift",
            OpKind::Sine => "sine",
            OpKind::BandPass => "bandpass",
            OpKind::CutMix => "cutmix",
            OpKind::Flip => "flip",
            OpKind::Noise => "noise",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// A concrete transformation with its sampled parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformSpec {
    Drop { rate: f64 },
    Mask { start: usize, len: usize },
    Shift { k: usize },
    Sine { amp: f64, freq_hz: f64, phase: f64 },
    BandPass { low_hz: f64, high_hz: f64 },
    /// `donor` indexes the donor pool given to [`apply`]; `None` is a no-op.
    CutMix { start: usize, len: usize, donor: Option<usize> },
    Flip,
    Noise { snr_db: f64 },
}

impl TransformSpec {
    pub fn kind(&self) -> OpKind {
        match self {
            TransformSpec::Drop { .. } => OpKind::Drop,
            TransformSpec::Mask { .. } => OpKind::Mask,
            TransformSpec::Shift { .. } => OpKind::Shift,
            TransformSpec::Sine { .. } => OpKind::Sine,
            TransformSpec::BandPass { .. } => OpKind::BandPass,
            TransformSpec::CutMix { .. } => OpKind::CutMix,
            TransformSpec::Flip => OpKind::Flip,
            TransformSpec::Noise { .. } => OpKind::Noise,
        }
    }
}

/// Acquisition-noise model `e ~ N(mu, sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 0.0 }
    }
}

/// Inclusive parameter range for uniform draws.
pub type Range = (f64, f64);

/// The distribution over transformation sequences.
///
/// Length-like parameters (`mask_len`, `shift`, `cutmix_len`) are fractions of
/// the signal length.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    /// Inclusion probability per operator, indexed by [`OpKind`] order.
    pub prob: [f64; 8],
    pub drop_rate: Range,
    pub mask_len: Range,
    pub shift: Range,
    pub sine_amp: Range,
    pub sine_freq_hz: Range,
    pub bandpass_low_hz: Range,
    pub bandpass_high_hz: Range,
    pub cutmix_len: Range,
    /// Chance that an included Flip actually flips.
    pub flip_p: f64,
    pub noise_snr_db: Range,
    pub max_ops: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            prob: [0.3; 8],
            drop_rate: (0.0, 0.1),
            mask_len: (0.0, 0.1),
            shift: (0.0, 0.1),
            sine_amp: (0.0, 0.2),
            sine_freq_hz: (0.1, 5.0),
            bandpass_low_hz: (0.5, 5.0),
            bandpass_high_hz: (15.0, 45.0),
            cutmix_len: (0.1, 0.3),
            flip_p: 0.5,
            noise_snr_db: (10.0, 30.0),
            max_ops: 3,
        }
    }
}

impl AugmentPolicy {
    /// A policy that never includes any operator.
    pub fn identity() -> Self {
        Self {
            prob: [0.0; 8],
            ..Self::default()
        }
    }

    /// Test-time variant: CutMix needs a same-class donor and test labels are
    /// unknown, so it is never sampled.
    pub fn test_time(&self) -> Self {
        let mut p = self.clone();
        p.prob[OpKind::CutMix as usize] = 0.0;
        p
    }

    pub fn prob_of(&self, kind: OpKind) -> f64 {
        self.prob[kind as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(format!("augment policy: {what}")));
        for k in OpKind::ALL {
            if !(0.0..=1.0).contains(&self.prob_of(k)) {
                return bad(format!("{} probability {} outside [0, 1]", k.name(), self.prob_of(k)));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return bad(format!("flip p {} outside [0, 1]", self.flip_p));
        }
        let ranges = [
            ("drop rate", self.drop_rate, 0.0, 1.0),
            ("mask len", self.mask_len, 0.0, 1.0),
            ("shift", self.shift, 0.0, 1.0),
            ("sine amp", self.sine_amp, 0.0, f64::INFINITY),
            ("sine freq", self.sine_freq_hz, f64::MIN_POSITIVE, f64::INFINITY),
            ("bandpass low", self.bandpass_low_hz, f64::MIN_POSITIVE, f64::INFINITY),
            ("bandpass high", self.bandpass_high_hz, f64::MIN_POSITIVE, f64::INFINITY),
            ("cutmix len", self.cutmix_len, 0.0, 1.0),
            ("noise snr", self.noise_snr_db, f64::NEG_INFINITY, f64::INFINITY),
        ];
        for (name, (lo, hi), min, max) in ranges {
            if !(lo <= hi && lo >= min && hi <= max && lo.is_finite() && hi.is_finite()) {
                return bad(format!("{name} range [{lo}, {hi}] is empty or outside [{min}, {max}]"));
            }
        }
        if self.bandpass_low_hz.1 >= self.bandpass_high_hz.0 {
            return bad("bandpass low range must lie below the high range".into());
        }
        Ok(())
    }
}

fn frac_len(frac: f64, len: usize) -> usize {
    ((frac * len as f64).round() as usize).min(len)
}

/// Draws a transformation sequence in canonical order: independent inclusion
/// per operator, a uniform subset of `max_ops` if too many were included, then
/// uniform parameter draws.
pub fn sample_policy(policy: &AugmentPolicy, signal_len: usize, rng: &mut SplitMix64) -> Vec<TransformSpec> {
    let mut chosen: Vec<OpKind> = OpKind::ALL
        .into_iter()
        .filter(|&k| rng.bernoulli(policy.prob_of(k)))
        .collect();
    if chosen.contains(&OpKind::Flip) && !rng.bernoulli(policy.flip_p) {
        chosen.retain(|&k| k != OpKind::Flip);
    }
    if chosen.len() > policy.max_ops {
        // Partial Fisher-Yates picks the survivors, then restore canonical order.
        for i in 0..policy.max_ops {
            let j = i + rng.below(chosen.len() - i);
            chosen.swap(i, j);
        }
        chosen.truncate(policy.max_ops);
        chosen.sort();
    }

    let l = signal_len;
    chosen
        .into_iter()
        .map(|kind| match kind {
            OpKind::Drop => TransformSpec::Drop {
                rate: rng.uniform_range(policy.drop_rate.0, policy.drop_rate.1),
            },
            OpKind::Mask => {
                let len = frac_len(rng.uniform_range(policy.mask_len.0, policy.mask_len.1), l);
                let start = rng.int_inclusive(0, l - len);
                TransformSpec::Mask { start, len }
            }
            OpKind::Shift => TransformSpec::Shift {
                k: frac_len(rng.uniform_range(policy.shift.0, policy.shift.1), l),
            },
            OpKind::Sine => TransformSpec::Sine {
                amp: rng.uniform_range(policy.sine_amp.0, policy.sine_amp.1),
                freq_hz: rng.uniform_range(policy.sine_freq_hz.0, policy.sine_freq_hz.1),
                phase: rng.uniform_range(0.0, TAU),
            },
            OpKind::BandPass => TransformSpec::BandPass {
                low_hz: rng.uniform_range(policy.bandpass_low_hz.0, policy.bandpass_low_hz.1),
                high_hz: rng.uniform_range(policy.bandpass_high_hz.0, policy.bandpass_high_hz.1),
            },
            OpKind::CutMix => {
                let len = frac_len(rng.uniform_range(policy.cutmix_len.0, policy.cutmix_len.1), l);
                let start = rng.int_inclusive(0, l - len);
                TransformSpec::CutMix { start, len, donor: None }
            }
            OpKind::Flip => TransformSpec::Flip,
            OpKind::Noise => TransformSpec::Noise {
                snr_db: rng.uniform_range(policy.noise_snr_db.0, policy.noise_snr_db.1),
            },
        })
        .collect()
}

fn precondition(op: &'static str, msg: String) -> Error {
    Error::InvalidArgument(format!("{op}: {msg}"))
}

/// Applies one operator. `donors` is the CutMix donor pool.
pub fn apply(spec: &TransformSpec, x: &EcgRecord, donors: &[EcgRecord], rng: &mut SplitMix64) -> Result<EcgRecord> {
    let l = x.len();
    let fs = x.fs_hz as f64;
    let samples = match *spec {
        TransformSpec::Drop { rate } => {
            if !(0.0..=1.0).contains(&rate) {
                return Err(precondition("drop", format!("rate {rate} outside [0, 1]")));
            }
            x.samples
                .iter()
                .map(|&v| if rng.bernoulli(rate) { 0.0 } else { v })
                .collect()
        }
        TransformSpec::Mask { start, len } => {
            if start + len > l {
                return Err(precondition("mask", format!("[{start}, {}) exceeds length {l}", start + len)));
            }
            let mut s = x.samples.clone();
            s[start..start + len].fill(0.0);
            s
        }
        TransformSpec::Shift { k } => {
            if k > l {
                return Err(precondition("shift", format!("k = {k} exceeds length {l}")));
            }
            let mut s = vec![0.0; l];
            s[k..].copy_from_slice(&x.samples[..l - k]);
            s
        }
        TransformSpec::Sine { amp, freq_hz, phase } => {
            if !(amp >= 0.0) || !(freq_hz > 0.0 && freq_hz < fs / 2.0) || !phase.is_finite() {
                return Err(precondition(
                    "sine",
                    format!("amp {amp}, freq {freq_hz} Hz (Nyquist {})", fs / 2.0),
                ));
            }
            add_sine(&x.samples, amp, freq_hz, phase, fs, 1.0)
        }
        TransformSpec::BandPass { low_hz, high_hz } => {
            Biquad::butterworth_bandpass(fs, low_hz, high_hz)?.filtfilt(&x.samples)
        }
        TransformSpec::CutMix { start, len, donor } => {
            if start + len > l {
                return Err(precondition("cutmix", format!("[{start}, {}) exceeds length {l}", start + len)));
            }
            match donor {
                None => x.samples.clone(),
                Some(d) => {
                    let donor = donors
                        .get(d)
                        .ok_or_else(|| precondition("cutmix", format!("donor {d} not in pool of {}", donors.len())))?;
                    if donor.label != x.label || donor.len() != l {
                        return Err(precondition(
                            "cutmix",
                            format!("donor {} has a different label or length", donor.id),
                        ));
                    }
                    let mut s = x.samples.clone();
                    s[start..start + len].copy_from_slice(&donor.samples[start..start + len]);
                    s
                }
            }
        }
        TransformSpec::Flip => x.samples.iter().map(|v| -v).collect(),
        TransformSpec::Noise { snr_db } => {
            if !snr_db.is_finite() {
                return Err(precondition("noise", format!("snr {snr_db} dB is not finite")));
            }
            add_noise_snr(&x.samples, snr_db, rng)
        }
    };
    Ok(x.with_samples(samples))
}

/// `x + sign * amp * sin(2 pi f t + phase)`.
pub(crate) fn add_sine(x: &[f64], amp: f64, freq_hz: f64, phase: f64, fs: f64, sign: f64) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, v)| v + sign * amp * (TAU * freq_hz * i as f64 / fs + phase).sin())
        .collect()
}

/// White Gaussian noise at `snr_db` relative to the zero-mean signal power.
/// A silent signal is returned unchanged.
pub fn add_noise_snr(x: &[f64], snr_db: f64, rng: &mut SplitMix64) -> Vec<f64> {
    let p_x = crate::dataio::zero_mean_power(x);
    if p_x == 0.0 {
        return x.to_vec();
    }
    let sigma = (p_x / 10f64.powf(snr_db / 10.0)).sqrt();
    x.iter().map(|v| v + sigma * rng.normal()).collect()
}

/// Samples a policy and applies it in canonical order. CutMix picks a random
/// donor of the same label and length (other than `x` itself) from `donors`
/// and degrades to identity when none exists.
pub fn augment(x: &EcgRecord, policy: &AugmentPolicy, donors: &[EcgRecord], rng: &mut SplitMix64) -> Result<EcgRecord> {
    let specs = sample_policy(policy, x.len(), rng);
    apply_all(&specs, x, donors, rng)
}

/// Applies an already-sampled sequence, resolving CutMix donors first.
pub fn apply_all(specs: &[TransformSpec], x: &EcgRecord, donors: &[EcgRecord], rng: &mut SplitMix64) -> Result<EcgRecord> {
    let mut out = x.clone();
    for spec in specs {
        let resolved = match *spec {
            TransformSpec::CutMix { start, len, donor: None } => {
                let candidates: Vec<usize> = donors
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| d.label == x.label && d.len() == x.len() && d.id != x.id)
                    .map(|(i, _)| i)
                    .collect();
                if candidates.is_empty() {
                    continue;
                }
                TransformSpec::CutMix {
                    start,
                    len,
                    donor: Some(candidates[rng.below(candidates.len())]),
                }
            }
            ref other => other.clone(),
        };
        out = apply(&resolved, &out, donors, rng)?;
    }
    Ok(out)
}

/// Augments every record of a batch on its own substream of `seed`; the batch
/// itself is the CutMix donor pool.
pub fn augment_batch(batch: &[EcgRecord], policy: &AugmentPolicy, seed: u64) -> Result<Vec<EcgRecord>> {
    batch
        .par_iter()
        .enumerate()
        .map(|(i, x)| augment(x, policy, batch, &mut SplitMix64::substream(seed, i as u64)))
        .collect()
}

// ---------------------------------------------------------------------------
// Class balancing

fn class_groups(dataset: &[EcgRecord]) -> Result<BTreeMap<Label, Vec<usize>>> {
    let mut groups: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.iter().enumerate() {
        let label = r
            .label
            .ok_or_else(|| Error::InvalidArgument(format!("record {} has no label", r.id)))?;
        groups.entry(label).or_default().push(i);
    }
    Ok(groups)
}

fn check_equal_lengths(dataset: &[EcgRecord]) -> Result<()> {
    if let Some(first) = dataset.first() {
        if let Some(r) = dataset.iter().find(|r| r.len() != first.len()) {
            return Err(Error::InvalidArgument(format!(
                "balancing needs equal-length records: {} has {} samples, {} has {}",
                first.id,
                first.len(),
                r.id,
                r.len()
            )));
        }
    }
    Ok(())
}

/// `x + u * (neighbor - x)`.
pub fn smote_interpolate(x: &[f64], neighbor: &[f64], u: f64) -> Vec<f64> {
    x.iter().zip(neighbor).map(|(a, b)| a + u * (b - a)).collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices (into `members`) of the `k` nearest other members of `members[i]`;
/// distance ties go to the lower index.
fn nearest_neighbors(dataset: &[EcgRecord], members: &[usize], i: usize, k: usize) -> Vec<usize> {
    let base = &dataset[members[i]].samples;
    let mut dists: Vec<(f64, usize)> = members
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &m)| (squared_distance(base, &dataset[m].samples), j))
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Brings every class up to the majority count: half of each deficit by
/// duplicating random members, the rest by SMOTE interpolation towards one
/// of the `k` nearest same-class neighbours. Originals come first in the
/// output, in input order.
pub fn smote_balance(dataset: &[EcgRecord], k: usize, rng: &mut SplitMix64) -> Result<Vec<EcgRecord>> {
    check_equal_lengths(dataset)?;
    let groups = class_groups(dataset)?;
    let target = groups.values().map(Vec::len).max().unwrap_or(0);
    let mut out = dataset.to_vec();
    for (&label, members) in &groups {
        let deficit = target - members.len();
        if deficit == 0 {
            continue;
        }
        if members.len() < k + 1 {
            return Err(Error::InvalidArgument(format!(
                "class {label} has {} records; SMOTE with k = {k} needs at least {}",
                members.len(),
                k + 1
            )));
        }
        let n_dup = deficit / 2;
        for j in 0..n_dup {
            let src = &dataset[members[rng.below(members.len())]];
            let mut dup = src.clone();
            dup.id = format!("{}_dup{j}", src.id);
            out.push(dup);
        }
        let mut neighbor_cache: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for j in 0..deficit - n_dup {
            let i = rng.below(members.len());
            let nn = neighbor_cache
                .entry(i)
                .or_insert_with(|| nearest_neighbors(dataset, members, i, k));
            let partner = nn[rng.below(nn.len())];
            let u = rng.uniform();
            let x = &dataset[members[i]];
            let samples = smote_interpolate(&x.samples, &dataset[members[partner]].samples, u);
            out.push(EcgRecord {
                id: format!("smote_{}_{j}", label.code()),
                samples,
                fs_hz: x.fs_hz,
                label: Some(label),
            });
        }
    }
    Ok(out)
}

/// Brings every class up to the majority count with random duplicates, each
/// perturbed by Gaussian noise of std `sigma_rel * std(x)`.
pub fn gaussian_balance(dataset: &[EcgRecord], sigma_rel: f64, rng: &mut SplitMix64) -> Result<Vec<EcgRecord>> {
    if !(sigma_rel >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_rel {sigma_rel} must be >= 0")));
    }
    let groups = class_groups(dataset)?;
    let target = groups.values().map(Vec::len).max().unwrap_or(0);
    let mut out = dataset.to_vec();
    for members in groups.values() {
        for j in 0..target - members.len() {
            let src = &dataset[members[rng.below(members.len())]];
            let sigma = sigma_rel * crate::dataio::zero_mean_power(&src.samples).sqrt();
            let samples = if sigma > 0.0 {
                src.samples.iter().map(|v| v + sigma * rng.normal()).collect()
            } else {
                src.samples.clone()
            };
            out.push(EcgRecord {
                id: format!("{}_jit{j}", src.id),
                samples,
                fs_hz: src.fs_hz,
                label: src.label,
            });
        }
    }
    Ok(out)
}
