//! Signal conditioning: running-median baseline removal, zero-phase
//! Butterworth band-pass, linear-interpolation downsampling, crop/pad,
//! z-score normalisation and the log-magnitude spectrogram fed to the
//! model's second branch.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::types::{EcgRecord, Mode};

/// Floor added to spectrogram magnitudes before the logarithm.
pub const SPEC_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub median_window_s: f64,
    pub bp_low_hz: f64,
    pub bp_high_hz: f64,
    pub target_fs_hz: u32,
    pub target_len: usize,
    pub spec_window: usize,
    pub spec_hop: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            median_window_s: 0.6,
            bp_low_hz: 0.5,
            bp_high_hz: 40.0,
            target_fs_hz: 100,
            target_len: 3000,
            spec_window: 64,
            spec_hop: 32,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.target_fs_hz as f64 / 2.0;
        if !(self.bp_low_hz > 0.0 && self.bp_low_hz < self.bp_high_hz && self.bp_high_hz < nyquist) {
            return Err(Error::InvalidArgument(format!(
                "band edges must satisfy 0 < {} < {} < {nyquist}",
                self.bp_low_hz, self.bp_high_hz
            )));
        }
        if !(self.median_window_s > 0.0) {
            return Err(Error::InvalidArgument("median_window_s must be positive".into()));
        }
        if self.target_len == 0 {
            return Err(Error::InvalidArgument("target_len must be positive".into()));
        }
        if self.spec_window < 2 || self.spec_hop == 0 || self.spec_window > self.target_len {
            return Err(Error::InvalidArgument(format!(
                "spectrogram window {} / hop {} incompatible with length {}",
                self.spec_window, self.spec_hop, self.target_len
            )));
        }
        Ok(())
    }

    /// (frames, bins) of the spectrogram of a preprocessed record.
    pub fn spectrogram_shape(&self) -> (usize, usize) {
        (
            (self.target_len - self.spec_window) / self.spec_hop + 1,
            self.spec_window / 2 + 1,
        )
    }
}

// ---------------------------------------------------------------------------
// Baseline removal

/// Median-filter length in samples: rounded, forced odd, at least 3.
pub fn median_window_len(window_s: f64, fs_hz: u32) -> usize {
    let mut w = (window_s * fs_hz as f64).round().max(0.0) as usize;
    if w % 2 == 0 {
        w += 1;
    }
    w.max(3)
}

/// Running median with edge-replicated padding.
pub fn running_median(x: &[f64], window: usize) -> Vec<f64> {
    assert!(window % 2 == 1 && !x.is_empty());
    let half = window / 2;
    let n = x.len();
    let at = |i: isize| x[i.clamp(0, n as isize - 1) as usize];

    let mut sorted: Vec<f64> = (-(half as isize)..=half as isize).map(at).collect();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(n);
    out.push(sorted[half]);
    for i in 1..n {
        let outgoing = at(i as isize - 1 - half as isize);
        let incoming = at(i as isize + half as isize);
        let pos = sorted.partition_point(|v| v.total_cmp(&outgoing).is_lt());
        sorted.remove(pos);
        let pos = sorted.partition_point(|v| v.total_cmp(&incoming).is_lt());
        sorted.insert(pos, incoming);
        out.push(sorted[half]);
    }
    out
}

/// Subtracts the running median to suppress baseline wander.
pub fn remove_baseline(x: &EcgRecord, window_s: f64) -> Result<EcgRecord> {
    let w = median_window_len(window_s, x.fs_hz);
    if w > x.len() {
        return Err(Error::InvalidArgument(format!(
            "median window of {w} samples exceeds signal length {}",
            x.len()
        )));
    }
    let baseline = running_median(&x.samples, w);
    Ok(x.with_samples(x.samples.iter().zip(&baseline).map(|(v, b)| v - b).collect()))
}

// ---------------------------------------------------------------------------
// Butterworth band-pass

/// A single second-order section with `a[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Second-order Butterworth band-pass: first-order low-pass prototype,
    /// low-pass to band-pass substitution on pre-warped edges, then the
    /// bilinear transform.
    pub fn butterworth_bandpass(fs_hz: f64, low_hz: f64, high_hz: f64) -> Result<Self> {
        let nyquist = fs_hz / 2.0;
        if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist) {
            return Err(Error::InvalidArgument(format!(
                "band {low_hz}-{high_hz} Hz invalid for Nyquist {nyquist} Hz"
            )));
        }
        let k = 2.0 * fs_hz;
        let w1 = k * (PI * low_hz / fs_hz).tan();
        let w2 = k * (PI * high_hz / fs_hz).tan();
        let bw = w2 - w1;
        let w0_sq = w1 * w2;

        // H(s) = bw*s / (s^2 + bw*s + w0^2) with s = k(1 - z^-1)/(1 + z^-1)
        let a0 = k * k + bw * k + w0_sq;
        let a1 = 2.0 * (w0_sq - k * k);
        let a2 = k * k - bw * k + w0_sq;
        let g = bw * k;
        Ok(Self {
            b: [g / a0, 0.0, -g / a0],
            a: [1.0, a1 / a0, a2 / a0],
        })
    }

    /// Direct form II transposed, starting from state `zi`.
    pub fn filter(&self, x: &[f64], zi: [f64; 2]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let (mut z0, mut z1) = (zi[0], zi[1]);
        x.iter()
            .map(|&v| {
                let y = b0 * v + z0;
                z0 = b1 * v - a1 * y + z1;
                z1 = b2 * v - a2 * y;
                y
            })
            .collect()
    }

    /// State that makes the step response start in steady state.
    pub fn step_state(&self) -> [f64; 2] {
        let dc = self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>();
        let z1 = self.b[2] - self.a[2] * dc;
        let z0 = self.b[1] - self.a[1] * dc + z1;
        [z0, z1]
    }

    /// Forward-backward filtering with odd-reflected padding of `3 * order`
    /// samples and steady-state initial conditions at both passes.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = 6.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.step_state();
        let scaled = |s: f64| [zi[0] * s, zi[1] * s];
        let mut y = self.filter(&ext, scaled(ext[0]));
        y.reverse();
        let mut y = self.filter(&y, scaled(y[0]));
        y.reverse();
        y[pad..pad + n].to_vec()
    }
}

/// Zero-phase second-order Butterworth band-pass.
pub fn butterworth_bandpass(x: &EcgRecord, low_hz: f64, high_hz: f64) -> Result<EcgRecord> {
    let biquad = Biquad::butterworth_bandpass(x.fs_hz as f64, low_hz, high_hz)?;
    Ok(x.with_samples(biquad.filtfilt(&x.samples)))
}

// ---------------------------------------------------------------------------
// Resampling, length and scale

/// Linear-interpolation downsampling onto the grid `k / target_fs`.
pub fn resample(x: &EcgRecord, target_fs_hz: u32) -> Result<EcgRecord> {
    if target_fs_hz == 0 || target_fs_hz > x.fs_hz {
        return Err(Error::InvalidArgument(format!(
            "cannot resample {} Hz to {target_fs_hz} Hz (downsampling only)",
            x.fs_hz
        )));
    }
    let src_fs = x.fs_hz as u64;
    let dst_fs = target_fs_hz as u64;
    let n = x.len() as u64;
    let out_len = (n - 1) * dst_fs / src_fs + 1;
    let samples = (0..out_len)
        .map(|k| {
            // Source position k * src_fs / dst_fs as integer part + fraction.
            let num = k * src_fs;
            let idx = (num / dst_fs) as usize;
            let rem = num % dst_fs;
            if rem == 0 {
                x.samples[idx]
            } else {
                let t = rem as f64 / dst_fs as f64;
                x.samples[idx] + t * (x.samples[idx + 1] - x.samples[idx])
            }
        })
        .collect();
    Ok(EcgRecord {
        id: x.id.clone(),
        samples,
        fs_hz: target_fs_hz,
        label: x.label,
    })
}

/// Population z-score; near-constant signals map to zeros.
pub fn zscore(x: &EcgRecord) -> EcgRecord {
    x.with_samples(zscore_slice(&x.samples))
}

pub fn zscore_slice(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - mean) / std).collect()
}

/// Crops (random start in training, start 0 in evaluation) or zero-pads the
/// tail to exactly `target_len` samples.
pub fn fix_length(x: &EcgRecord, target_len: usize, mode: Mode, rng: &mut SplitMix64) -> EcgRecord {
    let n = x.len();
    if n >= target_len {
        let start = match mode {
            Mode::Eval => 0,
            Mode::Train => rng.int_inclusive(0, n - target_len),
        };
        x.with_samples(x.samples[start..start + target_len].to_vec())
    } else {
        let mut samples = x.samples.clone();
        samples.resize(target_len, 0.0);
        x.with_samples(samples)
    }
}

// ---------------------------------------------------------------------------
// Spectrogram

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// Row-major `frames x bins` natural-log magnitudes.
    pub values: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub frame_hop_s: f64,
    pub bin_width_hz: f64,
}

impl Spectrogram {
    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.bins..(frame + 1) * self.bins]
    }
}

/// Periodic Hann window.
pub fn hann(window: usize) -> Vec<f64> {
    (0..window)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / window as f64).cos())
        .collect()
}

pub fn spectrogram(x: &EcgRecord, window: usize, hop: usize) -> Result<Spectrogram> {
    let mut planner = FftPlanner::new();
    spectrogram_with(&x.samples, x.fs_hz, window, hop, &mut planner)
}

/// Spectrogram of a raw slice, reusing FFT plans from `planner`.
pub fn spectrogram_with(
    samples: &[f64],
    fs_hz: u32,
    window: usize,
    hop: usize,
    planner: &mut FftPlanner<f64>,
) -> Result<Spectrogram> {
    if window < 2 || hop == 0 {
        return Err(Error::InvalidArgument(format!("window {window}, hop {hop}")));
    }
    if samples.len() < window {
        return Err(Error::InvalidArgument(format!(
            "signal of {} samples is shorter than the {window}-sample window",
            samples.len()
        )));
    }
    let frames = (samples.len() - window) / hop + 1;
    let bins = window / 2 + 1;
    let taper = hann(window);
    let fft = planner.plan_fft_forward(window);
    let mut buf = vec![Complex64::new(0.0, 0.0); window];
    let mut values = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let seg = &samples[f * hop..f * hop + window];
        for ((c, &s), &w) in buf.iter_mut().zip(seg).zip(&taper) {
            *c = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        values.extend(buf[..bins].iter().map(|c| (c.norm() + SPEC_FLOOR).ln()));
    }
    Ok(Spectrogram {
        values,
        frames,
        bins,
        frame_hop_s: hop as f64 / fs_hz as f64,
        bin_width_hz: fs_hz as f64 / window as f64,
    })
}

// ---------------------------------------------------------------------------
// Full chain

/// median -> band-pass -> resample -> crop/pad -> z-score.
pub fn preprocess(x: &EcgRecord, cfg: &PreprocessConfig, mode: Mode, rng: &mut SplitMix64) -> Result<EcgRecord> {
    x.validate()?;
    let y = remove_baseline(x, cfg.median_window_s)?;
    let y = butterworth_bandpass(&y, cfg.bp_low_hz, cfg.bp_high_hz)?;
    let y = resample(&y, cfg.target_fs_hz)?;
    let y = fix_length(&y, cfg.target_len, mode, rng);
    Ok(zscore(&y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(samples: Vec<f64>, fs: u32) -> EcgRecord {
        EcgRecord::new("t", samples, fs, None).unwrap()
    }

    fn sine(freq: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs + phase).sin()).collect()
    }

    /// Amplitude and phase of the `freq` component by least-squares
    /// projection on sin/cos over `range`.
    fn fit_sinusoid(y: &[f64], freq: f64, fs: f64, range: std::ops::Range<usize>) -> (f64, f64) {
        let (mut ss, mut sc, mut cc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in range {
            let t = 2.0 * PI * freq * i as f64 / fs;
            let (s, c) = t.sin_cos();
            ss += s * s;
            sc += s * c;
            cc += c * c;
            ys += y[i] * s;
            yc += y[i] * c;
        }
        let det = ss * cc - sc * sc;
        let a = (ys * cc - yc * sc) / det;
        let b = (yc * ss - ys * sc) / det;
        ((a * a + b * b).sqrt(), b.atan2(a))
    }

    // -- baseline -----------------------------------------------------------

    fn brute_median(x: &[f64], w: usize) -> Vec<f64> {
        let half = w as isize / 2;
        let n = x.len() as isize;
        (0..n)
            .map(|i| {
                let mut win: Vec<f64> = (i - half..=i + half).map(|j| x[j.clamp(0, n - 1) as usize]).collect();
                win.sort_by(f64::total_cmp);
                win[w / 2]
            })
            .collect()
    }

    #[test]
    fn running_median_matches_brute_force() {
        let mut rng = SplitMix64::new(11);
        for &w in &[3usize, 5, 31, 181] {
            let x: Vec<f64> = (0..500).map(|_| rng.normal()).collect();
            assert_eq!(running_median(&x, w), brute_median(&x, w));
        }
    }

    #[test]
    fn baseline_of_constant_is_zero() {
        let out = remove_baseline(&rec(vec![3.5; 400], 300), 0.6).unwrap();
        assert!(out.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn baseline_removes_ramp_keeps_spike() {
        let n = 2000;
        let mut x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 * 10.0).collect();
        x[1000] += 5.0;
        let out = remove_baseline(&rec(x.clone(), 100), 1.0).unwrap();
        let w = median_window_len(1.0, 100);
        let oracle: Vec<f64> = x.iter().zip(brute_median(&x, w)).map(|(v, m)| v - m).collect();
        assert_eq!(out.samples, oracle);
        assert!((out.samples[1000] - 5.0).abs() < 0.05);
        for i in w..n - w {
            if i != 1000 {
                assert!(out.samples[i].abs() < 0.05 * 10.0, "residual at {i}: {}", out.samples[i]);
            }
        }
    }

    #[test]
    fn baseline_window_too_long() {
        let r = rec(vec![1.0; 50], 100);
        assert!(matches!(remove_baseline(&r, 2.0), Err(Error::InvalidArgument(_))));
        assert_eq!(median_window_len(0.6, 100), 61);
        assert_eq!(median_window_len(0.6, 300), 181);
        assert_eq!(median_window_len(0.001, 100), 3);
    }

    // -- band-pass ----------------------------------------------------------

    /// Independent design through poles and zeros: analog prototype poles,
    /// bilinear map z = (k + s) / (k - s), zeros at z = +1 and z = -1,
    /// gain k_a * k / ((k - p1)(k - p2)).
    fn zpk_oracle(fs: f64, low: f64, high: f64) -> ([f64; 3], [f64; 3]) {
        let k = 2.0 * fs;
        let w1 = k * (PI * low / fs).tan();
        let w2 = k * (PI * high / fs).tan();
        let bw = w2 - w1;
        let w0 = (w1 * w2).sqrt();
        let disc = Complex64::new(bw * bw - 4.0 * w0 * w0, 0.0).sqrt();
        let p1 = (Complex64::new(-bw, 0.0) + disc) / 2.0;
        let p2 = (Complex64::new(-bw, 0.0) - disc) / 2.0;
        let kc = Complex64::new(k, 0.0);
        let z1 = (kc + p1) / (kc - p1);
        let z2 = (kc + p2) / (kc - p2);
        let gain = (Complex64::new(bw * k, 0.0) / ((kc - p1) * (kc - p2))).re;
        let a = [1.0, -(z1 + z2).re, (z1 * z2).re];
        let b = [gain, 0.0, -gain];
        (b, a)
    }

    #[test]
    fn bandpass_coefficients_match_pole_zero_oracle() {
        for &(fs, lo, hi) in &[(100.0, 0.5, 40.0), (300.0, 0.5, 40.0), (200.0, 1.0, 20.0)] {
            let bq = Biquad::butterworth_bandpass(fs, lo, hi).unwrap();
            let (b, a) = zpk_oracle(fs, lo, hi);
            for i in 0..3 {
                assert!((bq.b[i] - b[i]).abs() < 1e-6, "b[{i}] {} vs {}", bq.b[i], b[i]);
                assert!((bq.a[i] - a[i]).abs() < 1e-6, "a[{i}] {} vs {}", bq.a[i], a[i]);
            }
        }
    }

    #[test]
    fn bandpass_coefficients_match_reference_design() {
        // scipy.signal.butter(1, [0.5, 40], 'bandpass', fs=100)
        let bq = Biquad::butterworth_bandpass(100.0, 0.5, 40.0).unwrap();
        let b = [0.7449474725112385, 0.0, -0.7449474725112385];
        let a = [1.0, -0.46305461775593415, -0.4898949450224769];
        for i in 0..3 {
            assert!((bq.b[i] - b[i]).abs() < 1e-12);
            assert!((bq.a[i] - a[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn filtfilt_matches_reference() {
        // scipy.signal.filtfilt(b, a, x, padlen=6) for the design above
        let x = [0.3, -1.2, 2.5, 0.7, 0.0, -0.4, 1.1, 3.3, -2.0, 0.5, 0.25, -0.75];
        let expected = [
            0.887976309144042,
            -0.13717960186045164,
            2.504955179962506,
            1.6446419523763307,
            0.49788493108208054,
            0.1736446632856149,
            2.17451596521819,
            3.0197408531238032,
            -0.33952959037531694,
            0.5435944849679148,
            1.1598000973966867,
            -0.04557855040986758,
        ];
        let bq = Biquad::butterworth_bandpass(100.0, 0.5, 40.0).unwrap();
        for (y, e) in bq.filtfilt(&x).iter().zip(expected) {
            assert!((y - e).abs() < 1e-10, "{y} vs {e}");
        }
    }

    #[test]
    fn bandpass_kills_dc() {
        let out = butterworth_bandpass(&rec(vec![1.0; 1000], 100), 0.5, 40.0).unwrap();
        assert!(out.samples.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn bandpass_passes_10hz_without_phase_shift() {
        let n = 2000;
        let x = sine(10.0, 100.0, n, 0.0);
        let out = butterworth_bandpass(&rec(x, 100), 0.5, 40.0).unwrap();
        let (amp, phase) = fit_sinusoid(&out.samples, 10.0, 100.0, 300..n - 300);
        // Analytic squared magnitude of the design at 10 Hz.
        let bq = Biquad::butterworth_bandpass(100.0, 0.5, 40.0).unwrap();
        let z = Complex64::from_polar(1.0, -2.0 * PI * 10.0 / 100.0);
        let h = (bq.b[0] + bq.b[1] * z + bq.b[2] * z * z) / (bq.a[0] + bq.a[1] * z + bq.a[2] * z * z);
        assert!((amp - h.norm_sqr()).abs() < 1e-3, "amp {amp} vs {}", h.norm_sqr());
        assert!((0.9..=1.1).contains(&amp));
        assert!(phase.abs() < 1e-2, "phase {phase}");
    }

    #[test]
    fn bandpass_rejects_edges_above_nyquist() {
        assert!(Biquad::butterworth_bandpass(100.0, 0.5, 50.0).is_err());
        assert!(Biquad::butterworth_bandpass(100.0, 5.0, 4.0).is_err());
        assert!(Biquad::butterworth_bandpass(100.0, 0.0, 4.0).is_err());
    }

    #[test]
    fn bandpass_is_linear() {
        let mut rng = SplitMix64::new(5);
        let x: Vec<f64> = (0..800).map(|_| rng.normal()).collect();
        let bq = Biquad::butterworth_bandpass(300.0, 0.5, 40.0).unwrap();
        let y = bq.filtfilt(&x);
        for a in [-3.0, 0.25, 7.5] {
            let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
            for (ya, yv) in bq.filtfilt(&ax).iter().zip(&y) {
                assert!((ya - a * yv).abs() <= 1e-9 * (a * yv).abs().max(1e-9) + 1e-12);
            }
        }
    }

    // -- resample / zscore / length ------------------------------------------

    #[test]
    fn resample_length_ratio() {
        let out = resample(&rec(vec![0.0; 9000], 300), 100).unwrap();
        assert!((out.len() as i64 - 3000).abs() <= 1);
        assert_eq!(out.fs_hz, 100);
    }

    #[test]
    fn resample_matches_analytic_sine() {
        let x = sine(5.0, 300.0, 3000, 0.0);
        let out = resample(&rec(x, 300), 100).unwrap();
        for (k, v) in out.samples.iter().enumerate() {
            let t = k as f64 / 100.0;
            assert!((v - (2.0 * PI * 5.0 * t).sin()).abs() < 1e-3);
        }
    }

    #[test]
    fn resample_200hz_uses_fractional_positions() {
        let x: Vec<f64> = (0..8000).map(|i| i as f64).collect();
        let out = resample(&rec(x, 200), 100).unwrap();
        assert_eq!(out.len(), 4000);
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let out = resample(&rec(x, 300), 200).unwrap();
        // positions 0, 1.5, 3, 4.5, ...
        assert_eq!(out.samples[..4], [0.0, 1.5, 3.0, 4.5]);
    }

    #[test]
    fn resample_identity_and_upsampling() {
        let x = vec![1.0, -2.0, 3.5, 0.25];
        assert_eq!(resample(&rec(x.clone(), 100), 100).unwrap().samples, x);
        assert!(resample(&rec(x, 100), 200).is_err());
    }

    #[test]
    fn zscore_examples() {
        let z = zscore(&rec(vec![1.0, 2.0, 3.0], 100));
        for (v, e) in z.samples.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((v - e).abs() < 1e-4);
        }
        assert!(zscore(&rec(vec![4.0; 10], 100)).samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zscore_moments_and_idempotence() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..50 {
            let x: Vec<f64> = (0..300).map(|_| 3.0 + 2.0 * rng.normal()).collect();
            let z = zscore_slice(&x);
            let mean = z.iter().sum::<f64>() / z.len() as f64;
            let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
            assert!(mean.abs() < 1e-6);
            assert!((std - 1.0).abs() < 1e-6);
            for (a, b) in zscore_slice(&z).iter().zip(&z) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fix_length_rules() {
        let mut rng = SplitMix64::new(1);
        let x: Vec<f64> = (0..6000).map(|i| i as f64).collect();
        let r = rec(x.clone(), 100);
        assert_eq!(fix_length(&r, 3000, Mode::Eval, &mut rng).samples, x[..3000]);
        assert_eq!(fix_length(&rec(x[..3000].to_vec(), 100), 3000, Mode::Eval, &mut rng).samples, x[..3000]);
        let short = fix_length(&rec(x[..1000].to_vec(), 100), 3000, Mode::Train, &mut rng);
        assert_eq!(short.samples[..1000], x[..1000]);
        assert!(short.samples[1000..].iter().all(|&v| v == 0.0));
        let crop = fix_length(&r, 3000, Mode::Train, &mut rng);
        let start = crop.samples[0] as usize;
        assert_eq!(crop.samples, x[start..start + 3000]);
    }

    // -- spectrogram ----------------------------------------------------------

    #[test]
    fn spectrogram_shape_and_floor() {
        let s = spectrogram(&rec(vec![0.0; 3000], 100), 64, 32).unwrap();
        assert_eq!((s.frames, s.bins), (92, 33));
        assert!(s.values.iter().all(|&v| v == SPEC_FLOOR.ln()));
        assert!((s.bin_width_hz - 100.0 / 64.0).abs() < 1e-12);
        assert!(spectrogram(&rec(vec![0.0; 10], 100), 64, 32).is_err());
    }

    /// Direct DFT magnitude of a Hann-windowed frame.
    fn dft_magnitudes(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        let w = hann(n);
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, (&x, &wi)) in frame.iter().zip(&w).enumerate() {
                    let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += x * wi * ang.cos();
                    im += x * wi * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn spectrogram_matches_direct_dft() {
        let mut rng = SplitMix64::new(2);
        let x: Vec<f64> = (0..500).map(|_| rng.normal()).collect();
        let s = spectrogram(&rec(x.clone(), 100), 64, 32).unwrap();
        for f in 0..s.frames {
            let mags = dft_magnitudes(&x[f * 32..f * 32 + 64]);
            for (b, m) in mags.iter().enumerate() {
                assert!((s.at(f, b) - (m + SPEC_FLOOR).ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn spectrogram_peak_bin_for_10hz() {
        let x = sine(10.0, 100.0, 3000, 0.3);
        let s = spectrogram(&rec(x.clone(), 100), 64, 32).unwrap();
        let expected = (10.0f64 / (100.0 / 64.0)).round() as usize;
        assert_eq!(expected, 6);
        let hits = (0..s.frames)
            .filter(|&f| {
                let oracle = dft_magnitudes(&x[f * 32..f * 32 + 64]);
                let oracle_bin = (0..oracle.len()).max_by(|&a, &b| oracle[a].total_cmp(&oracle[b])).unwrap();
                let row = s.frame(f);
                let bin = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                bin == expected && oracle_bin == expected
            })
            .count();
        assert!(hits as f64 >= 0.95 * s.frames as f64);
    }

    #[test]
    fn spectrogram_energy_scales_quadratically() {
        let mut rng = SplitMix64::new(4);
        let x: Vec<f64> = (0..640).map(|_| rng.normal()).collect();
        let energy = |v: &[f64]| {
            spectrogram(&rec(v.to_vec(), 100), 64, 32)
                .unwrap()
                .values
                .iter()
                .map(|l| (l.exp() - SPEC_FLOOR).powi(2))
                .sum::<f64>()
        };
        let e1 = energy(&x);
        let scaled: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        assert!((energy(&scaled) / e1 - 9.0).abs() < 1e-6);
    }

    // -- chain ---------------------------------------------------------------

    fn test_ecg(fs: u32, secs: f64, wander_hz: Option<f64>) -> EcgRecord {
        let n = (fs as f64 * secs) as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / fs as f64;
                let phase = (t % 0.8) - 0.4;
                let beat = (-(phase * phase) / (2.0 * 0.01f64.powi(2))).exp();
                beat + wander_hz.map_or(0.0, |f| 0.8 * (2.0 * PI * f * t).sin())
            })
            .collect();
        rec(samples, fs)
    }

    #[test]
    fn preprocess_contract() {
        let cfg = PreprocessConfig::default();
        let mut rng = SplitMix64::new(0);
        let out = preprocess(&test_ecg(300, 30.0, None), &cfg, Mode::Eval, &mut rng).unwrap();
        assert_eq!(out.fs_hz, 100);
        assert_eq!(out.len(), 3000);
        let mean = out.samples.iter().sum::<f64>() / 3000.0;
        let var = out.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3000.0;
        assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);

        let again = preprocess(&test_ecg(300, 30.0, None), &cfg, Mode::Eval, &mut SplitMix64::new(99)).unwrap();
        assert_eq!(out, again);
    }

    /// Fraction of periodogram power strictly below `cutoff` Hz, by direct DFT.
    fn low_band_fraction(x: &[f64], fs: f64, cutoff: f64) -> f64 {
        let n = x.len();
        let mean = x.iter().sum::<f64>() / n as f64;
        let total: f64 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * n as f64 / 2.0;
        let kmax = (cutoff * n as f64 / fs).ceil() as usize;
        let low: f64 = (1..kmax)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += (v - mean) * ang.cos();
                    im += (v - mean) * ang.sin();
                }
                re * re + im * im
            })
            .sum();
        low / total
    }

    #[test]
    fn preprocess_suppresses_baseline_wander() {
        let cfg = PreprocessConfig::default();
        let input = test_ecg(300, 30.0, Some(0.3));
        let out = preprocess(&input, &cfg, Mode::Eval, &mut SplitMix64::new(0)).unwrap();
        let before = low_band_fraction(&input.samples, 300.0, 0.5);
        let after = low_band_fraction(&out.samples, 100.0, 0.5);
        let reduction_db = 10.0 * (before / after).log10();
        assert!(reduction_db >= 20.0, "reduction {reduction_db} dB");
    }

    #[test]
    fn config_validation() {
        assert!(PreprocessConfig::default().validate().is_ok());
        let bad = PreprocessConfig {
            bp_high_hz: 60.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(PreprocessConfig::default().spectrogram_shape(), (92, 33));
    }
}
