//! Robustness sweeps, TTA convergence curves and their CSV / SVG reports.
//!
//! All experiments take preprocessed (model-ready) records. Every random
//! draw comes from a substream keyed by grid point, repeat and record index,
//! so results do not depend on thread count or evaluation order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::augment::{add_noise_snr, apply, AugmentPolicy, TransformSpec};
use crate::error::{Error, Result};
use crate::model::{train, DualNetModel, ModelConfig, TrainConfig, TrainOutcome};
use crate::preprocess::PreprocessConfig;
use crate::rng::{substream_seed, SplitMix64};
use crate::tta::{predict_plain, tta_predict_prepared, Aggregation, PredictionSet, TtaConfig};
use crate::types::{evaluate, EcgRecord, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepKind {
    /// Zero each sample independently with probability `intensity`.
    Drop,
    /// Zero one contiguous window of `intensity` samples at a random offset.
    Mask,
    /// Additive white noise at `intensity` dB; infinity means no noise.
    Snr,
}

impl SweepKind {
    pub const ALL: [SweepKind; 3] = [SweepKind::Drop, SweepKind::Mask, SweepKind::Snr];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepKind::Drop => "drop",
            SweepKind::Mask => "mask",
            SweepKind::Snr => "snr",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepKind::Drop => (0..10).map(|i| i as f64 / 10.0).collect(),
            SweepKind::Mask => (0..=10).map(|i| (150 * i) as f64).collect(),
            SweepKind::Snr => std::iter::once(f64::INFINITY)
                .chain((0..=6).rev().map(|i| (5 * i) as f64))
                .collect(),
        }
    }

    /// Intensity that leaves the signal untouched.
    pub fn is_identity(self, intensity: f64) -> bool {
        match self {
            SweepKind::Drop | SweepKind::Mask => intensity == 0.0,
            SweepKind::Snr => intensity == f64::INFINITY,
        }
    }

    fn axis_label(self) -> &'static str {
        match self {
            SweepKind::Drop => "drop rate",
            SweepKind::Mask => "mask length (samples)",
            SweepKind::Snr => "SNR (dB)",
        }
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(SweepKind::Drop),
            "mask" => Ok(SweepKind::Mask),
            "snr" => Ok(SweepKind::Snr),
            _ => Err(Error::Config(format!("sweep kind must be drop, mask or snr, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// Ascending for drop and mask, descending for SNR.
    pub grid: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
}

impl SweepConfig {
    pub fn new(kind: SweepKind) -> Self {
        Self {
            kind,
            grid: kind.default_grid(),
            repeats: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("sweep repeats must be >= 1".into()));
        }
        let ordered = self.grid.windows(2).all(|w| match self.kind {
            SweepKind::Snr => w[0] > w[1],
            _ => w[0] < w[1],
        });
        if !ordered {
            let dir = if self.kind == SweepKind::Snr { "descending" } else { "ascending" };
            return Err(Error::Config(format!("{} grid must be strictly {dir}", self.kind.as_str())));
        }
        for &v in &self.grid {
            let ok = match self.kind {
                SweepKind::Drop => (0.0..=1.0).contains(&v),
                SweepKind::Mask => v >= 0.0 && v.fract() == 0.0 && v.is_finite(),
                SweepKind::Snr => !v.is_nan() && v != f64::NEG_INFINITY,
            };
            if !ok {
                return Err(Error::Config(format!("invalid {} intensity {v}", self.kind.as_str())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub intensity: f64,
    pub mean: f64,
    /// Population standard deviation of `raw`.
    pub std: f64,
    /// Accuracy of each repeat.
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn point(&self, intensity: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.intensity == intensity)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Applies one sweep operator at a fixed intensity.
pub fn perturb(kind: SweepKind, intensity: f64, x: &EcgRecord, rng: &mut SplitMix64) -> Result<EcgRecord> {
    if kind.is_identity(intensity) {
        return Ok(x.clone());
    }
    match kind {
        SweepKind::Drop => apply(&TransformSpec::Drop { rate: intensity }, x, &[], rng),
        SweepKind::Mask => {
            let len = intensity as usize;
            if len > x.len() {
                return Err(Error::InvalidArgument(format!(
                    "mask length {len} exceeds record length {}",
                    x.len()
                )));
            }
            let start = rng.below(x.len() - len + 1);
            apply(&TransformSpec::Mask { start, len }, x, &[], rng)
        }
        SweepKind::Snr => Ok(x.with_samples(add_noise_snr(&x.samples, intensity, rng))),
    }
}

fn labels_of(records: &[EcgRecord]) -> Result<Vec<Label>> {
    records
        .iter()
        .map(|r| {
            r.label
                .ok_or_else(|| Error::InvalidArgument(format!("record {} has no label", r.id)))
        })
        .collect()
}

/// Plain eval-mode accuracy.
pub fn plain_accuracy(model: &DualNetModel, records: &[EcgRecord], pre: &PreprocessConfig) -> Result<f64> {
    let truth = labels_of(records)?;
    let probs = predict_plain(model, records, pre)?;
    let pairs: Vec<(Label, Label)> = truth.into_iter().zip(probs.iter().map(|p| p.argmax())).collect();
    Ok(evaluate(&pairs)?.accuracy)
}

/// Accuracy of plain inference on perturbed copies of `test_set`, for every
/// grid point and repeat. Identity points are evaluated once.
pub fn robustness_sweep(
    model: &DualNetModel,
    test_set: &[EcgRecord],
    cfg: &SweepConfig,
    pre: &PreprocessConfig,
) -> Result<SweepResult> {
    cfg.validate()?;
    labels_of(test_set)?;
    let mut points = Vec::with_capacity(cfg.grid.len());
    for (p, &intensity) in cfg.grid.iter().enumerate() {
        let raw = if cfg.kind.is_identity(intensity) {
            vec![plain_accuracy(model, test_set, pre)?; cfg.repeats]
        } else {
            (0..cfg.repeats)
                .map(|r| {
                    let key = substream_seed(substream_seed(cfg.seed, p as u64), r as u64);
                    let perturbed: Vec<EcgRecord> = test_set
                        .par_iter()
                        .enumerate()
                        .map(|(i, x)| perturb(cfg.kind, intensity, x, &mut SplitMix64::substream(key, i as u64)))
                        .collect::<Result<_>>()?;
                    plain_accuracy(model, &perturbed, pre)
                })
                .collect::<Result<Vec<f64>>>()?
        };
        let (mean, std) = mean_std(&raw);
        points.push(SweepPoint {
            intensity,
            mean,
            std,
            raw,
        });
    }
    Ok(SweepResult { kind: cfg.kind, points })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaCurveRow {
    /// 0 is plain inference.
    pub n: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaCurve {
    pub rows: Vec<TtaCurveRow>,
    /// Per repeat, per record: the prediction set at the largest N. Smaller
    /// N are its prefixes.
    pub predictions: Vec<Vec<PredictionSet>>,
}

impl TtaCurve {
    pub fn row(&self, n: usize) -> Option<&TtaCurveRow> {
        self.rows.iter().find(|r| r.n == n)
    }
}

/// TTA seed of record `index` in repeat `repeat`.
pub fn tta_record_seed(seed: u64, repeat: usize, index: usize) -> u64 {
    substream_seed(substream_seed(seed, repeat as u64), index as u64)
}

/// Binary-AF F1 of TTA against N for every `n` in `n_grid`, over `repeats`
/// independent TTA seeds, plus an N = 0 row for plain inference.
///
/// Each record and repeat is run once at the largest N; smaller N reuse the
/// leading runs, which is exactly what a separate N-run call would return.
pub fn tta_curve(
    model: &DualNetModel,
    test_set: &[EcgRecord],
    n_grid: &[usize],
    repeats: usize,
    base: &TtaConfig,
    pre: &PreprocessConfig,
) -> Result<TtaCurve> {
    if n_grid.is_empty() || n_grid[0] == 0 || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("tta grid must be ascending and >= 1, got {n_grid:?}")));
    }
    if repeats == 0 {
        return Err(Error::Config("tta curve repeats must be >= 1".into()));
    }
    let truth = labels_of(test_set)?;
    let f1 = |pred: &mut dyn Iterator<Item = Label>| -> Result<f64> {
        let pairs: Vec<(Label, Label)> = truth.iter().copied().zip(pred).collect();
        Ok(evaluate(&pairs)?.f1_af)
    };
    let plain = predict_plain(model, test_set, pre)?;
    let plain_f1 = f1(&mut plain.iter().map(|p| p.argmax()))?;
    let mut rows = vec![TtaCurveRow {
        n: 0,
        mean_f1: plain_f1,
        std_f1: 0.0,
        raw: vec![plain_f1; repeats],
    }];

    let max_n = *n_grid.last().expect("grid checked non-empty");
    let mut predictions = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let sets = test_set
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let cfg = TtaConfig {
                    n_runs: max_n,
                    seed: tta_record_seed(base.seed, r, i),
                    ..base.clone()
                };
                tta_predict_prepared(model, x, pre, &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        predictions.push(sets);
    }
    for &n in n_grid {
        let raw = predictions
            .iter()
            .map(|sets| {
                let labels = sets
                    .iter()
                    .map(|s| s.prefix(n, base.aggregation).map(|p| p.final_label))
                    .collect::<Result<Vec<_>>>()?;
                f1(&mut labels.into_iter())
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean_f1, std_f1) = mean_std(&raw);
        rows.push(TtaCurveRow { n, mean_f1, std_f1, raw });
    }
    Ok(TtaCurve { rows, predictions })
}

/// Fraction of records whose aggregated label over the first `n` runs equals
/// the one over the first `m` runs, pooled over repeats.
pub fn prefix_agreement(curve: &TtaCurve, n: usize, m: usize, aggregation: Aggregation) -> Result<f64> {
    let (mut same, mut total) = (0usize, 0usize);
    for sets in &curve.predictions {
        for s in sets {
            same += usize::from(s.prefix(n, aggregation)?.final_label == s.prefix(m, aggregation)?.final_label);
            total += 1;
        }
    }
    Ok(same as f64 / total.max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct ComparedTraining {
    pub augmented: TrainOutcome,
    pub plain: TrainOutcome,
    pub augmented_sweeps: Vec<SweepResult>,
    pub plain_sweeps: Vec<SweepResult>,
}

/// Trains with and without augmentation (otherwise identical, same seed) and
/// runs the same sweeps on both models.
pub fn compare_training(
    train_set: &[EcgRecord],
    test_set: &[EcgRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    policy: &AugmentPolicy,
    sweeps: &[SweepConfig],
    pre: &PreprocessConfig,
) -> Result<ComparedTraining> {
    for s in sweeps {
        s.validate()?;
    }
    let run = |augment: bool| -> Result<(TrainOutcome, Vec<SweepResult>)> {
        let cfg = TrainConfig {
            augment,
            ..train_cfg.clone()
        };
        let outcome = train(train_set, model_cfg, &cfg, policy, pre)?;
        let results = sweeps
            .iter()
            .map(|s| robustness_sweep(&outcome.model, test_set, s, pre))
            .collect::<Result<Vec<_>>>()?;
        Ok((outcome, results))
    };
    let (augmented, augmented_sweeps) = run(true)?;
    let (plain, plain_sweeps) = run(false)?;
    Ok(ComparedTraining {
        augmented,
        plain,
        augmented_sweeps,
        plain_sweeps,
    })
}

fn write_file(path: impl AsRef<Path>, contents: String) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes `sweep.csv`, `summary.csv` and one `<kind>.svg` per result.
pub fn report(results: &[SweepResult], out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut raw_rows = Vec::new();
    let mut summary_rows = Vec::new();
    for res in results {
        for p in &res.points {
            for (r, acc) in p.raw.iter().enumerate() {
                raw_rows.push(vec![
                    res.kind.as_str().to_string(),
                    fmt_f64(p.intensity),
                    r.to_string(),
                    fmt_f64(*acc),
                ]);
            }
            summary_rows.push(vec![
                res.kind.as_str().to_string(),
                fmt_f64(p.intensity),
                fmt_f64(p.mean),
                fmt_f64(p.std),
            ]);
        }
    }
    write_csv(&dir.join("sweep.csv"), &["kind", "intensity", "repeat", "accuracy"], raw_rows)?;
    write_csv(&dir.join("summary.csv"), &["kind", "intensity", "mean", "std"], summary_rows)?;
    for res in results {
        let series = Series::from_sweep(res.kind.as_str(), res);
        let svg = svg_plot(res.kind.as_str(), res.kind.axis_label(), "accuracy", &[series]);
        write_file(dir.join(format!("{}.svg", res.kind.as_str())), svg)?;
    }
    Ok(())
}

/// Reports both arms of a comparison into `augment_on/` and `augment_off/`,
/// plus one overlay plot per sweep kind.
pub fn report_compared(cmp: &ComparedTraining, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    report(&cmp.augmented_sweeps, dir.join("augment_on"))?;
    report(&cmp.plain_sweeps, dir.join("augment_off"))?;
    for (on, off) in cmp.augmented_sweeps.iter().zip(&cmp.plain_sweeps) {
        let svg = svg_plot(
            on.kind.as_str(),
            on.kind.axis_label(),
            "accuracy",
            &[Series::from_sweep("augment on", on), Series::from_sweep("augment off", off)],
        );
        write_file(dir.join(format!("{}_compared.svg", on.kind.as_str())), svg)?;
    }
    Ok(())
}

/// Writes `ttacurve.csv` (n, mean_f1, std_f1) and `ttacurve.svg`.
pub fn report_tta_curve(curve: &TtaCurve, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(
        &dir.join("ttacurve.csv"),
        &["n", "mean_f1", "std_f1"],
        curve
            .rows
            .iter()
            .map(|r| vec![r.n.to_string(), fmt_f64(r.mean_f1), fmt_f64(r.std_f1)]),
    )?;
    let series = Series {
        name: "TTA".into(),
        points: curve.rows.iter().map(|r| (r.n as f64, r.mean_f1, r.std_f1)).collect(),
    };
    write_file(dir.join("ttacurve.svg"), svg_plot("ttacurve", "N (0 = no TTA)", "F1 (AF)", &[series]))?;
    Ok(())
}

struct Series {
    name: String,
    /// (x, mean, std)
    points: Vec<(f64, f64, f64)>,
}

impl Series {
    fn from_sweep(name: &str, res: &SweepResult) -> Self {
        let finite_max = res
            .points
            .iter()
            .map(|p| p.intensity)
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        Self {
            name: name.to_string(),
            points: res
                .points
                .iter()
                // A noiseless point is drawn one grid step beyond the cleanest SNR.
                .map(|p| {
                    let x = if p.intensity.is_finite() { p.intensity } else { finite_max + 5.0 };
                    (x, p.mean, p.std)
                })
                .collect(),
        }
    }
}

const COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];

fn svg_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 20.0, 40.0, 60.0);
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !(x1 > x0) {
        x0 -= 1.0;
        x1 += 1.0;
    }
    let ys = series.iter().flat_map(|s| s.points.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2]));
    let (y0, y1) = ys.fold((0.0f64, 1.0f64), |(a, b), y| (a.min(y), b.max(y)));
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let (bx, by) = (left, h - bottom);
    let _ = writeln!(s, r#"<line x1="{bx}" y1="{by}" x2="{}" y2="{by}" stroke="black"/>"#, w - right);
    let _ = writeln!(s, r#"<line x1="{bx}" y1="{top}" x2="{bx}" y2="{by}" stroke="black"/>"#);
    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * i as f64 / 5.0;
        let fy = y0 + (y1 - y0) * i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.3}</text>"#, px(fx), by + 18.0, fx);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.2}</text>"#, bx - 6.0, py(fy) + 4.0, fy);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (left + w - right) / 2.0, h - 15.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        (top + by) / 2.0,
        escape(ylabel)
    );
    for (k, ser) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let path: Vec<String> = ser.points.iter().map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(x, m, sd) in &ser.points {
            let (cx, lo, hi) = (px(x), py(m - sd), py(m + sd));
            let _ = writeln!(s, r#"<line x1="{cx:.2}" y1="{lo:.2}" x2="{cx:.2}" y2="{hi:.2}" stroke="{c}"/>"#);
            let _ = writeln!(s, r#"<circle cx="{cx:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, py(m));
        }
        let ly = top + 16.0 * (k as f64 + 1.0);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{c}" text-anchor="end">{}</text>"#, w - right - 6.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
