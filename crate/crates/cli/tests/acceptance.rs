//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Runs without the libtest harness so the report is always visible.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use ecg_tta::augment::{
    add_noise_snr, apply, gaussian_balance, smote_balance, smote_interpolate, AugmentPolicy, TransformSpec,
};
use ecg_tta::bench::{self, SweepConfig, SweepKind};
use ecg_tta::dataio::{histogram, synth_dataset, zero_mean_power, Domain, SynthConfig};
use ecg_tta::model::{Balance, DualNetModel, Example, ModelConfig, TrainConfig};
use ecg_tta::preprocess::{preprocess, Biquad, PreprocessConfig, Spectrogram};
use ecg_tta::rng::{substream_seed, SplitMix64};
use ecg_tta::tta::{mode_of, Aggregation, TtaConfig};
use ecg_tta::{EcgRecord, Label, Mode, ProbVector};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

fn report(o: &Outcome) -> String {
    let ok = o.pass && o.elapsed <= o.budget;
    format!(
        "[{}] {}. {}: {} | {:.1} s (budget {} s)",
        if ok { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail,
        o.elapsed.as_secs_f64(),
        o.budget.as_secs()
    )
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---------------------------------------------------------------------------
// 1. DSP oracle

/// Bilinear transform of the analog band-pass `bw s / (s^2 + bw s + w0^2)`
/// through its poles: z = (k + p) / (k - p), zeros at +1 and -1, gain
/// matched at the analog centre frequency.
fn bilinear_oracle(fs: f64, low: f64, high: f64) -> ([f64; 3], [f64; 3]) {
    let k = 2.0 * fs;
    let warp = |f: f64| k * (PI * f / fs).tan();
    let (w1, w2) = (warp(low), warp(high));
    let bw = w2 - w1;
    let w0sq = w1 * w2;
    let disc = bw * bw - 4.0 * w0sq;
    // Poles as (re, im).
    let (p1, p2) = if disc >= 0.0 {
        ((-bw + disc.sqrt()) / 2.0, (-bw - disc.sqrt()) / 2.0)
    } else {
        (-bw / 2.0, -bw / 2.0)
    };
    let (a1, a2) = if disc >= 0.0 {
        let z1 = (k + p1) / (k - p1);
        let z2 = (k + p2) / (k - p2);
        (-(z1 + z2), z1 * z2)
    } else {
        // Conjugate pair re ± i im mapped to r e^{±i theta}.
        let (re, im) = (-bw / 2.0, (-disc).sqrt() / 2.0);
        let (nr, ni) = (k + re, im);
        let (dr, di) = (k - re, -im);
        let d = dr * dr + di * di;
        let zr = (nr * dr + ni * di) / d;
        let zi = (ni * dr - nr * di) / d;
        (-2.0 * zr, zr * zr + zi * zi)
    };
    // Unit gain at the digital image of w0: H(z0) computed from the digital
    // polynomial must equal the analog peak gain of 1.
    let theta = 2.0 * (w0sq.sqrt() / k).atan();
    let (c, s) = (theta.cos(), theta.sin());
    // B(z) = g (1 - z^-2), A(z) = 1 + a1 z^-1 + a2 z^-2 at z = e^{i theta}.
    let (c2, s2) = ((2.0 * theta).cos(), (2.0 * theta).sin());
    let num = ((1.0 - c2).powi(2) + s2 * s2).sqrt();
    let den = ((1.0 + a1 * c + a2 * c2).powi(2) + (a1 * s + a2 * s2).powi(2)).sqrt();
    let g = den / num;
    ([g, 0.0, -g], [1.0, a1, a2])
}

fn criterion_dsp() -> (bool, String) {
    let bq = Biquad::butterworth_bandpass(100.0, 0.5, 40.0).unwrap();
    let (b, a) = bilinear_oracle(100.0, 0.5, 40.0);
    let coef_err = (0..3)
        .map(|i| (bq.b[i] - b[i]).abs().max((bq.a[i] - a[i]).abs()))
        .fold(0.0, f64::max);

    let n = 3000;
    let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * 10.0 * i as f64 / 100.0).sin()).collect();
    let y = bq.filtfilt(&x);
    // Least-squares amplitude on the interior, away from edge transients.
    let (mut ss, mut sc, mut cc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in y.iter().enumerate().take(n - 300).skip(300) {
        let t = 2.0 * PI * 10.0 * i as f64 / 100.0;
        let (s, c) = t.sin_cos();
        ss += s * s;
        sc += s * c;
        cc += c * c;
        ys += v * s;
        yc += v * c;
    }
    let det = ss * cc - sc * sc;
    let (ca, cb) = ((ys * cc - yc * sc) / det, (yc * ss - ys * sc) / det);
    let amp = ca.hypot(cb);
    let dc = bq.filtfilt(&vec![1.0; 1000]).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pass = coef_err < 1e-6 && (0.9..=1.1).contains(&amp) && dc < 1e-3;
    (
        pass,
        format!("max coefficient error {coef_err:.2e} (< 1e-6), 10 Hz amplitude {amp:.4} (in [0.9, 1.1]), DC residual {dc:.2e} (< 1e-3)"),
    )
}

// ---------------------------------------------------------------------------
// 2. Gradient check

fn mini_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_transformer_blocks: 1,
        ffn_mult: 2,
        patch_len: 10,
        spec_channels: vec![4],
        axial_blocks: 1,
        axial_channels: 4,
        n_classes: 4,
        dropout_rate: 0.0,
        input_len: 100,
        spec_frames: 16,
        spec_bins: 12,
    }
}

fn criterion_gradients() -> (bool, String) {
    let cfg = mini_config();
    let mut m = DualNetModel::new(cfg.clone(), 21).unwrap();
    let mut rng = SplitMix64::new(22);
    let names: Vec<String> = m.names().map(String::from).collect();
    let trainable: Vec<bool> = (0..names.len()).map(|i| m.is_trainable(i)).collect();
    // Move every parameter off its structured initial value.
    for (i, name) in names.iter().enumerate() {
        if trainable[i] {
            for v in m.tensor_mut(name).unwrap().data.iter_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
    let inputs: Vec<(Vec<f64>, Spectrogram)> = (0..2)
        .map(|_| {
            let signal = (0..cfg.input_len).map(|_| rng.normal()).collect();
            let spec = Spectrogram {
                values: (0..cfg.spec_frames * cfg.spec_bins).map(|_| rng.normal()).collect(),
                frames: cfg.spec_frames,
                bins: cfg.spec_bins,
                frame_hop_s: 0.32,
                bin_width_hz: 1.5625,
            };
            (signal, spec)
        })
        .collect();
    let labels = [Label::AF, Label::Noisy];
    let examples = |inputs: &[(Vec<f64>, Spectrogram)]| -> Vec<(Vec<f64>, Spectrogram, Label)> {
        inputs.iter().cloned().zip(labels).map(|((s, p), l)| (s, p, l)).collect()
    };
    let owned = examples(&inputs);
    let loss_of = |m: &DualNetModel| {
        let ex: Vec<Example> = owned
            .iter()
            .map(|(s, p, l)| Example {
                signal: s,
                spec: p,
                label: *l,
            })
            .collect();
        m.gradients(&ex, Mode::Train, None).unwrap()
    };
    let analytic = loss_of(&m).grads;
    let h = 1e-3;
    let (mut worst, mut checked, mut at) = (0.0f64, 0usize, String::new());
    for (p, name) in names.iter().enumerate() {
        if !trainable[p] {
            continue;
        }
        for i in 0..analytic[p].data.len() {
            let orig = m.tensor(name).unwrap().data[i];
            let mut f = |off: f64| {
                m.tensor_mut(name).unwrap().data[i] = orig + off;
                loss_of(&m).loss
            };
            let fd = (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h);
            m.tensor_mut(name).unwrap().data[i] = orig;
            let a = analytic[p].data[i];
            let e = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if e > worst {
                worst = e;
                at = format!("{name}[{i}]");
            }
            checked += 1;
        }
    }
    (
        worst < 1e-4,
        format!("{checked} parameters, worst relative error {worst:.2e} at {at} (< 1e-4)"),
    )
}

// ---------------------------------------------------------------------------
// 3. Augmentation properties

fn random_record(rng: &mut SplitMix64, len: usize, fs: u32) -> EcgRecord {
    let label = Label::ALL[rng.below(4)];
    let f = rng.uniform_range(0.5, 8.0);
    let samples = (0..len)
        .map(|i| (2.0 * PI * f * i as f64 / fs as f64).sin() + 0.3 * rng.normal())
        .collect();
    EcgRecord::new("x", samples, fs, Some(label)).unwrap()
}

fn random_spec(kind: usize, len: usize, rng: &mut SplitMix64) -> TransformSpec {
    match kind {
        0 => TransformSpec::Drop { rate: rng.uniform() },
        1 => {
            let n = rng.int_inclusive(0, len);
            TransformSpec::Mask {
                start: rng.int_inclusive(0, len - n),
                len: n,
            }
        }
        2 => TransformSpec::Shift { k: rng.int_inclusive(0, len) },
        3 => TransformSpec::Sine {
            amp: rng.uniform_range(0.0, 1.0),
            freq_hz: rng.uniform_range(0.1, 40.0),
            phase: rng.uniform_range(0.0, 2.0 * PI),
        },
        4 => {
            let lo = rng.uniform_range(0.3, 5.0);
            TransformSpec::BandPass {
                low_hz: lo,
                high_hz: rng.uniform_range(lo + 1.0, 45.0),
            }
        }
        5 => {
            let n = rng.int_inclusive(0, len);
            TransformSpec::CutMix {
                start: rng.int_inclusive(0, len - n),
                len: n,
                donor: Some(0),
            }
        }
        6 => TransformSpec::Flip,
        _ => TransformSpec::Noise {
            snr_db: rng.uniform_range(-5.0, 40.0),
        },
    }
}

fn criterion_augment() -> (bool, String) {
    let cases = 1000;
    let mut failures = Vec::new();
    let mut fail = |what: &str, case: usize| failures.push(format!("{what} #{case}"));
    let mut worst_snr = 0.0f64;

    for case in 0..cases {
        let mut rng = SplitMix64::substream(31, case as u64);
        let len = rng.int_inclusive(50, 800);
        let x = random_record(&mut rng, len, 100);
        let mut donor = random_record(&mut rng, len, 100);
        donor.label = x.label;
        let donors = [donor];
        for kind in 0..8 {
            let spec = random_spec(kind, len, &mut rng);
            match apply(&spec, &x, &donors, &mut rng) {
                Ok(y) if y.len() == x.len() && y.label == x.label && y.fs_hz == x.fs_hz => {}
                _ => fail("length/label", case),
            }
        }
        let flip = apply(&TransformSpec::Flip, &x, &[], &mut rng).unwrap();
        if apply(&TransformSpec::Flip, &flip, &[], &mut rng).unwrap() != x {
            fail("flip involution", case);
        }
        let zeros = vec![0.0; len];
        let checks: [(TransformSpec, Option<&[f64]>); 6] = [
            (TransformSpec::Shift { k: 0 }, Some(&x.samples)),
            (TransformSpec::Shift { k: len }, Some(&zeros)),
            (TransformSpec::Mask { start: 0, len: 0 }, Some(&x.samples)),
            (TransformSpec::Mask { start: 0, len }, Some(&zeros)),
            (TransformSpec::Drop { rate: 0.0 }, Some(&x.samples)),
            (TransformSpec::Drop { rate: 1.0 }, Some(&zeros)),
        ];
        for (spec, expected) in checks {
            if Some(&apply(&spec, &x, &[], &mut rng).unwrap().samples[..]) != expected {
                fail("boundary identity", case);
            }
        }
        let k = rng.int_inclusive(0, len);
        let shifted = apply(&TransformSpec::Shift { k }, &x, &[], &mut rng).unwrap();
        if shifted.samples[..k].iter().any(|&v| v != 0.0) || shifted.samples[k..] != x.samples[..len - k] {
            fail("shift layout", case);
        }

        let long = random_record(&mut rng, 3000, 300);
        let snr = rng.uniform_range(0.0, 30.0);
        let y = add_noise_snr(&long.samples, snr, &mut rng);
        let noise: Vec<f64> = y.iter().zip(&long.samples).map(|(a, b)| a - b).collect();
        let measured = 10.0 * (zero_mean_power(&long.samples) / zero_mean_power(&noise)).log10();
        worst_snr = worst_snr.max((measured - snr).abs());
        if (measured - snr).abs() > 1.0 {
            fail("noise snr", case);
        }

        // SMOTE synthetics lie between their parents, coordinate-wise.
        let a = random_record(&mut rng, 40, 100);
        let b = random_record(&mut rng, 40, 100);
        let s = smote_interpolate(&a.samples, &b.samples, rng.uniform());
        let inside = s
            .iter()
            .zip(a.samples.iter().zip(&b.samples))
            .all(|(v, (p, q))| p.min(*q) <= *v && *v <= p.max(*q));
        if !inside {
            fail("smote bounds", case);
        }
        let n_min = rng.int_inclusive(6, 10);
        let set: Vec<EcgRecord> = (0..n_min + 14)
            .map(|i| {
                let mut r = random_record(&mut rng, 24, 100);
                r.id = format!("r{i}");
                r.label = Some(if i < n_min { Label::AF } else { Label::Normal });
                r
            })
            .collect();
        let balanced = smote_balance(&set, 5, &mut rng).unwrap();
        let minority: Vec<&EcgRecord> = set.iter().filter(|r| r.label == Some(Label::AF)).collect();
        for syn in balanced.iter().filter(|r| r.id.starts_with("smote_")) {
            let between = minority.iter().any(|p| {
                minority.iter().any(|q| {
                    syn.samples
                        .iter()
                        .zip(p.samples.iter().zip(&q.samples))
                        .all(|(v, (a, b))| a.min(*b) <= *v && *v <= a.max(*b))
                })
            });
            if !between || syn.label != Some(Label::AF) {
                fail("smote parents", case);
            }
        }
    }
    (
        failures.is_empty(),
        format!(
            "{cases} cases x (8 operators, involution, 7 boundary identities, SNR, SMOTE), {} failures{}; worst SNR error {worst_snr:.3} dB (<= 1)",
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Mode aggregation

fn criterion_mode() -> (bool, String) {
    let mut rng = SplitMix64::new(41);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..1000 {
        let n = rng.int_inclusive(1, 15);
        let pool = rng.int_inclusive(1, 4);
        let labels: Vec<Label> = (0..n).map(|_| Label::ALL[rng.below(pool)]).collect();
        let probs: Vec<ProbVector> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..4).map(|_| 2.0 * rng.normal()).collect();
                ProbVector::from_logits(&z)
            })
            .collect();
        let mut counts = [0usize; 4];
        let mut mass = [0.0f64; 4];
        for (l, p) in labels.iter().zip(&probs) {
            let c = Label::ALL.iter().position(|x| x == l).unwrap();
            counts[c] += 1;
            for k in 0..4 {
                mass[k] += p.0[k];
            }
        }
        let top = *counts.iter().max().unwrap();
        let tied: Vec<usize> = (0..4).filter(|&c| counts[c] == top).collect();
        if tied.len() > 1 {
            ties += 1;
        }
        let mut best = tied[0];
        for &c in &tied[1..] {
            if mass[c] > mass[best] {
                best = c;
            }
        }
        if mode_of(&labels, &probs).unwrap() != Label::ALL[best] {
            mismatches += 1;
        }
    }
    (
        mismatches == 0,
        format!("1000 prediction sets ({ties} with count ties), {mismatches} mismatches"),
    )
}

// ---------------------------------------------------------------------------
// 9. Class balance

fn criterion_balance() -> (bool, String) {
    let mut rng = SplitMix64::new(91);
    let set: Vec<EcgRecord> = (0..515 + 77)
        .map(|i| {
            let label = if i < 515 { Label::Normal } else { Label::AF };
            EcgRecord::new(format!("r{i}"), (0..30).map(|_| rng.normal()).collect(), 100, Some(label)).unwrap()
        })
        .collect();
    let smote = histogram(smote_balance(&set, 5, &mut rng).unwrap().iter().filter_map(|r| r.label));
    let gauss = histogram(gaussian_balance(&set, 0.05, &mut rng).unwrap().iter().filter_map(|r| r.label));
    let equal = |h: &std::collections::BTreeMap<Label, usize>| h.values().all(|&c| c == 515) && h.len() == 2;
    (
        equal(&smote) && equal(&gauss),
        format!("{{N:515, A:77}} -> smote {smote:?}, gaussian {gauss:?}"),
    )
}

// ---------------------------------------------------------------------------
// 5. CLI determinism

fn cli(threads: &str, args: &[&str]) -> (Vec<u8>, bool) {
    let out = Command::new(env!("CARGO_BIN_EXE_ecg-tta"))
        .arg("--threads")
        .arg(threads)
        .args(args)
        .output()
        .expect("spawn ecg-tta");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    (out.stdout, out.status.success())
}

fn criterion_determinism(dir: &Path) -> (bool, String) {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = dir.join("data");
    let test = dir.join("test");
    let cfg = dir.join("cfg.txt");
    fs::write(
        &cfg,
        "train.epochs = 3\ntrain.augment = on\nbench.drop_grid = 0, 0.3\nbench.tta_grid = 1, 4\n",
    )
    .unwrap();
    let mut ok = true;
    for (out, n, a, seed, domain) in [(&data, "16", "8", "1", "source"), (&test, "6", "6", "2", "target")] {
        ok &= cli("1", &["synth", "--out", &s(out), "--n-normal", n, "--n-af", a, "--seed", seed, "--domain", domain]).1;
    }
    let manifest = s(&data.join("manifest.csv"));
    let test_manifest = s(&test.join("manifest.csv"));
    let mut same = Vec::new();
    let mut artifacts = |label: &str, runs: Vec<Vec<u8>>| same.push((label.to_string(), runs.windows(2).all(|w| w[0] == w[1])));

    // Two runs with one thread, one with eight.
    let runs = ["1", "1", "8"];
    let mut models = Vec::new();
    for (i, t) in runs.iter().enumerate() {
        let model = dir.join(format!("model{i}.bin"));
        let (stdout, good) = cli(t, &[
            "train", "--manifest", &manifest, "--config", &s(&cfg), "--out", &s(&model), "--balance", "smote", "--seed", "5",
        ]);
        ok &= good;
        models.push((fs::read(&model).unwrap_or_default(), stdout));
    }
    artifacts("model file", models.iter().map(|m| m.0.clone()).collect());
    artifacts("train stdout", models.iter().map(|m| m.1.clone()).collect());
    let model = s(&dir.join("model0.bin"));

    let mut evals = Vec::new();
    for (i, t) in runs.iter().enumerate() {
        let pred = dir.join(format!("pred{i}.csv"));
        let (stdout, good) = cli(t, &[
            "eval", "--model", &model, "--manifest", &test_manifest, "--config", &s(&cfg), "--tta", "5", "--seed", "9",
            "--predictions", &s(&pred),
        ]);
        ok &= good;
        evals.push((fs::read(&pred).unwrap_or_default(), stdout));
    }
    artifacts("predictions.csv", evals.iter().map(|e| e.0.clone()).collect());
    artifacts("eval metrics", evals.iter().map(|e| e.1.clone()).collect());

    for kind in ["drop", "ttacurve"] {
        let mut outs = Vec::new();
        for (i, t) in runs.iter().enumerate() {
            let out = dir.join(format!("{kind}{i}"));
            let (stdout, good) = cli(t, &[
                "sweep", "--kind", kind, "--model", &model, "--manifest", &test_manifest, "--config", &s(&cfg),
                "--repeats", "3", "--seed", "4", "--out", &s(&out),
            ]);
            ok &= good;
            let mut bytes = stdout;
            let files: &[&str] = if kind == "drop" { &["sweep.csv", "summary.csv"] } else { &["ttacurve.csv"] };
            for f in files {
                bytes.extend(fs::read(out.join(f)).unwrap_or_default());
            }
            outs.push(bytes);
        }
        artifacts(&format!("{kind} sweep CSVs"), outs);
    }
    let differing: Vec<&str> = same.iter().filter(|(_, eq)| !eq).map(|(l, _)| l.as_str()).collect();
    (
        ok && differing.is_empty(),
        format!(
            "train/eval/sweep(drop, ttacurve) x 3 runs (threads 1, 1, 8): {} artifacts compared, {} differ{}{}",
            same.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) },
            if ok { "" } else { "; a command failed" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 6-8. Cross-domain experiments

fn prepared(raw: &[EcgRecord], pre: &PreprocessConfig, mode: Mode, seed: u64) -> Vec<EcgRecord> {
    raw.par_iter()
        .enumerate()
        .map(|(i, r)| preprocess(r, pre, mode, &mut SplitMix64::substream(seed, i as u64)).unwrap())
        .collect()
}

fn non_increasing(means: &[f64]) -> (bool, f64) {
    let worst = means.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    (worst <= 0.02, worst)
}

fn main() {
    let mut outcomes: Vec<Outcome> = Vec::new();
    let mut run = |id, name, budget: u64, f: &mut dyn FnMut() -> (bool, String)| {
        let t = Instant::now();
        let (pass, detail) = f();
        let o = Outcome {
            id,
            name,
            pass,
            detail,
            elapsed: t.elapsed(),
            budget: secs(budget),
        };
        println!("{}", report(&o));
        outcomes.push(o);
    };

    run(1, "DSP oracle agreement", 1, &mut criterion_dsp);
    run(2, "Gradient correctness", 60, &mut criterion_gradients);
    run(3, "Augmentation property suite", 30, &mut criterion_augment);
    run(4, "Mode-aggregation oracle", 5, &mut criterion_mode);
    run(9, "Class-balance contract", 30, &mut criterion_balance);
    let tmp = tempfile::tempdir().unwrap();
    run(5, "Determinism", 600, &mut || criterion_determinism(tmp.path()));

    // Shared cross-domain setup: 400 source records at a 4:1 imbalance,
    // 200 target-domain records.
    let pre = PreprocessConfig::default();
    let source = synth_dataset(&SynthConfig {
        n_normal: 320,
        n_af: 80,
        fs_hz: 300,
        duration_s: 30.0,
        domain: Domain::Source,
        seed: 101,
    })
    .unwrap();
    let target = synth_dataset(&SynthConfig {
        n_normal: 100,
        n_af: 100,
        fs_hz: 200,
        duration_s: 40.0,
        domain: Domain::Target,
        seed: 202,
    })
    .unwrap();
    let train_set = prepared(&source, &pre, Mode::Train, substream_seed(7, u64::MAX));
    let test_set = prepared(&target, &pre, Mode::Eval, 0);
    let train_cfg = TrainConfig {
        balance: Balance::Smote,
        seed: 7,
        ..TrainConfig::default()
    };
    let sweeps: Vec<SweepConfig> = SweepKind::ALL
        .iter()
        .map(|&k| SweepConfig {
            seed: 13,
            ..SweepConfig::new(k)
        })
        .collect();

    let mut compared = None;
    run(8, "Augmented-training robustness", 900, &mut || {
        let cmp = bench::compare_training(
            &train_set,
            &test_set,
            &ModelConfig::for_preprocess(&pre),
            &train_cfg,
            &AugmentPolicy::default(),
            &sweeps,
            &pre,
        )
        .unwrap();
        let mut pass = true;
        let mut parts = Vec::new();
        for ((on, off), point) in cmp.augmented_sweeps.iter().zip(&cmp.plain_sweeps).zip([0.3, 300.0, 10.0]) {
            let (a, b) = (on.point(point).unwrap().mean, off.point(point).unwrap().mean);
            pass &= a >= b;
            parts.push(format!("{} {point}: on {a:.4} vs off {b:.4}", on.kind.as_str()));
        }
        for (arm, results) in [("on", &cmp.augmented_sweeps), ("off", &cmp.plain_sweeps)] {
            for r in results {
                let means: Vec<f64> = r.points.iter().map(|p| p.mean).collect();
                let (ok, worst) = non_increasing(&means);
                pass &= ok;
                parts.push(format!("{arm}/{} max rise {worst:+.4}", r.kind.as_str()));
            }
        }
        let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_robustness");
        bench::report_compared(&cmp, &out).unwrap();
        compared = Some(cmp);
        (pass, parts.join("; "))
    });

    let cmp = compared.expect("criterion 8 ran");
    let model = &cmp.augmented.model;
    let mut curve = None;
    let mut curve_time = Duration::ZERO;
    run(6, "Cross-domain TTA benefit", 600, &mut || {
        let t = Instant::now();
        let base = TtaConfig {
            seed: 17,
            ..TtaConfig::default()
        };
        let c = bench::tta_curve(model, &test_set, &[1, 5, 15, 25, 50], 10, &base, &pre).unwrap();
        curve_time = t.elapsed();
        let plain = c.row(0).unwrap().mean_f1;
        let n25 = c.row(25).unwrap();
        let improved = n25.raw.iter().filter(|&&f| f > plain).count();
        let pass = n25.mean_f1 >= plain - 0.005 && improved >= 7;
        let detail = format!(
            "plain F1 {plain:.4}, TTA N=25 mean F1 {:.4} (>= plain - 0.005), improvement {:+.4}, positive in {improved}/10 seeds (>= 7); model from criterion 8, time includes N up to 50 for criterion 7",
            n25.mean_f1,
            n25.mean_f1 - plain
        );
        bench::report_tta_curve(&c, Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_ttacurve")).unwrap();
        curve = Some(c);
        (pass, detail)
    });

    let c = curve.expect("criterion 6 ran");
    run(7, "TTA stabilization", 600, &mut || {
        let stds: Vec<String> = c.rows.iter().skip(1).map(|r| format!("N={}: {:.4}", r.n, r.std_f1)).collect();
        let (s1, s25) = (c.row(1).unwrap().std_f1, c.row(25).unwrap().std_f1);
        let agreement = bench::prefix_agreement(&c, 12, 48, Aggregation::Mode).unwrap();
        (
            s25 <= s1 && agreement >= 0.95,
            format!(
                "F1 std {} (N=25 <= N=1); mode agreement of 12 vs 48 runs {:.4} (>= 0.95); shares the criterion 6 runs ({:.1} s)",
                stds.join(", "),
                agreement,
                curve_time.as_secs_f64()
            ),
        )
    });

    outcomes.sort_by_key(|o| o.id);
    println!("\nsummary:");
    for o in &outcomes {
        println!("{}", report(o));
    }
    let failed = outcomes.iter().filter(|o| !(o.pass && o.elapsed <= o.budget)).count();
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
