//! The `key = value` configuration file shared by every pipeline stage.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys are errors. [`GlobalConfig::to_text`] prints every key with
//! its current value, so `GlobalConfig::default().to_text()` is the reference
//! list of keys and defaults.
//!
//! | namespace | keys |
//! |---|---|
//! | (none) | `median_window_s`, `bp_low_hz`, `bp_high_hz`, `target_fs_hz`, `target_len`, `spec_window`, `spec_hop` |
//! | `aug.` | `<op>.prob` for every operator, `drop.rate_min/_max`, `mask.len_min/_max`, `shift.len_min/_max`, `sine.amp_min/_max`, `sine.freq_hz_min/_max`, `bandpass.low_hz_min/_max`, `bandpass.high_hz_min/_max`, `cutmix.len_min/_max`, `flip.p`, `noise.snr_db_min/_max`, `max_ops` |
//! | `model.` | `d_model`, `n_heads`, `n_transformer_blocks`, `ffn_mult`, `patch_len`, `spec_channels`, `axial_blocks`, `axial_channels`, `n_classes`, `dropout_rate` |
//! | `train.` | `epochs`, `batch_size`, `learning_rate`, `beta1`, `beta2`, `eps`, `weight_decay`, `augment`, `balance`, `smote_k`, `gaussian_sigma`, `seed` |
//! | `tta.` | `n_runs`, `aggregation`, `seed`, `noise_mu`, `noise_sigma` |
//! | `bench.` | `repeats`, `seed`, `drop_grid`, `mask_grid`, `snr_grid`, `tta_grid` |
//!
//! Mask, shift and CutMix lengths under `aug.` are fractions of the signal
//! length. Grids are comma-separated; `inf` is the noiseless SNR point.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::augment::{AugmentPolicy, NoiseSpec, OpKind, Range};
use crate::bench::{SweepConfig, SweepKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::preprocess::PreprocessConfig;
use crate::tta::{Aggregation, TtaConfig};

/// Model keys fixed by the preprocessing configuration.
const DERIVED_MODEL_KEYS: [&str; 3] = ["input_len", "spec_frames", "spec_bins"];

#[derive(Debug, Clone, PartialEq)]
pub struct TtaSettings {
    pub n_runs: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub noise: NoiseSpec,
}

impl Default for TtaSettings {
    fn default() -> Self {
        let d = TtaConfig::default();
        Self {
            n_runs: d.n_runs,
            aggregation: d.aggregation,
            seed: d.seed,
            noise: d.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub repeats: usize,
    pub seed: u64,
    pub drop_grid: Vec<f64>,
    pub mask_grid: Vec<f64>,
    pub snr_grid: Vec<f64>,
    pub tta_grid: Vec<usize>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            repeats: 10,
            seed: 0,
            drop_grid: SweepKind::Drop.default_grid(),
            mask_grid: SweepKind::Mask.default_grid(),
            snr_grid: SweepKind::Snr.default_grid(),
            tta_grid: vec![1, 5, 10, 15, 25, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalConfig {
    pub preprocess: PreprocessConfig,
    pub augment: AugmentPolicy,
    /// Architecture; its input shape fields follow `preprocess`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tta: TtaSettings,
    pub bench: BenchSettings,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on or off, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn fmt_list<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl GlobalConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.merge_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` on top of the current values.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", no + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        self.validate()
    }

    /// Sets one key. Values are not cross-validated until [`validate`](Self::validate).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(rest) = key.strip_prefix("aug.") {
            return self.set_augment(key, rest, value);
        }
        if let Some(rest) = key.strip_prefix("model.") {
            if DERIVED_MODEL_KEYS.contains(&rest) {
                return Err(Error::Config(format!("{key} follows the preprocessing settings and cannot be set")));
            }
            return self
                .model
                .set(rest, value)
                .map_err(|_| Error::Config(format!("unknown key or bad value: {key} = {value:?}")));
        }
        let p = &mut self.preprocess;
        let t = &mut self.train;
        let b = &mut self.bench;
        match key {
            "median_window_s" => p.median_window_s = parse(key, value)?,
            "bp_low_hz" => p.bp_low_hz = parse(key, value)?,
            "bp_high_hz" => p.bp_high_hz = parse(key, value)?,
            "target_fs_hz" => p.target_fs_hz = parse(key, value)?,
            "target_len" => p.target_len = parse(key, value)?,
            "spec_window" => p.spec_window = parse(key, value)?,
            "spec_hop" => p.spec_hop = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.augment" => t.augment = parse_bool(key, value)?,
            "train.balance" => t.balance = value.parse()?,
            "train.smote_k" => t.smote_k = parse(key, value)?,
            "train.gaussian_sigma" => t.gaussian_sigma = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "tta.n_runs" => self.tta.n_runs = parse(key, value)?,
            "tta.aggregation" => self.tta.aggregation = value.parse()?,
            "tta.seed" => self.tta.seed = parse(key, value)?,
            "tta.noise_mu" => self.tta.noise.mu = parse(key, value)?,
            "tta.noise_sigma" => self.tta.noise.sigma = parse(key, value)?,
            "bench.repeats" => b.repeats = parse(key, value)?,
            "bench.seed" => b.seed = parse(key, value)?,
            "bench.drop_grid" => b.drop_grid = parse_list(key, value)?,
            "bench.mask_grid" => b.mask_grid = parse_list(key, value)?,
            "bench.snr_grid" => b.snr_grid = parse_list(key, value)?,
            "bench.tta_grid" => b.tta_grid = parse_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn set_augment(&mut self, key: &str, rest: &str, value: &str) -> Result<()> {
        let a = &mut self.augment;
        if rest == "max_ops" {
            a.max_ops = parse(key, value)?;
            return Ok(());
        }
        if rest == "flip.p" {
            a.flip_p = parse(key, value)?;
            return Ok(());
        }
        let unknown = || Error::Config(format!("unknown key {key:?}"));
        let (op, param) = rest.split_once('.').ok_or_else(unknown)?;
        let kind = OpKind::from_name(op).ok_or_else(unknown)?;
        if param == "prob" {
            a.prob[kind as usize] = parse(key, value)?;
            return Ok(());
        }
        let (name, end) = param
            .strip_suffix("_min")
            .map(|n| (n, 0))
            .or_else(|| param.strip_suffix("_max").map(|n| (n, 1)))
            .ok_or_else(unknown)?;
        let range: &mut Range = match (kind, name) {
            (OpKind::Drop, "rate") => &mut a.drop_rate,
            (OpKind::Mask, "len") => &mut a.mask_len,
            (OpKind::Shift, "len") => &mut a.shift,
            (OpKind::Sine, "amp") => &mut a.sine_amp,
            (OpKind::Sine, "freq_hz") => &mut a.sine_freq_hz,
            (OpKind::BandPass, "low_hz") => &mut a.bandpass_low_hz,
            (OpKind::BandPass, "high_hz") => &mut a.bandpass_high_hz,
            (OpKind::CutMix, "len") => &mut a.cutmix_len,
            (OpKind::Noise, "snr_db") => &mut a.noise_snr_db,
            _ => return Err(unknown()),
        };
        let v = parse(key, value)?;
        if end == 0 {
            range.0 = v;
        } else {
            range.1 = v;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.augment.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        self.tta_config().validate()?;
        if self.bench.tta_grid.is_empty() || self.bench.tta_grid[0] == 0 || self.bench.tta_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bench.tta_grid must be ascending and >= 1".into()));
        }
        for kind in SweepKind::ALL {
            self.sweep_config(kind).validate()?;
        }
        Ok(())
    }

    /// Model architecture with input shapes taken from the preprocessing settings.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.match_preprocess(&self.preprocess);
        m
    }

    pub fn tta_config(&self) -> TtaConfig {
        TtaConfig {
            n_runs: self.tta.n_runs,
            policy: self.augment.test_time(),
            noise: self.tta.noise,
            aggregation: self.tta.aggregation,
            seed: self.tta.seed,
        }
    }

    pub fn sweep_config(&self, kind: SweepKind) -> SweepConfig {
        let grid = match kind {
            SweepKind::Drop => &self.bench.drop_grid,
            SweepKind::Mask => &self.bench.mask_grid,
            SweepKind::Snr => &self.bench.snr_grid,
        };
        SweepConfig {
            kind,
            grid: grid.clone(),
            repeats: self.bench.repeats,
            seed: self.bench.seed,
        }
    }

    /// Every key with its current value, in a form [`parse`](Self::parse) accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.preprocess;
        let _ = writeln!(s, "# preprocessing");
        let _ = writeln!(s, "median_window_s = {}", p.median_window_s);
        let _ = writeln!(s, "bp_low_hz = {}", p.bp_low_hz);
        let _ = writeln!(s, "bp_high_hz = {}", p.bp_high_hz);
        let _ = writeln!(s, "target_fs_hz = {}", p.target_fs_hz);
        let _ = writeln!(s, "target_len = {}", p.target_len);
        let _ = writeln!(s, "spec_window = {}", p.spec_window);
        let _ = writeln!(s, "spec_hop = {}", p.spec_hop);

        let a = &self.augment;
        let _ = writeln!(s, "\n# augmentation (lengths are fractions of the signal)");
        for k in OpKind::ALL {
            let _ = writeln!(s, "aug.{}.prob = {}", k.name(), a.prob_of(k));
        }
        let ranges = [
            ("drop.rate", a.drop_rate),
            ("mask.len", a.mask_len),
            ("shift.len", a.shift),
            ("sine.amp", a.sine_amp),
            ("sine.freq_hz", a.sine_freq_hz),
            ("bandpass.low_hz", a.bandpass_low_hz),
            ("bandpass.high_hz", a.bandpass_high_hz),
            ("cutmix.len", a.cutmix_len),
            ("noise.snr_db", a.noise_snr_db),
        ];
        for (name, (lo, hi)) in ranges {
            let _ = writeln!(s, "aug.{name}_min = {lo}");
            let _ = writeln!(s, "aug.{name}_max = {hi}");
        }
        let _ = writeln!(s, "aug.flip.p = {}", a.flip_p);
        let _ = writeln!(s, "aug.max_ops = {}", a.max_ops);

        let _ = writeln!(s, "\n# model");
        for line in self.model.to_kv().lines() {
            if let Some((k, v)) = line.split_once('=') {
                if !DERIVED_MODEL_KEYS.contains(&k) {
                    let _ = writeln!(s, "model.{k} = {v}");
                }
            }
        }

        let t = &self.train;
        let _ = writeln!(s, "\n# training");
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.learning_rate = {}", t.learning_rate);
        let _ = writeln!(s, "train.beta1 = {}", t.beta1);
        let _ = writeln!(s, "train.beta2 = {}", t.beta2);
        let _ = writeln!(s, "train.eps = {}", t.eps);
        let _ = writeln!(s, "train.weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "train.augment = {}", if t.augment { "on" } else { "off" });
        let _ = writeln!(s, "train.balance = {}", t.balance.as_str());
        let _ = writeln!(s, "train.smote_k = {}", t.smote_k);
        let _ = writeln!(s, "train.gaussian_sigma = {}", t.gaussian_sigma);
        let _ = writeln!(s, "train.seed = {}", t.seed);

        let _ = writeln!(s, "\n# test-time augmentation (policy from aug.*, CutMix excluded)");
        let _ = writeln!(s, "tta.n_runs = {}", self.tta.n_runs);
        let _ = writeln!(s, "tta.aggregation = {}", self.tta.aggregation.as_str());
        let _ = writeln!(s, "tta.seed = {}", self.tta.seed);
        let _ = writeln!(s, "tta.noise_mu = {}", self.tta.noise.mu);
        let _ = writeln!(s, "tta.noise_sigma = {}", self.tta.noise.sigma);

        let b = &self.bench;
        let _ = writeln!(s, "\n# benchmarks");
        let _ = writeln!(s, "bench.repeats = {}", b.repeats);
        let _ = writeln!(s, "bench.seed = {}", b.seed);
        let _ = writeln!(s, "bench.drop_grid = {}", fmt_list(&b.drop_grid));
        let _ = writeln!(s, "bench.mask_grid = {}", fmt_list(&b.mask_grid));
        let _ = writeln!(s, "bench.snr_grid = {}", fmt_list(&b.snr_grid));
        let _ = writeln!(s, "bench.tta_grid = {}", fmt_list(&b.tta_grid));
        s
    }
}
