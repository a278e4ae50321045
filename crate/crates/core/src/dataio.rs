//! Record storage, manifests, corpus ingestion and the synthetic
//! two-domain ECG generator.
//!
//! Signal file layout (all little-endian):
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `ECG1`               |
//! | 4      | 4    | u32 sample count           |
//! | 8      | 4    | u32 sampling rate (Hz)     |
//! | 12     | 4    | u32 reserved, zero         |
//! | 16     | 4·n  | IEEE-754 binary32 samples  |
//!
//! Samples are stored as binary32, so the round trip is exact for any record
//! whose samples are representable in single precision. Everything this crate
//! generates is rounded to single precision before it is returned.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::types::{EcgRecord, Label};

pub const SIGNAL_MAGIC: &[u8; 4] = b"ECG1";
pub const HEADER_LEN: usize = 16;
pub const RECORD_EXT: &str = "ecg";

// ---------------------------------------------------------------------------
// Signal files

pub fn encode_record(record: &EcgRecord) -> Result<Vec<u8>> {
    record.validate()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * record.len());
    buf.extend_from_slice(SIGNAL_MAGIC);
    buf.extend_from_slice(&(record.len() as u32).to_le_bytes());
    buf.extend_from_slice(&record.fs_hz.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for (i, &v) in record.samples.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidRecord(format!(
                "{}: sample {i} ({v}) is not representable as binary32",
                record.id
            )));
        }
        buf.extend_from_slice(&f.to_le_bytes());
    }
    Ok(buf)
}

pub fn write_record(record: &EcgRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_record(record)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decodes a signal file. The id is the file stem; the label is unset.
pub fn decode_record(bytes: &[u8], path: &Path) -> Result<EcgRecord> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, header needs {HEADER_LEN}", bytes.len()),
        });
    }
    if &bytes[..4] != SIGNAL_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "ECG1",
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let count = word(4) as usize;
    let fs_hz = word(8);
    if count == 0 {
        return Err(Error::Malformed {
            path: path.into(),
            detail: "zero sample count".into(),
        });
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < 4 * count {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("header declares {count} samples, payload holds {}", payload.len() / 4),
        });
    }
    let samples = payload[..4 * count]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let record = EcgRecord {
        id,
        samples,
        fs_hz,
        label: None,
    };
    record.validate().map_err(|e| Error::Malformed {
        path: path.into(),
        detail: e.to_string(),
    })?;
    Ok(record)
}

pub fn read_record(path: impl AsRef<Path>) -> Result<EcgRecord> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_record(&bytes, path)
}

/// Rounds every sample to the nearest binary32 value.
pub fn round_to_f32(samples: &mut [f64]) {
    for v in samples {
        *v = *v as f32 as f64;
    }
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: Label,
    pub fs_hz: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn histogram(&self) -> BTreeMap<Label, usize> {
        histogram(self.entries.iter().map(|e| e.label))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "path", "label", "fs_hz"])?;
        for e in &self.entries {
            w.write_record([
                e.id.as_str(),
                &e.path.to_string_lossy(),
                &e.label.code().to_string(),
                &e.fs_hz.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parses a manifest without touching the signal files.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "path", "label", "fs_hz"] {
            return Err(Error::Malformed {
                path: path.into(),
                detail: format!("manifest header must be id,path,label,fs_hz, got {:?}", headers),
            });
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for row in r.records() {
            let row = row?;
            let id = row[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::Malformed {
                    path: path.into(),
                    detail: format!("duplicate id {id}"),
                });
            }
            let fs_hz: u32 = row[3].trim().parse().map_err(|_| Error::Malformed {
                path: path.into(),
                detail: format!("record {id}: bad fs_hz {:?}", &row[3]),
            })?;
            if fs_hz == 0 {
                return Err(Error::Malformed {
                    path: path.into(),
                    detail: format!("record {id}: fs_hz must be positive"),
                });
            }
            entries.push(ManifestEntry {
                label: Label::from_code(&row[2])?,
                path: PathBuf::from(&row[1]),
                id,
                fs_hz,
            });
        }
        Ok(Self { entries })
    }
}

pub fn histogram(labels: impl IntoIterator<Item = Label>) -> BTreeMap<Label, usize> {
    let mut h = BTreeMap::new();
    for l in labels {
        *h.entry(l).or_insert(0) += 1;
    }
    h
}

/// Renders a histogram as `{N:40, A:10}`.
pub fn format_histogram(h: &BTreeMap<Label, usize>) -> String {
    let parts: Vec<String> = h.iter().map(|(l, n)| format!("{}:{n}", l.code())).collect();
    format!("{{{}}}", parts.join(", "))
}

/// Loads a manifest and every record it lists, in manifest order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Manifest, Vec<EcgRecord>)> {
    let path = path.as_ref();
    let manifest = Manifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let file = base.join(&e.path);
        if !file.is_file() {
            return Err(Error::MissingFile {
                id: e.id.clone(),
                path: file,
            });
        }
        let mut rec = read_record(&file)?;
        if rec.fs_hz != e.fs_hz {
            return Err(Error::SampleRateMismatch {
                id: e.id.clone(),
                manifest: e.fs_hz,
                header: rec.fs_hz,
            });
        }
        rec.id = e.id.clone();
        rec.label = Some(e.label);
        records.push(rec);
    }
    Ok((manifest, records))
}

// ---------------------------------------------------------------------------
// External corpus ingestion

/// Converts a directory of text sample files (`<id>.txt` or `<id>.csv`,
/// numbers separated by whitespace or commas, 300 Hz) plus a reference CSV of
/// `id,label` rows into signal files and a manifest under `out_dir`.
pub fn ingest_physionet(dir: impl AsRef<Path>, reference_csv: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    const FS_HZ: u32 = 300;
    let (dir, reference_csv, out_dir) = (dir.as_ref(), reference_csv.as_ref(), out_dir.as_ref());

    let file = fs::File::open(reference_csv).map_err(|e| Error::io(reference_csv, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let mut reference = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() < 2 {
            return Err(Error::Malformed {
                path: reference_csv.into(),
                detail: format!("expected id,label, got {:?}", row),
            });
        }
        let id = row[0].trim().to_string();
        let label = Label::from_code(row[1].trim())?;
        reference.push((id, label));
    }
    let listed: HashSet<&str> = reference.iter().map(|(id, _)| id.as_str()).collect();

    let mut found = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_sample = matches!(path.extension().and_then(|e| e.to_str()), Some("txt" | "csv"));
        if !is_sample || path == reference_csv {
            continue;
        }
        let Some(stem) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
            continue;
        };
        if stem.eq_ignore_ascii_case("reference") {
            continue;
        }
        if !listed.contains(stem.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "record {stem} has no entry in {}",
                reference_csv.display()
            )));
        }
        found.insert(stem, path);
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = Manifest::default();
    for (id, label) in reference {
        let Some(src) = found.get(&id) else {
            return Err(Error::MissingFile {
                id: id.clone(),
                path: dir.join(format!("{id}.txt")),
            });
        };
        let text = fs::read_to_string(src).map_err(|e| Error::io(src, e))?;
        let samples = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Malformed {
                path: src.clone(),
                detail: format!("record {id}: {e}"),
            })?;
        let record = EcgRecord::new(id.clone(), samples, FS_HZ, Some(label))?;
        let rel = PathBuf::from(format!("{id}.{RECORD_EXT}"));
        write_record(&record, out_dir.join(&rel))?;
        manifest.entries.push(ManifestEntry {
            id,
            path: rel,
            label,
            fs_hz: FS_HZ,
        });
    }
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::InvalidArgument(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub n_af: usize,
    pub fs_hz: u32,
    pub duration_s: f64,
    pub domain: Domain,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(100..=1000).contains(&self.fs_hz) {
            return Err(Error::InvalidArgument(format!(
                "fs_hz {} outside 100..=1000",
                self.fs_hz
            )));
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::InvalidArgument("duration_s must be positive".into()));
        }
        Ok(())
    }
}

/// Generator output: the record plus the ground truth kept for oracle tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub record: EcgRecord,
    /// Waveform before acquisition noise (includes amplitude scaling and
    /// baseline wander in the target domain).
    pub clean: Vec<f64>,
    /// R-peak times in seconds.
    pub beat_times: Vec<f64>,
    /// Number of rendered P bumps.
    pub p_waves: usize,
}

/// One Gaussian bump of the PQRST template, relative to the R peak.
struct Bump {
    offset_s: f64,
    amp_mv: f64,
    width_s: f64,
}

const P_WAVE: Bump = Bump { offset_s: -0.20, amp_mv: 0.15, width_s: 0.025 };
const QRST: [Bump; 4] = [
    Bump { offset_s: -0.035, amp_mv: -0.12, width_s: 0.010 },
    Bump { offset_s: 0.0, amp_mv: 1.00, width_s: 0.012 },
    Bump { offset_s: 0.035, amp_mv: -0.25, width_s: 0.010 },
    Bump { offset_s: 0.28, amp_mv: 0.30, width_s: 0.045 },
];

pub const NORMAL_RR_MEAN_S: f64 = 0.8;
pub const NORMAL_RR_STD_S: f64 = 0.02;
pub const AF_RR_RANGE_S: (f64, f64) = (0.4, 1.2);
pub const TARGET_SNR_DB: f64 = 15.0;

fn render_bump(out: &mut [f64], fs: f64, center_s: f64, bump: &Bump) {
    let reach = 5.0 * bump.width_s;
    let lo = (((center_s - reach) * fs).floor().max(0.0)) as usize;
    let hi = (((center_s + reach) * fs).ceil().max(0.0) as usize).min(out.len());
    let denom = 2.0 * bump.width_s * bump.width_s;
    for (i, v) in out.iter_mut().enumerate().take(hi).skip(lo) {
        let dt = i as f64 / fs - center_s;
        *v += bump.amp_mv * (-(dt * dt) / denom).exp();
    }
}

/// Generates record `index` of a dataset. Records `0..n_normal` are Normal,
/// the rest AF; each draws from its own substream of `cfg.seed`.
pub fn synth_record(cfg: &SynthConfig, index: usize) -> SynthRecord {
    let label = if index < cfg.n_normal { Label::Normal } else { Label::AF };
    let mut rng = SplitMix64::substream(cfg.seed, index as u64);
    let fs = cfg.fs_hz as f64;
    let n = ((cfg.duration_s * fs).round() as usize).max(1);
    let duration = n as f64 / fs;

    let mut beat_times = Vec::new();
    let mut t = rng.uniform_range(0.1, 0.1 + NORMAL_RR_MEAN_S);
    while t < duration {
        beat_times.push(t);
        let rr = match label {
            Label::AF => rng.uniform_range(AF_RR_RANGE_S.0, AF_RR_RANGE_S.1),
            _ => (NORMAL_RR_MEAN_S + NORMAL_RR_STD_S * rng.normal()).max(0.3),
        };
        t += rr;
    }

    let mut clean = vec![0.0; n];
    let mut p_waves = 0;
    for &tb in &beat_times {
        if label != Label::AF {
            render_bump(&mut clean, fs, tb + P_WAVE.offset_s, &P_WAVE);
            p_waves += 1;
        }
        for bump in &QRST {
            render_bump(&mut clean, fs, tb + bump.offset_s, bump);
        }
    }

    let samples = match cfg.domain {
        Domain::Source => {
            round_to_f32(&mut clean);
            clean.clone()
        }
        Domain::Target => {
            let scale = rng.uniform_range(0.5, 1.5);
            let wander_hz = rng.uniform_range(0.2, 0.5);
            let wander_amp = rng.uniform_range(0.1, 0.5);
            let wander_phase = rng.uniform_range(0.0, TAU);
            for (i, v) in clean.iter_mut().enumerate() {
                let t = i as f64 / fs;
                *v = scale * *v + wander_amp * (TAU * wander_hz * t + wander_phase).sin();
            }
            round_to_f32(&mut clean);
            let sigma = (zero_mean_power(&clean) / 10f64.powf(TARGET_SNR_DB / 10.0)).sqrt();
            let mut noisy: Vec<f64> = clean.iter().map(|v| v + sigma * rng.normal()).collect();
            round_to_f32(&mut noisy);
            noisy
        }
    };

    let prefix = match cfg.domain {
        Domain::Source => "src",
        Domain::Target => "tgt",
    };
    SynthRecord {
        record: EcgRecord {
            id: format!("{prefix}_{:05}", index),
            samples,
            fs_hz: cfg.fs_hz,
            label: Some(label),
        },
        clean,
        beat_times,
        p_waves,
    }
}

/// Mean square after removing the mean.
pub fn zero_mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64
}

pub fn synth_dataset_full(cfg: &SynthConfig) -> Result<Vec<SynthRecord>> {
    use rayon::prelude::*;
    cfg.validate()?;
    Ok((0..cfg.n_normal + cfg.n_af)
        .into_par_iter()
        .map(|i| synth_record(cfg, i))
        .collect())
}

pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<EcgRecord>> {
    Ok(synth_dataset_full(cfg)?.into_iter().map(|s| s.record).collect())
}

/// Writes a synthetic dataset to `dir`: one signal file per record, the
/// `<id>.clean` / `<id>.truth.csv` sidecars and `manifest.csv`.
pub fn write_synth_dataset(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for s in synth_dataset_full(cfg)? {
        let id = s.record.id.clone();
        let rel = PathBuf::from(format!("{id}.{RECORD_EXT}"));
        write_record(&s.record, dir.join(&rel))?;
        write_record(&s.record.with_samples(s.clean.clone()), dir.join(format!("{id}.clean")))?;
        let truth_path = dir.join(format!("{id}.truth.csv"));
        let mut truth = String::from("beat_time_s\n");
        for t in &s.beat_times {
            truth.push_str(&format!("{t}\n"));
        }
        fs::File::create(&truth_path)
            .and_then(|mut f| f.write_all(truth.as_bytes()))
            .map_err(|e| Error::io(&truth_path, e))?;
        manifest.entries.push(ManifestEntry {
            id,
            path: rel,
            label: s.record.label.expect("synthetic records are labelled"),
            fs_hz: cfg.fs_hz,
        });
    }
    manifest.write(dir.join("manifest.csv"))?;
    Ok(manifest)
}
