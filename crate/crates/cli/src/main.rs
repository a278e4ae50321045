use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use ecg_tta::bench::{self, SweepKind};
use ecg_tta::config::GlobalConfig;
use ecg_tta::dataio::{self, format_histogram, Domain, SynthConfig};
use ecg_tta::model::{self, Balance};
use ecg_tta::preprocess::{preprocess, PreprocessConfig};
use ecg_tta::rng::{substream_seed, SplitMix64};
use ecg_tta::tta::{predict_plain, tta_predict_prepared, TtaConfig};
use ecg_tta::types::evaluate;
use ecg_tta::{EcgRecord, Label, Mode, ProbVector};

/// Seed key of the per-record training crop stream, kept apart from the
/// trainer's own substreams.
const TRAIN_CROP_STREAM: u64 = u64::MAX;

#[derive(Parser)]
#[command(name = "ecg-tta", version, about = "Test-time augmentation for single-lead ECG AF detection")]
struct Cli {
    /// Worker threads (default: ECG_TTA_THREADS, else all cores). Outputs do
    /// not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Convert a directory of text records plus a reference CSV.
    Ingest(IngestArgs),
    /// Preprocess, balance and train a model.
    Train(TrainArgs),
    /// Evaluate a model, plainly or with TTA.
    Eval(EvalArgs),
    /// Robustness sweeps and the TTA convergence curve.
    Sweep(SweepArgs),
    /// Print every configuration key with its default.
    Config,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    n_normal: usize,
    #[arg(long, default_value_t = 40)]
    n_af: usize,
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u32).range(100..=1000))]
    fs: u32,
    #[arg(long, default_value_t = 30.0, value_parser = positive_f64)]
    duration_s: f64,
    #[arg(long, value_enum, default_value_t = DomainArg::Source)]
    domain: DomainArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of `<id>.txt` / `<id>.csv` sample files.
    #[arg(long)]
    dir: PathBuf,
    /// `id,label` rows.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    augment: Option<Switch>,
    #[arg(long, value_enum)]
    balance: Option<BalanceArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Monte Carlo runs per record; 0 is plain inference.
    #[arg(long, default_value_t = 0)]
    tta: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "predictions.csv")]
    predictions: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum BalanceArg {
    None,
    Smote,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Drop,
    Mask,
    Snr,
    Ttacurve,
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

/// Error that maps to the usage exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(path: Option<&Path>) -> Result<GlobalConfig> {
    match path {
        None => Ok(GlobalConfig::default()),
        Some(p) => GlobalConfig::from_file(p).map_err(|e| match e {
            ecg_tta::Error::Config(_) | ecg_tta::Error::InvalidArgument(_) => Usage(e.to_string()).into(),
            other => anyhow::Error::new(other),
        }),
    }
}

fn load_prepared(manifest: &Path, pre: &PreprocessConfig, mode: Mode, seed: u64) -> Result<Vec<EcgRecord>> {
    let (_, raw) = dataio::load_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let prepared = raw
        .par_iter()
        .enumerate()
        .map(|(i, r)| preprocess(r, pre, mode, &mut SplitMix64::substream(seed, i as u64)))
        .collect::<ecg_tta::Result<Vec<_>>>()?;
    Ok(prepared)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_normal: a.n_normal,
        n_af: a.n_af,
        fs_hz: a.fs,
        duration_s: a.duration_s,
        domain: match a.domain {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        },
        seed: a.seed,
    };
    let manifest = dataio::write_synth_dataset(&cfg, &a.out)?;
    eprintln!("wrote {} records to {}", manifest.len(), a.out.display());
    println!("{}", format_histogram(&manifest.histogram()));
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let manifest = dataio::ingest_physionet(&a.dir, &a.reference, &a.out)?;
    eprintln!("ingested {} records into {}", manifest.len(), a.out.display());
    println!("{}", format_histogram(&manifest.histogram()));
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.augment {
        cfg.train.augment = matches!(s, Switch::On);
    }
    if let Some(b) = a.balance {
        cfg.train.balance = match b {
            BalanceArg::None => Balance::None,
            BalanceArg::Smote => Balance::Smote,
            BalanceArg::Gaussian => Balance::Gaussian,
        };
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let data = load_prepared(
        &a.manifest,
        &cfg.preprocess,
        Mode::Train,
        substream_seed(cfg.train.seed, TRAIN_CROP_STREAM),
    )?;
    eprintln!(
        "training on {} records {} (augment {}, balance {})",
        data.len(),
        format_histogram(&dataio::histogram(data.iter().filter_map(|r| r.label))),
        if cfg.train.augment { "on" } else { "off" },
        cfg.train.balance.as_str()
    );
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "epoch,loss,acc")?;
    let mut write_err = None;
    let outcome = model::train_with(
        &data,
        &cfg.model_config(),
        &cfg.train,
        &cfg.augment,
        &cfg.preprocess,
        |m| {
            if let Err(e) = writeln!(stdout, "{},{},{}", m.epoch, m.loss, m.accuracy) {
                write_err.get_or_insert(e);
            }
        },
    );
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let outcome = outcome?;
    eprintln!("class counts after balancing: {}", format_histogram(&outcome.class_counts));
    model::save_model(&outcome.model, &a.out)?;
    eprintln!(
        "saved {} parameters to {}",
        outcome.model.parameter_count(),
        a.out.display()
    );
    Ok(())
}

fn write_predictions(path: &Path, records: &[EcgRecord], preds: &[(Label, ProbVector)]) -> Result<()> {
    let mut out = String::from("id,true,pred,p_N,p_A,p_O,p_~\n");
    for (r, (label, p)) in records.iter().zip(preds) {
        let truth = r.label.map(|l| l.code().to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id,
            truth,
            label.code(),
            p.0[0],
            p.0[1],
            p.0[2],
            p.0[3]
        ));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.tta.seed = s;
    }
    let model = model::load_model(&a.model)?;
    let pre = &cfg.preprocess;
    let expected = ecg_tta::model::ModelConfig::for_preprocess(pre);
    if model.config().input_len != expected.input_len
        || (model.config().spec_frames, model.config().spec_bins) != (expected.spec_frames, expected.spec_bins)
    {
        bail!(
            "model expects {} samples and a {}x{} spectrogram; preprocessing yields {} and {}x{}",
            model.config().input_len,
            model.config().spec_frames,
            model.config().spec_bins,
            expected.input_len,
            expected.spec_frames,
            expected.spec_bins
        );
    }
    let records = load_prepared(&a.manifest, pre, Mode::Eval, 0)?;
    let preds: Vec<(Label, ProbVector)> = if a.tta == 0 {
        predict_plain(&model, &records, pre)?
            .into_iter()
            .map(|p| (p.argmax(), p))
            .collect()
    } else {
        let base = TtaConfig {
            n_runs: a.tta,
            ..cfg.tta_config()
        };
        records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let c = TtaConfig {
                    seed: bench::tta_record_seed(base.seed, 0, i),
                    ..base.clone()
                };
                tta_predict_prepared(&model, r, pre, &c).map(|s| (s.final_label, s.final_probs))
            })
            .collect::<ecg_tta::Result<_>>()?
    };
    write_predictions(&a.predictions, &records, &preds)?;
    eprintln!("wrote {} predictions to {}", preds.len(), a.predictions.display());
    let pairs: Vec<(Label, Label)> = records
        .iter()
        .zip(&preds)
        .filter_map(|(r, (p, _))| r.label.map(|t| (t, *p)))
        .collect();
    let m = evaluate(&pairs)?;
    println!("f1_af,{}", m.f1_af);
    println!("f1_macro,{}", m.f1_macro);
    println!("accuracy,{}", m.accuracy);
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(r) = a.repeats {
        if r == 0 {
            return Err(Usage("--repeats must be >= 1".into()).into());
        }
        cfg.bench.repeats = r;
    }
    if let Some(s) = a.seed {
        cfg.bench.seed = s;
    }
    let model = model::load_model(&a.model)?;
    let pre = &cfg.preprocess;
    let records = load_prepared(&a.manifest, pre, Mode::Eval, 0)?;
    let kind = match a.kind {
        KindArg::Drop => Some(SweepKind::Drop),
        KindArg::Mask => Some(SweepKind::Mask),
        KindArg::Snr => Some(SweepKind::Snr),
        KindArg::Ttacurve => None,
    };
    match kind {
        Some(kind) => {
            let res = bench::robustness_sweep(&model, &records, &cfg.sweep_config(kind), pre)?;
            bench::report(std::slice::from_ref(&res), &a.out)?;
            println!("kind,intensity,mean,std");
            for p in &res.points {
                println!("{},{},{},{}", kind.as_str(), p.intensity, p.mean, p.std);
            }
        }
        None => {
            let base = TtaConfig {
                seed: cfg.bench.seed,
                ..cfg.tta_config()
            };
            let curve = bench::tta_curve(&model, &records, &cfg.bench.tta_grid, cfg.bench.repeats, &base, pre)?;
            bench::report_tta_curve(&curve, &a.out)?;
            println!("n,mean_f1,std_f1");
            for r in &curve.rows {
                println!("{},{},{}", r.n, r.mean_f1, r.std_f1);
            }
        }
    }
    eprintln!("wrote results to {}", a.out.display());
    Ok(())
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(t) = flag {
        return Ok(Some(t));
    }
    match std::env::var("ECG_TTA_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Usage(format!("ECG_TTA_THREADS must be a number, got {v:?}")).into()),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = thread_count(cli.threads)? {
        if t == 0 {
            return Err(Usage("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Config => {
            print!("{}", GlobalConfig::default().to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
