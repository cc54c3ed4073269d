//! Command-line front end: argument parsing, layered configuration and the
//! four commands. `main.rs` only forwards to [`main`].
//!
//! Configuration precedence is flag > config file > built-in default. Config
//! files are TOML with flat keys (dataset scene options sit in a `[scene]`
//! table). The effective configuration is written next to every output.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dataset::{generate_corpus, DatasetConfig, Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{Checkpoint, ModelConfig};
use crate::training::{evaluate_model, train, Ablation, TrainConfig};
use crate::wav::{match_level, read_wav_8k, write_wav};

#[derive(Debug, Parser)]
#[command(name = "tse", version, about = "Two-stage target speaker extraction")]
pub struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a reverberant two-speaker corpus with a manifest.
    GenDataset(GenArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Extract the reference speaker from one mixture.
    Extract(ExtractArgs),
    /// Extract every scene of a split and report metrics.
    Evaluate(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory for audio and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with dataset settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for speakers, rooms and mixing.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of training scenes.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Number of validation scenes.
    #[arg(long)]
    pub n_valid: Option<usize>,
    /// Number of test scenes.
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Speech corpus laid out as DIR/<speaker>/*.wav.
    #[arg(long)]
    pub corpus_dir: Option<PathBuf>,
    /// Directory of noise recordings.
    #[arg(long)]
    pub noise_dir: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory (or manifest file).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for the log, checkpoints and effective config.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model size preset: default, desk or micro.
    #[arg(long)]
    pub model: Option<String>,
    /// Loss/iteration variant: cfg1, cfg2, cfg3 or cfg4.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Total optimizer updates.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Extraction examples per batch (even: each mixture with both references).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed for initialization and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// First step at which the triplet term is applied.
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    /// Worker threads for scoring.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Continue from OUT/last.ckpt if present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// 8 kHz mono mixture WAV.
    #[arg(long)]
    pub mixture: PathBuf,
    /// Enrollment utterance of the speaker to extract.
    #[arg(long)]
    pub reference: PathBuf,
    /// Directory for stage1.wav, stage2.wav and extract.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory (or manifest file).
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for estimates and metric reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Split to evaluate: train, valid or test.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Exit nonzero if any scene fails.
    #[arg(long)]
    pub strict: bool,
    /// CSV with `scene_id,pesq` columns from an external PESQ tool.
    #[arg(long)]
    pub pesq_csv: Option<PathBuf>,
}

pub const DATASET_CONFIG_FILE: &str = "dataset_config.toml";
pub const TRAIN_CONFIG_FILE: &str = "train_config.toml";
pub const EXTRACT_SIDECAR: &str = "extract.json";
pub const STAGE1_WAV: &str = "stage1.wav";
pub const STAGE2_WAV: &str = "stage2.wav";

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn read_table(path: Option<&Path>) -> Result<toml::Table> {
    match path {
        None => Ok(toml::Table::new()),
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingFile(p.to_path_buf()));
            }
            fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| config_err(format!("{}: {e}", p.display())))
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Default, then file, then flags; unknown keys are errors.
pub fn layered<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, flags: toml::Table) -> Result<T> {
    let mut table = toml::Table::try_from(T::default()).map_err(config_err)?;
    merge(&mut table, read_table(file)?);
    merge(&mut table, flags);
    table.try_into().map_err(config_err)
}

fn flag<T: Into<toml::Value>>(t: &mut toml::Table, key: &str, v: Option<T>) {
    if let Some(v) = v {
        t.insert(key.to_string(), v.into());
    }
}

fn path_value(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn u64_value(v: Option<u64>) -> Result<Option<i64>> {
    v.map(|v| i64::try_from(v).map_err(|_| config_err(format!("{v} is out of range"))))
        .transpose()
}

fn dump<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, toml::to_string(value).map_err(config_err)?)?;
    Ok(())
}

pub fn dataset_config(args: &GenArgs) -> Result<DatasetConfig> {
    let mut f = toml::Table::new();
    flag(&mut f, "seed", u64_value(args.seed)?);
    flag(&mut f, "n_train", args.n_train.map(|v| v as i64));
    flag(&mut f, "n_valid", args.n_valid.map(|v| v as i64));
    flag(&mut f, "n_test", args.n_test.map(|v| v as i64));
    flag(&mut f, "corpus_dir", path_value(&args.corpus_dir));
    flag(&mut f, "noise_dir", path_value(&args.noise_dir));
    flag(&mut f, "workers", args.workers.map(|v| v as i64));
    layered(args.config.as_deref(), f)
}

/// Effective training setup: the model preset plus the trainer settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSetup {
    pub model: String,
    #[serde(flatten)]
    pub train: TrainConfig,
}

pub fn train_setup(args: &TrainArgs) -> Result<TrainSetup> {
    let mut file = read_table(args.config.as_deref())?;
    let file_model = match file.remove("model") {
        Some(toml::Value::String(s)) => Some(s),
        Some(other) => return Err(config_err(format!("model must be a preset name, got {other}"))),
        None => None,
    };
    let model = args.model.clone().or(file_model).unwrap_or_else(|| "desk".to_string());
    ModelConfig::preset(&model)?;
    let mut f = toml::Table::new();
    flag(&mut f, "ablation", args.ablation.map(|a| a.to_string()));
    flag(&mut f, "max_steps", u64_value(args.max_steps)?);
    flag(&mut f, "batch_size", args.batch_size.map(|v| v as i64));
    flag(&mut f, "lr", args.lr);
    flag(&mut f, "seed", u64_value(args.seed)?);
    flag(&mut f, "warmup_steps", u64_value(args.warmup_steps)?);
    flag(&mut f, "workers", args.workers.map(|v| v as i64));
    let mut table = toml::Table::try_from(TrainConfig::default()).map_err(config_err)?;
    merge(&mut table, file);
    merge(&mut table, f);
    let train: TrainConfig = table.try_into().map_err(config_err)?;
    train.validate()?;
    Ok(TrainSetup { model, train })
}

fn run_gen(args: &GenArgs) -> Result<()> {
    let cfg = dataset_config(args)?;
    dump(&args.out.join(DATASET_CONFIG_FILE), &cfg)?;
    let t0 = Instant::now();
    let manifest = generate_corpus(&cfg, &args.out)?;
    log::info!(
        "wrote {} scenes to {} in {:.1} s",
        manifest.records.len(),
        args.out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let setup = train_setup(args)?;
    let manifest = Manifest::load(&args.data)?;
    dump(&args.out.join(TRAIN_CONFIG_FILE), &setup)?;
    let outcome = train(ModelConfig::preset(&setup.model)?, setup.train, &manifest, &args.out, args.resume)?;
    log::info!(
        "trained to step {} in {:.1} s; checkpoint {}",
        outcome.steps,
        outcome.seconds,
        outcome.last_checkpoint.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ExtractSidecar<'a> {
    checkpoint: String,
    checkpoint_step: u64,
    mixture: String,
    reference: String,
    model: &'a ModelConfig,
    duration_secs: f64,
    load_secs: f64,
    inference_secs: f64,
    real_time_factor: f64,
}

fn run_extract(args: &ExtractArgs) -> Result<()> {
    let t0 = Instant::now();
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mixture = read_wav_8k(&args.mixture)?;
    let reference = read_wav_8k(&args.reference)?;
    let load_secs = t0.elapsed().as_secs_f64();
    let (out, secs) = ck.model.extract_timed(&mixture, &reference)?;
    fs::create_dir_all(&args.out)?;
    write_wav(&args.out.join(STAGE1_WAV), &match_level(&out.stage1_waveform()?, &mixture))?;
    write_wav(&args.out.join(STAGE2_WAV), &match_level(&out.stage2_waveform()?, &mixture))?;
    let sidecar = ExtractSidecar {
        checkpoint: args.checkpoint.display().to_string(),
        checkpoint_step: ck.step,
        mixture: args.mixture.display().to_string(),
        reference: args.reference.display().to_string(),
        model: &ck.model.config,
        duration_secs: mixture.duration_secs(),
        load_secs,
        inference_secs: secs,
        real_time_factor: secs / mixture.duration_secs(),
    };
    fs::write(args.out.join(EXTRACT_SIDECAR), serde_json::to_string_pretty(&sidecar)?)?;
    log::info!("extracted {:.2} s of audio in {secs:.2} s", mixture.duration_secs());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalSetup<'a> {
    checkpoint: String,
    checkpoint_step: u64,
    data: String,
    split: Split,
    workers: usize,
    strict: bool,
    pesq_csv: Option<String>,
    model: &'a ModelConfig,
}

/// Runs `evaluate` and returns the report; failed scenes under `--strict`
/// are an error.
pub fn run_evaluate(args: &EvalArgs) -> Result<MetricReport> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let manifest = Manifest::load(&args.data)?;
    let scenes = manifest.load_split(args.split)?;
    if scenes.is_empty() {
        return Err(Error::Corpus(format!("split '{}' has no scenes", args.split.as_str())));
    }
    fs::create_dir_all(&args.out)?;
    let setup = EvalSetup {
        checkpoint: args.checkpoint.display().to_string(),
        checkpoint_step: ck.step,
        data: args.data.display().to_string(),
        split: args.split,
        workers: args.workers,
        strict: args.strict,
        pesq_csv: path_value(&args.pesq_csv),
        model: &ck.model.config,
    };
    fs::write(args.out.join("eval_config.json"), serde_json::to_string_pretty(&setup)?)?;
    let mut report = evaluate_model(&ck.model, &scenes, args.workers, Some(&args.out.join("estimates")))?;
    if let Some(p) = &args.pesq_csv {
        report.attach_pesq(p)?;
    }
    report.write_csv(&args.out.join("metrics.csv"))?;
    fs::write(args.out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    let table = report.table();
    fs::write(args.out.join("metrics.txt"), &table)?;
    print!("{table}");
    if args.strict && !report.failed.is_empty() {
        return Err(Error::Corpus(format!(
            "{} scene(s) failed: {}",
            report.failed.len(),
            report.failed.iter().map(|f| f.scene_id.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(report)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenDataset(a) => run_gen(a),
        Command::Train(a) => run_train(a),
        Command::Extract(a) => run_extract(a),
        Command::Evaluate(a) => run_evaluate(a).map(|_| ()),
    }
}

/// Parses `args` (program name first), runs the command, and returns the
/// exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    main_with(std::env::args_os())
}

#[cfg(test)]
mod tests;
