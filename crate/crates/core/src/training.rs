//! Training loop: role-alternating batches, warm-up gated triplet loss,
//! ablation switches, checkpointing and bit-exact resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, Tensor, Var};
use crate::dataset::{crop, derive_seed, thread_pool, Manifest, Role, Scene, Split};
use crate::error::{Error, Result};
use crate::losses::{self, graph_extraction_loss, graph_role_mean, graph_triplet, LossConfig, StageOneTerms};
use crate::model::{stack_features, Checkpoint, Model, ModelConfig, MIN_FRAMES};
use crate::optim::{clip_grad_norm, Adam};
use crate::metrics::{estimate_path, EstimateStage, EvalItem, FailedScene, MetricReport};
use crate::signal::{stft, to_ri};
use crate::wav::{match_level, write_wav};

/// Seed streams, kept apart so batches never share randomness with anything else.
const STREAM_BATCH: u64 = 0x7261_696e;

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// The four model variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// One stage-one pass, no triplet loss.
    Cfg1,
    /// Iterated stage one, loss on the final stage-one output only.
    Cfg2,
    /// Iterated stage one, loss on every stage-one output.
    Cfg3,
    /// `Cfg3` plus the triplet loss.
    Cfg4,
}

impl Ablation {
    pub fn iterations(self, configured: usize) -> usize {
        match self {
            Ablation::Cfg1 => 1,
            _ => configured,
        }
    }

    pub fn terms(self) -> StageOneTerms {
        match self {
            Ablation::Cfg1 | Ablation::Cfg2 => StageOneTerms::Final,
            Ablation::Cfg3 | Ablation::Cfg4 => StageOneTerms::All,
        }
    }

    pub fn triplet(self) -> bool {
        self == Ablation::Cfg4
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = match self {
            Ablation::Cfg1 => 1,
            Ablation::Cfg2 => 2,
            Ablation::Cfg3 => 3,
            Ablation::Cfg4 => 4,
        };
        write!(f, "cfg{n}")
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cfg1" | "1" => Ok(Ablation::Cfg1),
            "cfg2" | "2" => Ok(Ablation::Cfg2),
            "cfg3" | "3" => Ok(Ablation::Cfg3),
            "cfg4" | "4" => Ok(Ablation::Cfg4),
            _ => Err(Error::Config(format!("unknown ablation mode '{s}' (cfg1..cfg4)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Even: every mixture appears once per reference role.
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub ablation: Ablation,
    pub warmup_steps: u64,
    pub alpha: f64,
    pub margin: f64,
    pub clip_norm: f64,
    /// Crop range in seconds; each batch draws one length from it. `None`
    /// (an empty list in config files) trains on whole scenes cut to the
    /// shortest one in the batch.
    #[serde(with = "crop_range")]
    pub crop_secs: Option<(f64, f64)>,
    /// 0 disables periodic checkpoints (a final one is always written).
    pub checkpoint_interval: u64,
    /// 0 disables validation.
    pub valid_interval: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 6,
            max_steps: 2000,
            seed: 0,
            ablation: Ablation::Cfg4,
            warmup_steps: 200,
            alpha: 2.0,
            margin: 0.5,
            clip_norm: 5.0,
            crop_secs: Some((2.0, 5.0)),
            checkpoint_interval: 500,
            valid_interval: 500,
            workers: 1,
        }
    }
}

mod crop_range {
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<(f64, f64)>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some((lo, hi)) => [*lo, *hi].serialize(s),
            None => Vec::<f64>::new().serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<(f64, f64)>, D::Error> {
        match Vec::<f64>::deserialize(d)?.as_slice() {
            [] => Ok(None),
            [lo, hi] => Ok(Some((*lo, *hi))),
            other => Err(D::Error::custom(format!("crop_secs needs [] or [min, max], got {other:?}"))),
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            margin: self.margin,
            warmup_steps: self.warmup_steps,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return bad("batch_size must be a positive even number");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if let Some((lo, hi)) = self.crop_secs {
            if !(lo > 0.0 && hi >= lo) {
                return bad("crop_secs must satisfy 0 < min <= max");
            }
        }
        self.loss_config().validate()
    }
}

/// One training batch: `batch_size / 2` mixtures, each at rows `2j`
/// (desired-speaker reference) and `2j + 1` (interference reference).
#[derive(Debug, Clone)]
pub struct Batch {
    pub mixture: Tensor,
    pub reference: Tensor,
    /// Reverberant targets `[B, T]`.
    pub reverberant: Tensor,
    /// Dry targets `[B, T]`.
    pub dry: Tensor,
    pub scene_ids: Vec<String>,
    pub seed: u64,
    pub len: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.reverberant.shape()[0]
    }

    /// Builds a batch from already aligned, equal-length scenes.
    pub fn from_scenes(scenes: &[Scene], model: &ModelConfig, seed: u64) -> Result<Self> {
        let len = scenes.first().map(Scene::len).unwrap_or(0);
        if scenes.iter().any(|s| s.len() != len) {
            return Err(Error::invalid("batch scenes differ in length"));
        }
        if len < model.stft.min_len_for_frames(MIN_FRAMES) {
            return Err(Error::TooShort {
                len,
                min: model.stft.min_len_for_frames(MIN_FRAMES),
            });
        }
        let b = 2 * scenes.len();
        let mut mix = Vec::with_capacity(b);
        let mut refs = Vec::with_capacity(b);
        let mut rev = Array2::zeros((b, len));
        let mut dry = Array2::zeros((b, len));
        for (j, s) in scenes.iter().enumerate() {
            let m = to_ri(&stft(&s.mixture, &model.stft)?).planes;
            for (r, role) in [Role::Desired, Role::Interference].into_iter().enumerate() {
                let ex = s.example(role);
                let row = 2 * j + r;
                mix.push(m.clone());
                refs.push(to_ri(&stft(ex.reference, &model.stft)?).planes);
                rev.row_mut(row).assign(&ndarray::ArrayView1::from(ex.reverberant_target.samples()));
                dry.row_mut(row).assign(&ndarray::ArrayView1::from(ex.dry_target.samples()));
            }
        }
        Ok(Self {
            mixture: stack_features(&mix.iter().collect::<Vec<_>>())?,
            reference: stack_features(&refs.iter().collect::<Vec<_>>())?,
            reverberant: rev.into_dyn(),
            dry: dry.into_dyn(),
            scene_ids: scenes.iter().map(|s| s.id.clone()).collect(),
            seed,
            len,
        })
    }
}

/// Seed of the batch drawn at `step`.
pub fn batch_seed(cfg: &TrainConfig, step: u64) -> u64 {
    derive_seed(cfg.seed, STREAM_BATCH, step)
}

/// Draws the batch for `step`: scenes without replacement where possible,
/// one crop length for the whole batch, an independent offset per scene.
pub fn make_batch(scenes: &[Scene], cfg: &TrainConfig, model: &ModelConfig, step: u64) -> Result<Batch> {
    if scenes.is_empty() {
        return Err(Error::Corpus("no training scenes".into()));
    }
    let seed = batch_seed(cfg, step);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.batch_size / 2;
    let picks: Vec<usize> = if n <= scenes.len() {
        sample(&mut rng, scenes.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..scenes.len())).collect()
    };
    let shortest = picks.iter().map(|&i| scenes[i].len()).min().unwrap();
    let len = match cfg.crop_secs {
        Some((lo, hi)) => {
            let sr = scenes[picks[0]].sample_rate() as f64;
            let lo = ((lo * sr).round() as usize).min(shortest);
            let hi = ((hi * sr).round() as usize).clamp(lo, shortest);
            rng.gen_range(lo..=hi)
        }
        None => shortest,
    };
    let cropped = picks
        .iter()
        .map(|&i| {
            let s = &scenes[i];
            let start = if cfg.crop_secs.is_some() { rng.gen_range(0..=s.len() - len) } else { 0 };
            crop(s, start, len)
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::from_scenes(&cropped, model, seed)
}

/// Loss terms of one batch, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub extraction_d: f64,
    pub extraction_i: f64,
    /// Raw triplet hinge means per role, when the ablation uses it.
    pub triplet: Option<(f64, f64)>,
    /// `alpha * gate * (T_d + T_i) / 2`; zero before warm-up.
    pub triplet_contribution: f64,
    /// Batch mean SI-SDR of the final stage-one output against the reverberant target.
    pub stage1_si_sdr: f64,
    /// Batch mean SI-SDR of the stage-two output against the dry target.
    pub stage2_si_sdr: f64,
}

fn role_means(v: &Tensor) -> (f64, f64) {
    let v: Vec<f64> = v.iter().copied().collect();
    let d = v.iter().step_by(2).sum::<f64>() / (v.len() / 2) as f64;
    let i = v.iter().skip(1).step_by(2).sum::<f64>() / (v.len() / 2) as f64;
    (d, i)
}

fn batch_mean_si_sdr(g: &Graph, target: &Tensor, est: Var) -> Result<f64> {
    let est = g.value(est);
    let mut acc = 0.0;
    for (t, e) in target.outer_iter().zip(est.outer_iter()) {
        acc += losses::si_sdr(t.as_slice().unwrap(), &e.iter().copied().collect::<Vec<_>>())?;
    }
    Ok(acc / target.shape()[0] as f64)
}

/// Builds the total loss of `batch` on `g` and returns it with its parts.
pub fn batch_loss(g: &Graph, model: &Model, batch: &Batch, cfg: &TrainConfig, step: u64) -> Result<(Var, LossBreakdown)> {
    let lc = cfg.loss_config();
    let stft = model.config.stft;
    let iterations = cfg.ablation.iterations(model.config.n_iterations);
    let x = g.input(batch.mixture.clone());
    let r = g.input(batch.reference.clone());
    let out = model.forward_with(g, x, r, iterations)?;
    let wav1: Vec<Var> = out.stage1.iter().map(|&s| g.istft(s, stft, batch.len)).collect();
    let wav2 = g.istft(out.stage2, stft, batch.len);
    let per_item = graph_extraction_loss(
        g,
        &batch.reverberant,
        &batch.dry,
        &wav1,
        wav2,
        cfg.ablation.terms(),
        lc.epsilon,
    )?;
    let (extraction_d, extraction_i) = role_means(&g.value(per_item));
    let mut total = graph_role_mean(g, per_item)?;
    let mut triplet = None;
    let mut triplet_contribution = 0.0;
    if cfg.ablation.triplet() {
        let b = batch.size();
        let anchor = model.anchor_embedding(g, *out.stage1.last().unwrap())?;
        let swapped: Vec<usize> = (0..b).map(|i| i ^ 1).collect();
        let negative = g.select(out.ref_embedding, &swapped);
        let t = graph_triplet(g, anchor, out.ref_embedding, negative, lc.margin, lc.epsilon);
        triplet = Some(role_means(&g.value(t)));
        if lc.triplet_active(step) {
            let t = graph_role_mean(g, t)?;
            let t = g.scale(t, lc.alpha);
            triplet_contribution = g.scalar(t);
            total = g.add(total, t);
        }
    }
    let breakdown = LossBreakdown {
        total: g.scalar(total),
        extraction_d,
        extraction_i,
        triplet,
        triplet_contribution,
        stage1_si_sdr: batch_mean_si_sdr(g, &batch.reverberant, *wav1.last().unwrap())?,
        stage2_si_sdr: batch_mean_si_sdr(g, &batch.dry, wav2)?,
    };
    Ok((total, breakdown))
}

/// One row of the training log. Wall-clock time is deliberately absent so
/// that logs of identical runs are identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub batch_seed: u64,
    pub loss: f64,
    pub extraction_d: f64,
    pub extraction_i: f64,
    pub triplet_d: Option<f64>,
    pub triplet_i: Option<f64>,
    pub triplet_contribution: f64,
    pub grad_norm: f64,
    pub train_stage1_si_sdr: f64,
    pub train_stage2_si_sdr: f64,
    pub valid_si_sdr: Option<f64>,
}

/// SI-SDR of one extraction example before and after processing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleScores {
    pub scene_id: String,
    pub role: Role,
    /// Mixture against the reverberant target.
    pub mixture_reverberant: f64,
    /// Final stage-one output against the reverberant target.
    pub stage1: f64,
    /// Mixture against the dry target.
    pub mixture_dry: f64,
    /// Stage-two output against the dry target.
    pub stage2: f64,
}

impl ExampleScores {
    pub fn stage1_improvement(&self) -> f64 {
        self.stage1 - self.mixture_reverberant
    }

    pub fn stage2_improvement(&self) -> f64 {
        self.stage2 - self.mixture_dry
    }
}

/// Means of [`ExampleScores`] fields over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ScoreSummary {
    pub mixture_reverberant: f64,
    pub stage1: f64,
    pub mixture_dry: f64,
    pub stage2: f64,
}

impl ScoreSummary {
    pub fn of(scores: &[ExampleScores]) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = |f: fn(&ExampleScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        Self {
            mixture_reverberant: mean(|s| s.mixture_reverberant),
            stage1: mean(|s| s.stage1),
            mixture_dry: mean(|s| s.mixture_dry),
            stage2: mean(|s| s.stage2),
        }
    }

    pub fn stage1_improvement(&self) -> f64 {
        self.stage1 - self.mixture_reverberant
    }

    pub fn stage2_improvement(&self) -> f64 {
        self.stage2 - self.mixture_dry
    }
}

/// Runs inference on every scene for each requested role.
pub fn score_scenes(model: &Model, scenes: &[Scene], roles: &[Role], workers: usize) -> Result<Vec<ExampleScores>> {
    let jobs: Vec<(&Scene, Role)> = scenes.iter().flat_map(|s| roles.iter().map(move |&r| (s, r))).collect();
    let pool = thread_pool(workers)?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(s, role)| {
                let ex = s.example(role);
                let out = model.extract(ex.mixture, ex.reference)?;
                let s1 = out.stage1_waveform()?;
                let s2 = out.stage2_waveform()?;
                Ok(ExampleScores {
                    scene_id: s.id.clone(),
                    role,
                    mixture_reverberant: losses::si_sdr(ex.reverberant_target.samples(), ex.mixture.samples())?,
                    stage1: losses::si_sdr(ex.reverberant_target.samples(), s1.samples())?,
                    mixture_dry: losses::si_sdr(ex.dry_target.samples(), ex.mixture.samples())?,
                    stage2: losses::si_sdr(ex.dry_target.samples(), s2.samples())?,
                })
            })
            .collect()
    })
}

/// Optimizer state plus the data it trains on.
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Number of completed updates; also the index of the next batch.
    pub step: u64,
    train: Vec<Scene>,
    valid: Vec<Scene>,
}

impl Trainer {
    pub fn new(mut model: Model, config: TrainConfig, train: Vec<Scene>, valid: Vec<Scene>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Corpus("no training scenes".into()));
        }
        model.config.n_iterations = config.ablation.iterations(model.config.n_iterations);
        Ok(Self {
            model,
            optimizer: Adam::new(config.lr),
            config,
            step: 0,
            train,
            valid,
        })
    }

    /// Restores model, optimizer, step counter and training configuration.
    pub fn from_checkpoint(ck: Checkpoint, train: Vec<Scene>, valid: Vec<Scene>) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ck.extra.get("train").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("checkpoint carries no usable training config: {e}")))?;
        let mut t = Self::new(ck.model, config, train, valid)?;
        t.step = ck.step;
        if let Some(o) = ck.optimizer {
            t.optimizer = o;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
            optimizer: Some(self.optimizer.clone()),
            extra: serde_json::json!({ "train": self.config }),
        }
    }

    pub fn train_scenes(&self) -> &[Scene] {
        &self.train
    }

    /// One optimizer update. On a non-finite loss or gradient the model is
    /// left untouched and [`Error::NonFinite`] names the batch seed.
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.step;
        let batch = make_batch(&self.train, &self.config, &self.model.config, step)?;
        let g = Graph::new(Mode::Train);
        let (loss, parts) = batch_loss(&g, &self.model, &batch, &self.config, step)?;
        let non_finite = || Error::NonFinite {
            step,
            batch_seed: batch.seed,
        };
        if !parts.total.is_finite() {
            log::error!("non-finite loss at step {step}; batch seed {} scenes {:?}", batch.seed, batch.scene_ids);
            return Err(non_finite());
        }
        let mut grads = g.backward(loss).into_params();
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            log::error!("non-finite gradient at step {step}; batch seed {} scenes {:?}", batch.seed, batch.scene_ids);
            return Err(non_finite());
        }
        self.optimizer.step(&mut self.model.store, &grads);
        let stats = g.take_norm_stats();
        self.model.store.apply_norm_stats(&stats, self.model.config.bn_momentum);
        self.step += 1;
        let valid_si_sdr = if self.config.valid_interval > 0 && self.step.is_multiple_of(self.config.valid_interval) && !self.valid.is_empty() {
            Some(self.validate()?)
        } else {
            None
        };
        Ok(StepLog {
            step,
            batch_seed: batch.seed,
            loss: parts.total,
            extraction_d: parts.extraction_d,
            extraction_i: parts.extraction_i,
            triplet_d: parts.triplet.map(|t| t.0),
            triplet_i: parts.triplet.map(|t| t.1),
            triplet_contribution: parts.triplet_contribution,
            grad_norm,
            train_stage1_si_sdr: parts.stage1_si_sdr,
            train_stage2_si_sdr: parts.stage2_si_sdr,
            valid_si_sdr,
        })
    }

    /// Mean stage-two SI-SDR (against the dry target) over validation scenes.
    pub fn validate(&self) -> Result<f64> {
        let scores = score_scenes(&self.model, &self.valid, &[Role::Desired], self.config.workers)?;
        Ok(ScoreSummary::of(&scores).stage2)
    }
}

/// What [`train`] leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<StepLog>,
    pub seconds: f64,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step_{step:06}.ckpt"))
}

pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn write_log(path: &Path, rows: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

/// Trains until `max_steps`, writing `train_log.csv`, periodic
/// `step_NNNNNN.ckpt` files and `last.ckpt` to `out_dir`. With `resume`,
/// continues from `last.ckpt` when present; the log is cut back to the
/// checkpoint so the resumed run reproduces the uninterrupted one exactly.
pub fn train_loop(mut trainer: Trainer, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = if trainer.step > 0 && log_path.is_file() {
        let mut rows = read_log(&log_path)?;
        rows.retain(|r| r.step < trainer.step);
        rows
    } else {
        Vec::new()
    };
    write_log(&log_path, &log)?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(log.is_empty())
        .from_writer(fs::OpenOptions::new().append(true).open(&log_path)?);
    let t0 = Instant::now();
    let last = out_dir.join(LAST_CHECKPOINT);
    while trainer.step < trainer.config.max_steps {
        let row = match trainer.step() {
            Ok(row) => row,
            Err(e @ Error::NonFinite { step, batch_seed }) => {
                let dump = serde_json::json!({
                    "step": step,
                    "batch_seed": batch_seed,
                    "train_seed": trainer.config.seed,
                });
                fs::write(out_dir.join(format!("nonfinite_step_{step:06}.json")), serde_json::to_vec_pretty(&dump)?)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writer.serialize(&row).map_err(csv_err)?;
        writer.flush()?;
        if row.step % 50 == 0 || row.valid_si_sdr.is_some() {
            log::info!(
                "step {} loss {:.3} stage1 {:.2} dB stage2 {:.2} dB{}",
                row.step,
                row.loss,
                row.train_stage1_si_sdr,
                row.train_stage2_si_sdr,
                row.valid_si_sdr.map(|v| format!(" valid {v:.2} dB")).unwrap_or_default()
            );
        }
        log.push(row);
        let interval = trainer.config.checkpoint_interval;
        if interval > 0 && trainer.step.is_multiple_of(interval) {
            let ck = trainer.checkpoint();
            ck.save(&checkpoint_path(out_dir, trainer.step))?;
            ck.save(&last)?;
        }
    }
    trainer.checkpoint().save(&last)?;
    Ok(TrainOutcome {
        steps: trainer.step,
        last_checkpoint: last,
        log_path,
        log,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Loads the train and valid splits of a manifest and trains from scratch,
/// or resumes from `out_dir/last.ckpt` when `resume` is set and it exists.
pub fn train(model: ModelConfig, cfg: TrainConfig, manifest: &Manifest, out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    manifest.validate()?;
    let train = manifest.load_split(Split::Train)?;
    let valid = manifest.load_split(Split::Valid)?;
    let last = out_dir.join(LAST_CHECKPOINT);
    let trainer = if resume && last.is_file() {
        let ck = Checkpoint::load(&last)?;
        let mut t = Trainer::from_checkpoint(ck, train, valid)?;
        // The step budget may be raised when resuming.
        t.config.max_steps = cfg.max_steps;
        t
    } else {
        Trainer::new(Model::new(model)?, cfg, train, valid)?
    };
    train_loop(trainer, out_dir)
}

/// Training-set scores of both reference roles, as optimized by the trainer.
pub fn training_scores(trainer: &Trainer) -> Result<Vec<ExampleScores>> {
    score_scenes(
        &trainer.model,
        trainer.train_scenes(),
        &[Role::Desired, Role::Interference],
        trainer.config.workers,
    )
}

/// Extracts the desired speaker of every scene and scores the stage-two
/// output against the dry target. Estimates are written to `estimates_dir`
/// (level-matched to the mixture) when given. Scenes whose extraction or
/// scoring fails are listed in the report, not fatal.
pub fn evaluate_model(model: &Model, scenes: &[Scene], workers: usize, estimates_dir: Option<&Path>) -> Result<MetricReport> {
    let pool = thread_pool(workers)?;
    let extracted: Vec<Result<EvalItem>> = pool.install(|| {
        scenes
            .par_iter()
            .map(|s| {
                let out = model.extract(&s.mixture, &s.reference_desired)?;
                let s1 = out.stage1_waveform()?;
                let s2 = out.stage2_waveform()?;
                if let Some(dir) = estimates_dir {
                    write_wav(&estimate_path(dir, &s.id, EstimateStage::One), &match_level(&s1, &s.mixture))?;
                    write_wav(&estimate_path(dir, &s.id, EstimateStage::Two), &match_level(&s2, &s.mixture))?;
                }
                Ok(EvalItem {
                    scene_id: s.id.clone(),
                    mixture: s.mixture.clone(),
                    target: s.dry_desired.clone(),
                    interference: s.reverberant_interference.clone(),
                    estimate: s2,
                    stage1: Some((s.reverberant_desired.clone(), s1)),
                })
            })
            .collect()
    });
    let mut items = Vec::new();
    let mut failed = Vec::new();
    for (s, r) in scenes.iter().zip(extracted) {
        match r {
            Ok(item) => items.push(item),
            Err(e) => failed.push(FailedScene {
                scene_id: s.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let mut report = MetricReport::score(&items, workers)?;
    for f in failed {
        log::warn!("scene {} excluded from the aggregate: {}", f.scene_id, f.reason);
        report.failed.push(f);
    }
    Ok(report)
}

/// Loads a checkpoint and evaluates it on one split of a corpus.
pub fn evaluate_checkpoint(checkpoint: &Path, manifest: &Manifest, split: Split, workers: usize) -> Result<MetricReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let scenes = manifest.load_split(split)?;
    if scenes.is_empty() {
        return Err(Error::Corpus(format!("split {split:?} has no scenes")));
    }
    evaluate_model(&ck.model, &scenes, workers, None)
}
