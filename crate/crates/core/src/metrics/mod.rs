//! Objective evaluation: SI-SDR, projection-based SDR/SIR and STOI, plus the
//! per-scene report used by the `evaluate` command.

mod bss;
mod stoi;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{thread_pool, Manifest, Split};
use crate::error::{Error, Result};
use crate::signal::Waveform;
use crate::wav::read_wav_8k;

pub use bss::{eval_sdr_sir_taps, DEFAULT_TAPS};
pub use stoi::{stoi, MIN_ACTIVE_SECS, STOI_RATE};

pub const DB_FLOOR: f64 = -40.0;
pub const DB_CEIL: f64 = 60.0;

/// Clamps a dB value into the reporting range.
pub fn clamp_db(v: f64) -> f64 {
    if v.is_nan() {
        DB_FLOOR
    } else {
        v.clamp(DB_FLOOR, DB_CEIL)
    }
}

fn same_rate(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::SampleRate {
            found: b.sample_rate(),
            expected: a.sample_rate(),
        });
    }
    Ok(())
}

/// SI-SDR in dB. The same function the training loss uses, unclamped.
pub fn si_sdr(target: &Waveform, estimate: &Waveform) -> Result<f64> {
    same_rate(target, estimate)?;
    crate::losses::si_sdr(target.samples(), estimate.samples())
}

/// SDR and SIR with 512-tap distortion filters.
pub fn eval_sdr_sir(target: &Waveform, interference: &Waveform, estimate: &Waveform) -> Result<(f64, f64)> {
    same_rate(target, estimate)?;
    same_rate(target, interference)?;
    eval_sdr_sir_taps(target.samples(), interference.samples(), estimate.samples(), DEFAULT_TAPS)
}

/// The four reported measures of one signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub si_sdr: f64,
    pub sdr: f64,
    pub sir: f64,
    pub stoi: f64,
}

impl Scores {
    pub fn compute(target: &Waveform, interference: &Waveform, estimate: &Waveform) -> Result<Self> {
        let (sdr, sir) = eval_sdr_sir(target, interference, estimate)?;
        Ok(Self {
            si_sdr: si_sdr(target, estimate)?,
            sdr,
            sir,
            stoi: stoi(target, estimate)?,
        })
    }

    fn minus(&self, o: &Scores) -> Scores {
        Scores {
            si_sdr: self.si_sdr - o.si_sdr,
            sdr: self.sdr - o.sdr,
            sir: self.sir - o.sir,
            stoi: self.stoi - o.stoi,
        }
    }

    fn mean<'a>(it: impl Iterator<Item = &'a Scores>) -> Option<Scores> {
        let mut n = 0.0;
        let mut acc = Scores {
            si_sdr: 0.0,
            sdr: 0.0,
            sir: 0.0,
            stoi: 0.0,
        };
        for s in it {
            n += 1.0;
            acc.si_sdr += s.si_sdr;
            acc.sdr += s.sdr;
            acc.sir += s.sir;
            acc.stoi += s.stoi;
        }
        (n > 0.0).then(|| Scores {
            si_sdr: acc.si_sdr / n,
            sdr: acc.sdr / n,
            sir: acc.sir / n,
            stoi: acc.stoi / n,
        })
    }
}

/// Signals needed to score one scene.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub scene_id: String,
    pub mixture: Waveform,
    /// Dry desired speech, the target of the final output.
    pub target: Waveform,
    /// Reverberant interfering speech.
    pub interference: Waveform,
    pub estimate: Waveform,
    /// Reverberant desired speech and the stage-one estimate, if available.
    pub stage1: Option<(Waveform, Waveform)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene_id: String,
    pub processed: Scores,
    pub unprocessed: Scores,
    pub improvement: Scores,
    /// Stage-one SI-SDR against the reverberant target.
    pub stage1_si_sdr: Option<f64>,
    /// Attached from an external tool's CSV.
    pub pesq: Option<f64>,
}

impl SceneRow {
    pub fn compute(item: &EvalItem) -> Result<Self> {
        let processed = Scores::compute(&item.target, &item.interference, &item.estimate)?;
        let unprocessed = Scores::compute(&item.target, &item.interference, &item.mixture)?;
        let stage1_si_sdr = match &item.stage1 {
            Some((t, e)) => Some(si_sdr(t, e)?),
            None => None,
        };
        Ok(Self {
            scene_id: item.scene_id.clone(),
            improvement: processed.minus(&unprocessed),
            processed,
            unprocessed,
            stage1_si_sdr,
            pesq: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedScene {
    pub scene_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub processed: Scores,
    pub unprocessed: Scores,
    pub improvement: Scores,
    pub stage1_si_sdr: Option<f64>,
    pub pesq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<SceneRow>,
    pub failed: Vec<FailedScene>,
    /// Means over `rows`; absent when every scene failed.
    pub aggregate: Option<Aggregate>,
}

fn mean_opt(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = it.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map(|v| format!("{v:.prec$}")).unwrap_or_default()
}

impl MetricReport {
    pub fn new(rows: Vec<SceneRow>, failed: Vec<FailedScene>) -> Self {
        for f in &failed {
            log::warn!("scene {} excluded from the aggregate: {}", f.scene_id, f.reason);
        }
        let mut r = Self {
            rows,
            failed,
            aggregate: None,
        };
        r.aggregate = r.summarize();
        r
    }

    fn summarize(&self) -> Option<Aggregate> {
        Some(Aggregate {
            processed: Scores::mean(self.rows.iter().map(|r| &r.processed))?,
            unprocessed: Scores::mean(self.rows.iter().map(|r| &r.unprocessed))?,
            improvement: Scores::mean(self.rows.iter().map(|r| &r.improvement))?,
            stage1_si_sdr: mean_opt(self.rows.iter().map(|r| r.stage1_si_sdr)),
            pesq: mean_opt(self.rows.iter().map(|r| r.pesq)),
        })
    }

    /// Scores every item on `workers` threads; failures are listed, not fatal.
    pub fn score(items: &[EvalItem], workers: usize) -> Result<Self> {
        let results: Vec<Result<SceneRow>> =
            thread_pool(workers)?.install(|| items.par_iter().map(SceneRow::compute).collect());
        let mut rows = Vec::new();
        let mut failed = Vec::new();
        for (item, r) in items.iter().zip(results) {
            match r {
                Ok(row) => rows.push(row),
                Err(e) => failed.push(FailedScene {
                    scene_id: item.scene_id.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        Ok(Self::new(rows, failed))
    }

    /// Reads PESQ values from a CSV with `scene_id` and `pesq` columns, as
    /// produced by an external tool.
    pub fn attach_pesq(&mut self, csv_path: &Path) -> Result<()> {
        if !csv_path.exists() {
            return Err(Error::MissingFile(csv_path.to_path_buf()));
        }
        #[derive(Deserialize)]
        struct Row {
            scene_id: String,
            pesq: f64,
        }
        let mut values = BTreeMap::new();
        let mut rdr = csv::Reader::from_path(csv_path).map_err(|e| Error::Corpus(e.to_string()))?;
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|e| Error::Corpus(format!("{}: {e}", csv_path.display())))?;
            values.insert(row.scene_id, row.pesq);
        }
        for r in &mut self.rows {
            r.pesq = values.get(&r.scene_id).copied();
        }
        self.aggregate = self.summarize();
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        let header = [
            "scene_id", "si_sdr", "sdr", "sir", "stoi", "pesq", "mix_si_sdr", "mix_sdr", "mix_sir", "mix_stoi",
            "si_sdr_i", "sdr_i", "sir_i", "stoi_i", "stage1_si_sdr", "status",
        ];
        w.write_record(header).map_err(|e| Error::Io(e.into()))?;
        let line = |id: &str, p: &Scores, u: &Scores, i: &Scores, s1: Option<f64>, pesq: Option<f64>, status: &str| {
            let f = |v: f64| format!("{v:.6}");
            vec![
                id.to_string(),
                f(p.si_sdr),
                f(p.sdr),
                f(p.sir),
                f(p.stoi),
                fmt_opt(pesq, 6),
                f(u.si_sdr),
                f(u.sdr),
                f(u.sir),
                f(u.stoi),
                f(i.si_sdr),
                f(i.sdr),
                f(i.sir),
                f(i.stoi),
                fmt_opt(s1, 6),
                status.to_string(),
            ]
        };
        for r in &self.rows {
            w.write_record(line(&r.scene_id, &r.processed, &r.unprocessed, &r.improvement, r.stage1_si_sdr, r.pesq, "ok"))
                .map_err(|e| Error::Io(e.into()))?;
        }
        for f in &self.failed {
            let mut rec = vec![f.scene_id.clone()];
            rec.extend(std::iter::repeat_n(String::new(), header.len() - 2));
            rec.push(format!("failed: {}", f.reason));
            w.write_record(rec).map_err(|e| Error::Io(e.into()))?;
        }
        if let Some(a) = &self.aggregate {
            w.write_record(line("mean", &a.processed, &a.unprocessed, &a.improvement, a.stage1_si_sdr, a.pesq, "aggregate"))
                .map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned text table: unprocessed, processed and improvement rows.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let pesq = self.aggregate.as_ref().and_then(|a| a.pesq);
        let _ = write!(out, "{:<12} {:>8} {:>8} {:>8} {:>7}", "", "SI-SDR", "SDR", "SIR", "STOI");
        if pesq.is_some() {
            let _ = write!(out, " {:>6}", "PESQ");
        }
        out.push('\n');
        match &self.aggregate {
            None => out.push_str("(no scenes scored)\n"),
            Some(a) => {
                for (name, s, p) in [
                    ("Unprocessed", &a.unprocessed, None),
                    ("Processed", &a.processed, pesq),
                    ("Improvement", &a.improvement, None),
                ] {
                    let _ = write!(
                        out,
                        "{name:<12} {:>8.2} {:>8.2} {:>8.2} {:>6.1}%",
                        s.si_sdr,
                        s.sdr,
                        s.sir,
                        100.0 * s.stoi
                    );
                    if pesq.is_some() {
                        let _ = write!(out, " {:>6}", fmt_opt(p, 2));
                    }
                    out.push('\n');
                }
            }
        }
        let _ = writeln!(out, "scenes: {} scored, {} failed", self.rows.len(), self.failed.len());
        out
    }
}

/// Output stage of an estimate file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateStage {
    One,
    Two,
}

/// `<dir>/<scene id>.stage1.wav` or `<dir>/<scene id>.stage2.wav`.
pub fn estimate_path(dir: &Path, scene_id: &str, stage: EstimateStage) -> PathBuf {
    let suffix = match stage {
        EstimateStage::One => "stage1",
        EstimateStage::Two => "stage2",
    };
    dir.join(format!("{scene_id}.{suffix}.wav"))
}

/// Scores the estimates in `estimates_dir` for every scene of a split.
/// Missing or unreadable estimates are reported as failed scenes.
pub fn report(manifest: &Manifest, split: Split, estimates_dir: &Path, workers: usize) -> Result<MetricReport> {
    let mut items = Vec::new();
    let mut failed = Vec::new();
    for record in manifest.split(split) {
        let scene = manifest.load_scene(record)?;
        let estimate = match read_wav_8k(&estimate_path(estimates_dir, &record.id, EstimateStage::Two)) {
            Ok(w) => w,
            Err(e) => {
                failed.push(FailedScene {
                    scene_id: record.id.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let stage1 = read_wav_8k(&estimate_path(estimates_dir, &record.id, EstimateStage::One))
            .ok()
            .map(|e| (scene.reverberant_desired.clone(), e));
        items.push(EvalItem {
            scene_id: scene.id,
            mixture: scene.mixture,
            target: scene.dry_desired,
            interference: scene.reverberant_interference,
            estimate,
            stage1,
        });
    }
    let mut scored = MetricReport::score(&items, workers)?;
    for f in failed {
        log::warn!("scene {} excluded from the aggregate: {}", f.scene_id, f.reason);
        scored.failed.push(f);
    }
    Ok(scored)
}
