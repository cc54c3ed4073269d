//! Two-speaker noisy reverberant scenes, the reference-signal recipe,
//! dynamic cropping, and on-disk corpora described by a JSON-lines manifest.

mod noise;
mod scene;
pub mod speech;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use noise::{speech_shaped_noise, NoiseSource, NOISE_CORNER_HZ};
pub use scene::{
    build_scene, crop, dynamic_crop, match_length, ExtractionExample, Role, Scene, SceneMeta, SceneOptions,
};
pub use speech::{synth_utterance, Speaker, SpeakerCorpus, Utterance, VoiceProfile};

use crate::acoustics::{RoomSpec, SourcePlacement};
use crate::error::{Error, Result};
use crate::signal::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::wav::{read_wav, write_wav};

/// Mixes a master seed with a stream and an index (splitmix64 finalizer).
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split '{s}' (train, valid, test)"))),
        }
    }
}

/// Audio roles stored per scene, in file-name form.
pub const ROLES: [&str; 8] = [
    "mixture",
    "dry_desired",
    "reverberant_desired",
    "dry_interference",
    "reverberant_interference",
    "noise",
    "reference_desired",
    "reference_interference",
];

fn role_signal<'a>(scene: &'a Scene, role: &str) -> &'a Waveform {
    match role {
        "mixture" => &scene.mixture,
        "dry_desired" => &scene.dry_desired,
        "reverberant_desired" => &scene.reverberant_desired,
        "dry_interference" => &scene.dry_interference,
        "reverberant_interference" => &scene.reverberant_interference,
        "noise" => &scene.noise,
        "reference_desired" => &scene.reference_desired,
        "reference_interference" => &scene.reference_interference,
        _ => unreachable!("unknown role {role}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub split: Split,
    /// Role name to path relative to the manifest directory.
    pub files: BTreeMap<String, String>,
    pub room: RoomSpec,
    pub interference_placement: SourcePlacement,
    pub snr_db: f64,
    pub seed: u64,
    pub duration_secs: f64,
    pub meta: SceneMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<SceneRecord>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.jsonl";

    /// Reads a manifest from a file, or from `DIR/manifest.jsonl`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(Self::FILE_NAME) } else { path.to_path_buf() };
        if !file.exists() {
            return Err(Error::MissingFile(file));
        }
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut records = Vec::new();
        for line in BufReader::new(File::open(&file)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { root, records })
    }

    pub fn save(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.root)?;
        let path = self.root.join(Self::FILE_NAME);
        let mut w = BufWriter::new(File::create(&path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(path)
    }

    /// Ids are unique and every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                return Err(Error::Corpus(format!("duplicate scene id {}", r.id)));
            }
            for rel in r.files.values() {
                let p = self.root.join(rel);
                if !p.exists() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn path(&self, record: &SceneRecord, role: &str) -> Result<PathBuf> {
        record
            .files
            .get(role)
            .map(|rel| self.root.join(rel))
            .ok_or_else(|| Error::Corpus(format!("scene {} has no '{role}' file", record.id)))
    }

    /// Reads all audio of a record back into a [`Scene`].
    pub fn load_scene(&self, record: &SceneRecord) -> Result<Scene> {
        let read = |role: &str| read_wav(&self.path(record, role)?, DEFAULT_SAMPLE_RATE, false);
        Ok(Scene {
            id: record.id.clone(),
            mixture: read("mixture")?,
            dry_desired: read("dry_desired")?,
            reverberant_desired: read("reverberant_desired")?,
            dry_interference: read("dry_interference")?,
            reverberant_interference: read("reverberant_interference")?,
            noise: read("noise")?,
            reference_desired: read("reference_desired")?,
            reference_interference: read("reference_interference")?,
            room: record.room,
            interference_placement: record.interference_placement,
            snr_db: record.snr_db,
            seed: record.seed,
            meta: record.meta.clone(),
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Scene>> {
        self.split(split).map(|r| self.load_scene(r)).collect()
    }
}

/// Settings for writing a corpus to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// `DIR/<speaker>/*.wav`; a synthetic voice corpus is used when absent.
    pub corpus_dir: Option<PathBuf>,
    /// Directory of noise WAVs; synthetic speech-shaped noise when absent.
    pub noise_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
    pub synthetic_speakers: usize,
    pub synthetic_utterances: usize,
    pub allow_resample: bool,
    pub workers: usize,
    pub scene: SceneOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            corpus_dir: None,
            noise_dir: None,
            n_train: 50,
            n_valid: 10,
            n_test: 10,
            seed: 0,
            synthetic_speakers: 10,
            synthetic_utterances: 4,
            allow_resample: false,
            workers: 1,
            scene: SceneOptions::default(),
        }
    }
}

impl DatasetConfig {
    pub fn load_sources(&self) -> Result<(SpeakerCorpus, NoiseSource)> {
        let corpus = match &self.corpus_dir {
            Some(d) => SpeakerCorpus::from_dir(d, DEFAULT_SAMPLE_RATE, self.allow_resample)?,
            None => SpeakerCorpus::synthetic(
                self.synthetic_speakers,
                self.synthetic_utterances,
                derive_seed(self.seed, 100, 0),
                DEFAULT_SAMPLE_RATE,
            ),
        };
        corpus.check()?;
        let noise = match &self.noise_dir {
            Some(d) => NoiseSource::from_dir(d, DEFAULT_SAMPLE_RATE, self.allow_resample)?,
            None => NoiseSource::Synthetic,
        };
        Ok((corpus, noise))
    }

    /// Scene seeds for each split, in manifest order.
    pub fn scene_seeds(&self) -> Vec<(Split, u64)> {
        let counts = [self.n_train, self.n_valid, self.n_test];
        Split::ALL
            .iter()
            .zip(counts)
            .enumerate()
            .flat_map(|(si, (&split, n))| (0..n).map(move |i| (split, derive_seed(self.seed, si as u64 + 1, i as u64))))
            .collect()
    }
}

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Generates every scene, writes one 16-bit WAV per role per scene under
/// `out_dir/<split>/<id>/`, and writes the manifest.
pub fn generate_corpus(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    let (corpus, noise) = cfg.load_sources()?;
    std::fs::create_dir_all(out_dir)?;
    let jobs = cfg.scene_seeds();
    let pool = thread_pool(cfg.workers)?;
    let records: Vec<SceneRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(split, seed)| {
                let scene = build_scene(&corpus, &noise, seed, &cfg.scene)?;
                let rel_dir = format!("{}/{}", split.as_str(), scene.id);
                let mut files = BTreeMap::new();
                for role in ROLES {
                    let rel = format!("{rel_dir}/{role}.wav");
                    write_wav(&out_dir.join(&rel), role_signal(&scene, role))?;
                    files.insert(role.to_string(), rel);
                }
                Ok(SceneRecord {
                    id: scene.id.clone(),
                    split,
                    files,
                    room: scene.room,
                    interference_placement: scene.interference_placement,
                    snr_db: scene.snr_db,
                    seed,
                    duration_secs: scene.duration_secs(),
                    meta: scene.meta,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.validate()?;
    manifest.save()?;
    std::fs::write(
        out_dir.join("dataset_config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            n_train: 3,
            n_valid: 1,
            n_test: 1,
            synthetic_speakers: 3,
            synthetic_utterances: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_on_disk() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig { workers: 2, ..small() };
        let ma = generate_corpus(&cfg, a.path()).unwrap();
        let mb = generate_corpus(&small(), b.path()).unwrap();
        assert_eq!(ma.records, mb.records);
        let ja = std::fs::read(a.path().join(Manifest::FILE_NAME)).unwrap();
        let jb = std::fs::read(b.path().join(Manifest::FILE_NAME)).unwrap();
        assert_eq!(ja, jb);
        let r = &ma.records[0];
        let fa = std::fs::read(a.path().join(&r.files["mixture"])).unwrap();
        let fb = std::fs::read(b.path().join(&r.files["mixture"])).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(ma.split(Split::Train).count(), 3);
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(&small(), dir.path()).unwrap();
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded.records, m.records);
        loaded.validate().unwrap();
        let scene = loaded.load_scene(&loaded.records[0]).unwrap();
        // the on-disk mixture equals the sum of components up to 16-bit rounding
        assert!(scene.mixture_residual() < 1e-2);
        std::fs::remove_file(dir.path().join(&m.records[1].files["noise"])).unwrap();
        assert!(matches!(loaded.validate(), Err(Error::MissingFile(_))));
    }

    #[test]
    fn seeds_are_distinct() {
        let cfg = DatasetConfig { n_train: 100, n_valid: 100, n_test: 100, ..small() };
        let seeds: std::collections::HashSet<u64> = cfg.scene_seeds().into_iter().map(|(_, s)| s).collect();
        assert_eq!(seeds.len(), 300);
    }

    #[test]
    fn split_names_parse() {
        assert_eq!("valid".parse::<Split>().unwrap(), Split::Valid);
        assert!("dev".parse::<Split>().is_err());
    }

    mod props {
        use std::sync::OnceLock;

        use super::super::*;
        use proptest::prelude::*;

        fn scene() -> &'static Scene {
            static S: OnceLock<Scene> = OnceLock::new();
            S.get_or_init(|| {
                let corpus = SpeakerCorpus::synthetic(3, 2, 9, 8000);
                build_scene(&corpus, &NoiseSource::Synthetic, 4, &SceneOptions::default()).unwrap()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn crops_keep_the_mixture_identity(start_frac in 0.0f64..1.0, len in 200usize..4000) {
                let sc = scene();
                let len = len.min(sc.len());
                let start = ((sc.len() - len) as f64 * start_frac) as usize;
                let c = crop(sc, start, len).unwrap();
                prop_assert_eq!(c.len(), len);
                prop_assert_eq!(c.reference_desired.len(), len);
                for t in 0..len {
                    let sum = c.reverberant_desired.samples()[t] + c.reverberant_interference.samples()[t] + c.noise.samples()[t];
                    prop_assert!((sum - c.mixture.samples()[t]).abs() < 1e-9);
                }
            }

            #[test]
            fn matched_references_tile(x in prop::collection::vec(-1.0f64..1.0, 1..300), target in 1usize..1000) {
                let w = Waveform::new(x.clone(), 8000).unwrap();
                let m = match_length(&w, target).unwrap();
                prop_assert_eq!(m.len(), target);
                for (t, v) in m.samples().iter().enumerate() {
                    prop_assert_eq!(*v, x[t % x.len()]);
                }
            }
        }
    }
}
