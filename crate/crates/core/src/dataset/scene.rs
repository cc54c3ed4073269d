use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::NoiseSource;
use super::speech::{SpeakerCorpus, Utterance};
use crate::acoustics::{convolve, direct_path_rir, generate_rir, sample_placement, sample_room_with, RoomSpec, SourcePlacement};
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Scene-level mixing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneOptions {
    /// SNR range in dB: reverberant speech mixture power over noise power.
    pub snr_db: (f64, f64),
    /// Interfering speaker level relative to the desired one, in dB.
    pub interference_gain_db: (f64, f64),
    /// RMS of each dry utterance before its gain is applied.
    pub dry_rms: f64,
    /// The mixture is rescaled (with every component) to stay below this peak.
    pub peak_limit: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            snr_db: (-6.0, 3.0),
            interference_gain_db: (-2.5, 2.5),
            dry_rms: 0.1,
            peak_limit: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub desired_speaker: String,
    pub interference_speaker: String,
    pub desired_utterance: String,
    pub interference_utterance: String,
    pub desired_reference_utterance: String,
    pub interference_reference_utterance: String,
    pub interference_gain_db: f64,
    /// First-arrival sample of each speaker's RIR.
    pub desired_delay: usize,
    pub interference_delay: usize,
}

/// One two-speaker noisy reverberant example.
///
/// `dry_*` signals are the source utterances passed through the direct path
/// only (delayed and attenuated), so they are time-aligned with the
/// reverberant images.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub mixture: Waveform,
    pub dry_desired: Waveform,
    pub reverberant_desired: Waveform,
    pub dry_interference: Waveform,
    pub reverberant_interference: Waveform,
    pub noise: Waveform,
    pub reference_desired: Waveform,
    pub reference_interference: Waveform,
    /// Room with the desired speaker's placement.
    pub room: RoomSpec,
    pub interference_placement: SourcePlacement,
    pub snr_db: f64,
    pub seed: u64,
    pub meta: SceneMeta,
}

/// Which speaker the reference enrolls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Desired,
    Interference,
}

/// Inputs and targets for extracting one speaker of a scene.
#[derive(Debug, Clone, Copy)]
pub struct ExtractionExample<'a> {
    pub mixture: &'a Waveform,
    pub reference: &'a Waveform,
    pub reverberant_target: &'a Waveform,
    pub dry_target: &'a Waveform,
    /// Reverberant image of the other speaker (for interference metrics).
    pub other: &'a Waveform,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.mixture.sample_rate()
    }

    pub fn duration_secs(&self) -> f64 {
        self.mixture.duration_secs()
    }

    pub fn example(&self, role: Role) -> ExtractionExample<'_> {
        match role {
            Role::Desired => ExtractionExample {
                mixture: &self.mixture,
                reference: &self.reference_desired,
                reverberant_target: &self.reverberant_desired,
                dry_target: &self.dry_desired,
                other: &self.reverberant_interference,
            },
            Role::Interference => ExtractionExample {
                mixture: &self.mixture,
                reference: &self.reference_interference,
                reverberant_target: &self.reverberant_interference,
                dry_target: &self.dry_interference,
                other: &self.reverberant_desired,
            },
        }
    }

    /// Relative L2 error of `mixture` against the sum of its components.
    pub fn mixture_residual(&self) -> f64 {
        let mut err = 0.0;
        let mut norm = 0.0;
        for (i, &m) in self.mixture.samples().iter().enumerate() {
            let sum = self.reverberant_desired.samples()[i]
                + self.reverberant_interference.samples()[i]
                + self.noise.samples()[i];
            err += (m - sum) * (m - sum);
            norm += m * m;
        }
        (err / norm.max(f64::MIN_POSITIVE)).sqrt()
    }

    /// Measured `10 log10(P_speech / P_noise)` of the stored components.
    pub fn measured_snr_db(&self) -> f64 {
        let speech = self.reverberant_desired.add(&self.reverberant_interference).expect("aligned components");
        10.0 * (speech.power() / self.noise.power()).log10()
    }
}

/// Truncates or tiles `reference` to exactly `target_len` samples.
pub fn match_length(reference: &Waveform, target_len: usize) -> Result<Waveform> {
    if reference.is_empty() {
        return Err(Error::invalid("cannot match the length of an empty reference"));
    }
    let s: Vec<f64> = reference.samples().iter().copied().cycle().take(target_len).collect();
    Waveform::new(s, reference.sample_rate())
}

fn eligible(corpus: &SpeakerCorpus) -> Vec<usize> {
    (0..corpus.speakers.len())
        .filter(|&i| corpus.speakers[i].utterances.len() >= 2)
        .collect()
}

fn normalized(u: &Utterance, rms: f64) -> Vec<f64> {
    let r = u.audio.rms();
    let g = if r > 0.0 { rms / r } else { 0.0 };
    u.audio.samples().iter().map(|v| v * g).collect()
}

fn convolve_to(x: &[f64], h: &[f64], len: usize) -> Vec<f64> {
    let mut y = convolve(x, h);
    y.resize(len, 0.0);
    y
}

/// Builds the scene for `seed` deterministically.
pub fn build_scene(corpus: &SpeakerCorpus, noise: &NoiseSource, seed: u64, opts: &SceneOptions) -> Result<Scene> {
    corpus.check()?;
    let sr = corpus
        .sample_rate()
        .ok_or_else(|| Error::Corpus("empty corpus".into()))?;
    let pool = eligible(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let room = sample_room_with(&mut rng);
    let interference_placement = sample_placement(&mut rng, &room.dims, &room.mic_pos);

    let d = pool[rng.gen_range(0..pool.len())];
    let i = loop {
        let c = pool[rng.gen_range(0..pool.len())];
        if c != d {
            break c;
        }
    };
    let pick_two = |rng: &mut ChaCha8Rng, n: usize| {
        let a = rng.gen_range(0..n);
        let mut b = rng.gen_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        (a, b)
    };
    let (spk_d, spk_i) = (&corpus.speakers[d], &corpus.speakers[i]);
    let (ud, rd) = pick_two(&mut rng, spk_d.utterances.len());
    let (ui, ri) = pick_two(&mut rng, spk_i.utterances.len());
    let (utt_d, ref_d) = (&spk_d.utterances[ud], &spk_d.utterances[rd]);
    let (utt_i, ref_i) = (&spk_i.utterances[ui], &spk_i.utterances[ri]);

    let gain_db = rng.gen_range(opts.interference_gain_db.0..=opts.interference_gain_db.1);
    let snr_db = rng.gen_range(opts.snr_db.0..=opts.snr_db.1);

    let pos_d = room.source_position();
    let pos_i = room.position_of(&interference_placement);
    let h_d = generate_rir(&room, &pos_d)?;
    let h_i = generate_rir(&room, &pos_i)?;
    let direct_d = direct_path_rir(&room, &pos_d)?;
    let direct_i = direct_path_rir(&room, &pos_i)?;

    // 'min' policy: the longer source is truncated to the shorter one
    let len = utt_d.audio.len().min(utt_i.audio.len());
    let mut src_d = normalized(utt_d, opts.dry_rms);
    let mut src_i = normalized(utt_i, opts.dry_rms * 10f64.powf(gain_db / 20.0));
    src_d.truncate(len);
    src_i.truncate(len);

    let mut rev_d = convolve_to(&src_d, &h_d.taps, len);
    let mut rev_i = convolve_to(&src_i, &h_i.taps, len);
    let mut dry_d = convolve_to(&src_d, &direct_d.taps, len);
    let mut dry_i = convolve_to(&src_i, &direct_i.taps, len);

    let speech_power = rev_d
        .iter()
        .zip(&rev_i)
        .map(|(a, b)| (a + b) * (a + b))
        .sum::<f64>()
        / len as f64;
    if !(speech_power > 0.0) {
        return Err(Error::Corpus(format!("scene {seed}: silent speech mixture")));
    }
    let noise_gain = (speech_power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut v: Vec<f64> = noise.draw(&mut rng, len, sr).into_iter().map(|x| x * noise_gain).collect();

    let peak = rev_d
        .iter()
        .zip(&rev_i)
        .zip(&v)
        .map(|((a, b), c)| (a + b + c).abs())
        .fold(0.0, f64::max);
    if peak > opts.peak_limit {
        let g = opts.peak_limit / peak;
        for sig in [&mut rev_d, &mut rev_i, &mut dry_d, &mut dry_i, &mut v] {
            sig.iter_mut().for_each(|x| *x *= g);
        }
    }
    let mixture: Vec<f64> = (0..len).map(|t| rev_d[t] + rev_i[t] + v[t]).collect();

    let reference = |u: &Utterance, h: &[f64]| -> Result<Waveform> {
        let dry = normalized(u, opts.dry_rms);
        let mut r = convolve_to(&dry, h, dry.len());
        let pk = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if pk > opts.peak_limit {
            let g = opts.peak_limit / pk;
            r.iter_mut().for_each(|x| *x *= g);
        }
        match_length(&Waveform::new(r, sr)?, len)
    };
    let reference_desired = reference(ref_d, &h_d.taps)?;
    let reference_interference = reference(ref_i, &h_i.taps)?;

    let w = |x: Vec<f64>| Waveform::new(x, sr);
    Ok(Scene {
        id: format!("scene{seed:016x}"),
        mixture: w(mixture)?,
        dry_desired: w(dry_d)?,
        reverberant_desired: w(rev_d)?,
        dry_interference: w(dry_i)?,
        reverberant_interference: w(rev_i)?,
        noise: w(v)?,
        reference_desired,
        reference_interference,
        room,
        interference_placement,
        snr_db,
        seed,
        meta: SceneMeta {
            desired_speaker: spk_d.name.clone(),
            interference_speaker: spk_i.name.clone(),
            desired_utterance: utt_d.id.clone(),
            interference_utterance: utt_i.id.clone(),
            desired_reference_utterance: ref_d.id.clone(),
            interference_reference_utterance: ref_i.id.clone(),
            interference_gain_db: gain_db,
            desired_delay: h_d.direct_path_index,
            interference_delay: h_i.direct_path_index,
        },
    })
}

/// Crops every aligned signal to `[start, start + len)` and re-matches the
/// references to the new length.
pub fn crop(scene: &Scene, start: usize, len: usize) -> Result<Scene> {
    if len == 0 || start + len > scene.len() {
        return Err(Error::invalid(format!(
            "crop [{start}, {}) outside a scene of {} samples",
            start + len,
            scene.len()
        )));
    }
    let c = |w: &Waveform| w.slice(start, start + len);
    Ok(Scene {
        mixture: c(&scene.mixture),
        dry_desired: c(&scene.dry_desired),
        reverberant_desired: c(&scene.reverberant_desired),
        dry_interference: c(&scene.dry_interference),
        reverberant_interference: c(&scene.reverberant_interference),
        noise: c(&scene.noise),
        reference_desired: match_length(&scene.reference_desired, len)?,
        reference_interference: match_length(&scene.reference_interference, len)?,
        ..scene.clone()
    })
}

/// Random crop to a duration drawn uniformly from `[min_secs, max_secs]`
/// (capped by the scene length). Scenes shorter than `min_secs` are
/// rejected with [`Error::TooShort`] so callers can skip them.
pub fn dynamic_crop<R: Rng>(scene: &Scene, rng: &mut R, min_secs: f64, max_secs: f64) -> Result<Scene> {
    let sr = scene.sample_rate() as f64;
    let min_len = (min_secs * sr).round() as usize;
    if scene.len() < min_len {
        return Err(Error::TooShort {
            len: scene.len(),
            min: min_len,
        });
    }
    let max_len = ((max_secs * sr).round() as usize).min(scene.len());
    let len = rng.gen_range(min_len..=max_len);
    let start = rng.gen_range(0..=scene.len() - len);
    crop(scene, start, len)
}
