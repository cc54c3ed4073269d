//! Speaker-utterance stores: a seeded synthetic voice corpus, or a directory
//! of WAV files laid out as `DIR/<speaker>/<utterance>.wav`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::signal::Waveform;
use crate::wav::read_wav;

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub audio: Waveform,
}

#[derive(Debug, Clone)]
pub struct Speaker {
    pub name: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, Default)]
pub struct SpeakerCorpus {
    pub speakers: Vec<Speaker>,
}

/// Generic vowel formant targets (F1, F2, F3) in Hz before speaker scaling.
const VOWELS: [[f64; 3]; 7] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
    [490.0, 1350.0, 1690.0],
];
const FORMANT_GAIN: [f64; 3] = [1.0, 0.5, 0.25];
const FORMANT_BW: [f64; 3] = [90.0, 110.0, 160.0];

/// Parameters that make one synthetic speaker distinguishable from another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoiceProfile {
    /// Mean fundamental frequency in Hz.
    pub f0: f64,
    /// Multiplier applied to every formant frequency (vocal tract length).
    pub tract_scale: f64,
    /// Relative f0 excursion within a syllable.
    pub intonation: f64,
    /// Gain of the aspiration noise mixed into voiced segments.
    pub breathiness: f64,
    /// Syllable rate in syllables per second.
    pub rate: f64,
}

impl VoiceProfile {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            f0: rng.gen_range(85.0..260.0),
            tract_scale: rng.gen_range(0.82..1.25),
            intonation: rng.gen_range(0.04..0.15),
            breathiness: rng.gen_range(0.0..0.06),
            rate: rng.gen_range(3.0..6.0),
        }
    }
}

fn formant_amp(f: f64, formants: &[f64; 3], scale: f64) -> f64 {
    let mut a = 0.0;
    for j in 0..3 {
        let c = formants[j] * scale;
        let bw = FORMANT_BW[j] * scale;
        let x = (f - c) / (bw / 2.0);
        a += FORMANT_GAIN[j] / (1.0 + x * x);
    }
    // gentle glottal roll-off
    a * (1.0 + f / 1500.0).recip()
}

/// Renders a speech-like utterance of roughly `seconds` for `voice`:
/// harmonic voiced syllables shaped by formants, short unvoiced onsets and
/// pauses.
pub fn synth_utterance<R: Rng>(rng: &mut R, voice: &VoiceProfile, seconds: f64, sample_rate: u32) -> Waveform {
    let fs = sample_rate as f64;
    let total = (seconds * fs).round() as usize;
    let mut out = vec![0.0; total];
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut pos = (rng.gen_range(0.02..0.1) * fs) as usize;
    let block = (0.005 * fs).max(1.0) as usize;
    let max_h = 60;
    let mut phases = [0.0f64; 60];
    while pos < total {
        if rng.gen_bool(0.15) {
            pos += (rng.gen_range(0.05..0.3) * fs) as usize;
            continue;
        }
        let syl_len = ((rng.gen_range(0.7..1.3) / voice.rate) * fs) as usize;
        let end = (pos + syl_len).min(total);
        let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
        let next = VOWELS[rng.gen_range(0..VOWELS.len())];
        let f_start = voice.f0 * (1.0 + voice.intonation * rng.gen_range(-1.0..1.0));
        let f_end = voice.f0 * (1.0 + voice.intonation * rng.gen_range(-1.0..1.0));
        let level = rng.gen_range(0.5..1.0);
        // unvoiced onset
        if rng.gen_bool(0.5) {
            let n = ((0.03 * fs) as usize).min(end - pos);
            let mut prev = 0.0;
            for i in 0..n {
                let w: f64 = noise.sample(rng);
                let hp = w - prev;
                prev = w;
                let env = (PI * i as f64 / n as f64).sin();
                out[pos + i] += 0.08 * level * hp * env;
            }
        }
        let len = end - pos;
        let mut amps = [0.0f64; 60];
        for i in 0..len {
            let frac = i as f64 / len.max(1) as f64;
            let f0 = f_start + (f_end - f_start) * frac;
            if i % block == 0 {
                let mut formants = [0.0; 3];
                for j in 0..3 {
                    let glide = (frac - 0.6).max(0.0) / 0.4;
                    formants[j] = vowel[j] + (next[j] - vowel[j]) * glide;
                }
                for (k, a) in amps.iter_mut().enumerate() {
                    let f = (k + 1) as f64 * f0;
                    *a = if f < fs / 2.0 - 200.0 {
                        formant_amp(f, &formants, voice.tract_scale)
                    } else {
                        0.0
                    };
                }
            }
            let attack = (i as f64 / (0.02 * fs)).min(1.0);
            let release = ((len - i) as f64 / (0.03 * fs)).min(1.0);
            let env = level * attack * release;
            let mut v = 0.0;
            for k in 0..max_h {
                if amps[k] == 0.0 {
                    break;
                }
                phases[k] = (phases[k] + 2.0 * PI * (k + 1) as f64 * f0 / fs) % (2.0 * PI);
                v += amps[k] * phases[k].sin();
            }
            let breath: f64 = noise.sample(rng);
            out[pos + i] += env * (0.1 * v + voice.breathiness * 0.1 * breath);
        }
        pos = end;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / total.max(1) as f64).sqrt();
    if rms > 0.0 {
        for v in &mut out {
            *v *= 0.05 / rms;
        }
    }
    Waveform::new(out, sample_rate).expect("synthesized samples are finite")
}

impl SpeakerCorpus {
    /// Deterministic synthetic corpus of `n_speakers` voices with
    /// `utterances` utterances each, 2.5 to 6 s long.
    pub fn synthetic(n_speakers: usize, utterances: usize, seed: u64, sample_rate: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let speakers = (0..n_speakers)
            .map(|s| {
                let voice = VoiceProfile::sample(&mut rng);
                let name = format!("spk{s:03}");
                let utterances = (0..utterances)
                    .map(|u| {
                        let secs = rng.gen_range(2.5..6.0);
                        Utterance {
                            id: format!("{name}_u{u:03}"),
                            audio: synth_utterance(&mut rng, &voice, secs, sample_rate),
                        }
                    })
                    .collect();
                Speaker { name, utterances }
            })
            .collect();
        Self { speakers }
    }

    /// Loads `DIR/<speaker>/*.wav` in sorted order.
    pub fn from_dir(dir: &Path, sample_rate: u32, allow_resample: bool) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir.to_path_buf()));
        }
        let mut speaker_dirs: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        speaker_dirs.sort();
        let mut speakers = Vec::new();
        for sd in speaker_dirs {
            let mut files: Vec<_> = std::fs::read_dir(&sd)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            let name = sd.file_name().unwrap().to_string_lossy().into_owned();
            let mut utterances = Vec::new();
            for f in files {
                let audio = read_wav(&f, sample_rate, allow_resample)?;
                let stem = f.file_stem().unwrap().to_string_lossy();
                utterances.push(Utterance {
                    id: format!("{name}/{stem}"),
                    audio,
                });
            }
            if !utterances.is_empty() {
                speakers.push(Speaker { name, utterances });
            }
        }
        let corpus = Self { speakers };
        corpus.check()?;
        Ok(corpus)
    }

    /// Scene construction needs two speakers with at least two utterances.
    pub fn check(&self) -> Result<()> {
        let usable = self.speakers.iter().filter(|s| s.utterances.len() >= 2).count();
        if self.speakers.len() < 2 || usable < 2 {
            return Err(Error::Corpus(format!(
                "need at least 2 speakers with 2+ utterances each, found {} speakers ({} usable)",
                self.speakers.len(),
                usable
            )));
        }
        Ok(())
    }

    pub fn sample_rate(&self) -> Option<u32> {
        self.speakers
            .first()
            .and_then(|s| s.utterances.first())
            .map(|u| u.audio.sample_rate())
    }

    pub fn find(&self, utterance_id: &str) -> Option<&Utterance> {
        self.speakers
            .iter()
            .flat_map(|s| &s.utterances)
            .find(|u| u.id == utterance_id)
    }
}
