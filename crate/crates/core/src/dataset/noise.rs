//! Background noise: a directory of recordings or synthetic speech-shaped noise.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::signal::Waveform;
use crate::wav::read_wav;

/// Corner above which synthetic noise rolls off at 12 dB per octave.
pub const NOISE_CORNER_HZ: f64 = 500.0;

#[derive(Debug, Clone, Default)]
pub enum NoiseSource {
    #[default]
    Synthetic,
    Recordings(Vec<Waveform>),
}

/// White Gaussian noise shaped flat below 500 Hz and falling 12 dB per
/// octave above it, scaled to unit RMS.
pub fn speech_shaped_noise<R: Rng>(rng: &mut R, len: usize, sample_rate: u32) -> Vec<f64> {
    if len == 0 {
        return Vec::new();
    }
    let n = len.next_power_of_two();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut buf: Vec<Complex64> = (0..n).map(|_| Complex64::new(normal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let fs = sample_rate as f64;
    for (k, b) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = bin as f64 * fs / n as f64;
        let gain = if f <= NOISE_CORNER_HZ {
            1.0
        } else {
            (NOISE_CORNER_HZ / f).powi(2)
        };
        *b *= gain;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf[..len].iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

impl NoiseSource {
    pub fn from_dir(dir: &Path, sample_rate: u32, allow_resample: bool) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir.to_path_buf()));
        }
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        files.sort();
        let recs = files
            .iter()
            .map(|f| read_wav(f, sample_rate, allow_resample))
            .collect::<Result<Vec<_>>>()?;
        let recs: Vec<_> = recs.into_iter().filter(|w| w.power() > 0.0).collect();
        if recs.is_empty() {
            return Err(Error::Corpus(format!("no usable noise recordings in {}", dir.display())));
        }
        Ok(Self::Recordings(recs))
    }

    /// A noise segment of exactly `len` samples with unit RMS.
    pub fn draw<R: Rng>(&self, rng: &mut R, len: usize, sample_rate: u32) -> Vec<f64> {
        match self {
            Self::Synthetic => speech_shaped_noise(rng, len, sample_rate),
            Self::Recordings(recs) => {
                let rec = &recs[rng.gen_range(0..recs.len())];
                let src = rec.samples();
                let start = if src.len() > len { rng.gen_range(0..=src.len() - len) } else { 0 };
                let mut out: Vec<f64> = src[start..].iter().copied().cycle().take(len).collect();
                let rms = (out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
                if rms > 0.0 {
                    out.iter_mut().for_each(|v| *v /= rms);
                }
                out
            }
        }
    }
}
