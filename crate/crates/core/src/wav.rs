//! 16-bit PCM mono WAV reading and writing.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::signal::{resample, Waveform, DEFAULT_SAMPLE_RATE};

/// Reads a mono WAV file. Files not at `expected_rate` are rejected unless
/// `allow_resample` is set, in which case they are converted.
pub fn read_wav(path: &Path, expected_rate: u32, allow_resample: bool) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::invalid(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match spec.sample_format {
        SampleFormat::Int => {
            let full_scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / full_scale))
                .collect::<Result<_, _>>()?
        }
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
    };
    let w = Waveform::new(samples, spec.sample_rate)?;
    if spec.sample_rate == expected_rate {
        Ok(w)
    } else if allow_resample {
        resample(&w, expected_rate)
    } else {
        Err(Error::SampleRate {
            found: spec.sample_rate,
            expected: expected_rate,
        })
    }
}

/// Reads a WAV at the canonical 8 kHz rate.
pub fn read_wav_8k(path: &Path) -> Result<Waveform> {
    read_wav(path, DEFAULT_SAMPLE_RATE, false)
}

/// Writes 16-bit PCM, clipping to full scale.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in w.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Rescales `x` to the RMS of `like`, then lowers it if needed so the peak
/// stays below full scale. Network estimates have arbitrary gain.
pub fn match_level(x: &Waveform, like: &Waveform) -> Waveform {
    let rms = x.rms();
    if rms == 0.0 {
        return x.clone();
    }
    let mut g = like.rms() / rms;
    let peak = x.samples().iter().fold(0.0f64, |m, v| m.max(v.abs())) * g;
    if peak > 0.99 {
        g *= 0.99 / peak;
    }
    x.scaled(g)
}

/// Rounds a waveform to the values a 16-bit round trip would produce.
pub fn quantize_16bit(w: &Waveform) -> Waveform {
    let q = w
        .samples()
        .iter()
        .map(|&s| (s * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0)
        .collect();
    Waveform::new(q, w.sample_rate()).expect("quantized samples are finite")
}
