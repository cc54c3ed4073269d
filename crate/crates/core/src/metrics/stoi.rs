//! Short-time objective intelligibility in its standard published form.

use ndarray::{s, Array2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::signal::{resample, Waveform};

/// Internal rate of the measure.
pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = FRAME / 2;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
/// Frames per short-time segment (384 ms).
const SEGMENT: usize = 30;
/// Lower signal-to-distortion bound in dB.
const BETA: f64 = -15.0;
const DYN_RANGE: f64 = 40.0;
/// Speech-active signal required after silent-frame removal, in seconds.
pub const MIN_ACTIVE_SECS: f64 = 1.0;

/// `np.hanning(n + 2)[1:-1]`.
fn hanning(n: usize) -> Vec<f64> {
    let m = n + 2;
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (m - 1) as f64).cos())
        .collect()
}

/// One-third octave band matrix `[BANDS, NFFT / 2 + 1]`.
fn third_octave_bands() -> Array2<f64> {
    let k = NFFT / 2 + 1;
    let f: Vec<f64> = (0..k).map(|i| i as f64 * STOI_RATE as f64 / NFFT as f64).collect();
    let closest = |target: f64| {
        let mut best = 0;
        for i in 0..k {
            if (f[i] - target).powi(2) < (f[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    let mut obm = Array2::zeros((BANDS, k));
    for b in 0..BANDS {
        let lo = MIN_FREQ * 2f64.powf((2.0 * b as f64 - 1.0) / 6.0);
        let hi = MIN_FREQ * 2f64.powf((2.0 * b as f64 + 1.0) / 6.0);
        let (l, h) = (closest(lo), closest(hi));
        obm.slice_mut(s![b, l..h]).fill(1.0);
    }
    obm
}

fn frames(x: &[f64], win: &[f64]) -> Vec<Vec<f64>> {
    if x.len() <= FRAME {
        return Vec::new();
    }
    // Final start excluded, as in the reference implementation.
    (0..x.len() - FRAME)
        .step_by(HOP)
        .map(|start| x[start..start + FRAME].iter().zip(win).map(|(a, w)| a * w).collect())
        .collect()
}

fn overlap_add(frames: &[Vec<f64>]) -> Vec<f64> {
    if frames.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; (frames.len() - 1) * HOP + FRAME];
    for (i, f) in frames.iter().enumerate() {
        for (o, v) in out[i * HOP..].iter_mut().zip(f) {
            *o += v;
        }
    }
    out
}

/// Drops frames of `x` more than `DYN_RANGE` dB below its loudest frame and
/// the same frames of `y`, then resynthesizes both by overlap-add.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let win = hanning(FRAME);
    let fx = frames(x, &win);
    let fy = frames(y, &win);
    let energy: Vec<f64> = fx
        .iter()
        .map(|f| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + f64::EPSILON).log10())
        .collect();
    let max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..fx.len()).filter(|&i| energy[i] - max + DYN_RANGE > 0.0).collect();
    let pick = |f: &[Vec<f64>]| overlap_add(&keep.iter().map(|&i| f[i].clone()).collect::<Vec<_>>());
    (pick(&fx), pick(&fy))
}

/// Band envelopes `[BANDS, frames]`.
fn band_envelopes(x: &[f64], obm: &Array2<f64>) -> Array2<f64> {
    let win = hanning(FRAME);
    let fr = frames(x, &win);
    let fft = FftPlanner::new().plan_fft_forward(NFFT);
    let k = NFFT / 2 + 1;
    let mut env = Array2::zeros((BANDS, fr.len()));
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    for (j, f) in fr.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (c, &v) in buf.iter_mut().zip(f) {
            c.re = v;
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..k].iter().map(|c| c.norm_sqr()).collect();
        for b in 0..BANDS {
            let e: f64 = obm.row(b).iter().zip(&power).map(|(m, p)| m * p).sum();
            env[[b, j]] = e.sqrt();
        }
    }
    env
}

fn to_rate(w: &Waveform) -> Result<Vec<f64>> {
    if w.sample_rate() == STOI_RATE {
        Ok(w.samples().to_vec())
    } else {
        Ok(resample(w, STOI_RATE)?.into_samples())
    }
}

/// STOI of `processed` against `clean`, in `[0, 1]` for any real input
/// (negative correlations are possible in principle and reported as-is).
pub fn stoi(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    if clean.len() != processed.len() {
        return Err(Error::invalid(format!(
            "stoi inputs differ in length: {} vs {}",
            clean.len(),
            processed.len()
        )));
    }
    if clean.sample_rate() != processed.sample_rate() {
        return Err(Error::SampleRate {
            found: processed.sample_rate(),
            expected: clean.sample_rate(),
        });
    }
    let x = to_rate(clean)?;
    let y = to_rate(processed)?;
    let (x, y) = remove_silent_frames(&x, &y);
    let active = x.len() as f64 / STOI_RATE as f64;
    if active < MIN_ACTIVE_SECS {
        return Err(Error::Measurement(format!(
            "stoi needs at least {MIN_ACTIVE_SECS} s of speech-active signal, found {active:.2} s"
        )));
    }
    let obm = third_octave_bands();
    let xe = band_envelopes(&x, &obm);
    let ye = band_envelopes(&y, &obm);
    let n = xe.ncols();
    let clip = 1.0 + 10f64.powf(-BETA / 20.0);
    let eps = f64::EPSILON;
    let mut total = 0.0;
    let mut count = 0usize;
    for m in SEGMENT..=n {
        let xs = xe.slice(s![.., m - SEGMENT..m]);
        let ys = ye.slice(s![.., m - SEGMENT..m]);
        for b in 0..BANDS {
            let xr = xs.row(b);
            let yr = ys.row(b);
            let norm = xr.dot(&xr).sqrt() / (yr.dot(&yr).sqrt() + eps);
            let yp: Vec<f64> = yr.iter().zip(xr.iter()).map(|(&yv, &xv)| (yv * norm).min(xv * clip)).collect();
            let mx = xr.mean().unwrap();
            let my = yp.iter().sum::<f64>() / SEGMENT as f64;
            let xc: Vec<f64> = xr.iter().map(|v| v - mx).collect();
            let yc: Vec<f64> = yp.iter().map(|v| v - my).collect();
            let nx = xc.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
            let ny = yc.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
            total += xc.iter().zip(&yc).map(|(a, b)| a / nx * b / ny).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_matrix_layout() {
        let obm = third_octave_bands();
        assert_eq!(obm.dim(), (15, 257));
        // first band starts near 133 Hz (bin 7 at 19.5 Hz spacing)
        let first = obm.row(0).iter().position(|&v| v == 1.0).unwrap();
        assert_eq!(first, 7);
        for b in 1..15 {
            let start = obm.row(b).iter().position(|&v| v == 1.0).unwrap();
            let prev_end = obm.row(b - 1).iter().rposition(|&v| v == 1.0).unwrap();
            assert_eq!(start, prev_end + 1, "bands tile the spectrum");
        }
    }

    #[test]
    fn silent_frames_are_dropped() {
        let mut x: Vec<f64> = (0..4000).map(|i| (i as f64 * 0.3).sin()).collect();
        x.extend(std::iter::repeat_n(0.0, 4000));
        let (xs, ys) = remove_silent_frames(&x, &x);
        assert_eq!(xs, ys);
        assert!(xs.len() < 4400 && xs.len() > 3600, "{}", xs.len());
    }
}
