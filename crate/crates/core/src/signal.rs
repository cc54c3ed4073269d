//! Time-frequency analysis and synthesis.
//!
//! The STFT uses a periodic square-root Hann window for both analysis and
//! synthesis. At 50% overlap the squared window sums to one, so the
//! analysis/synthesis pair reconstructs exactly. Signals are reflect-padded by
//! `frame_size - hop` samples on both ends (half a frame at the default 50%
//! overlap, plus zeros at the tail up to a whole number of hops) so every
//! input sample is covered by the same number of frames.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Mono sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean power per sample.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Samples `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Waveform {
        Waveform {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn truncated(&self, len: usize) -> Waveform {
        self.slice(0, len.min(self.len()))
    }

    /// Elementwise sum; lengths and rates must agree.
    pub fn add(&self, other: &Waveform) -> Result<Waveform> {
        if self.sample_rate != other.sample_rate || self.len() != other.len() {
            return Err(Error::invalid("waveform length or sample rate mismatch"));
        }
        Ok(Waveform {
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a + b)
                .collect(),
            sample_rate: self.sample_rate,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    #[default]
    SqrtHann,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::SqrtHann => (0..len)
                .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).sqrt())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_size: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_size: 256,
            hop: 128,
            window: Window::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn new(frame_size: usize, hop: usize) -> Result<Self> {
        let cfg = Self {
            frame_size,
            hop,
            window: Window::SqrtHann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Retained bins per frame (DC through Nyquist).
    pub fn n_bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    /// Reflected samples at each end; half a frame at 50% overlap.
    fn pad(&self) -> usize {
        self.frame_size - self.hop
    }

    /// Frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop) + (self.frame_size / self.hop) - 1
    }

    /// Shortest signal length that yields `n_frames` frames.
    pub fn min_len_for_frames(&self, n_frames: usize) -> usize {
        let extra = self.frame_size / self.hop - 1;
        (n_frames.saturating_sub(extra).saturating_sub(1)) * self.hop + 1
    }

    fn padded_len(&self, n_frames: usize) -> usize {
        (n_frames - 1) * self.hop + self.frame_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size < 4 || !self.frame_size.is_multiple_of(2) {
            return Err(Error::invalid("frame size must be even and >= 4"));
        }
        if self.hop == 0 || !self.frame_size.is_multiple_of(self.hop) {
            return Err(Error::invalid("hop must divide the frame size"));
        }
        let w = self.window.coefficients(self.frame_size);
        let sums = overlap_sums(&w, self.hop);
        let first = sums[0];
        if first <= 0.0 || sums.iter().any(|s| (s - first).abs() > 1e-9 * first) {
            return Err(Error::invalid(format!(
                "window/hop pair ({} / {}) does not satisfy perfect reconstruction",
                self.frame_size, self.hop
            )));
        }
        Ok(())
    }

    /// Constant synthesis gain making analysis/synthesis an exact inverse pair.
    fn synthesis_gain(&self) -> f64 {
        let w = self.window.coefficients(self.frame_size);
        1.0 / overlap_sums(&w, self.hop)[0]
    }
}

fn overlap_sums(w: &[f64], hop: usize) -> Vec<f64> {
    (0..hop)
        .map(|t| w.iter().skip(t).step_by(hop).map(|v| v * v).sum())
        .collect()
}

/// Complex STFT, frames along axis 0 and bins along axis 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: Array2<Complex64>,
    pub config: StftConfig,
    /// Length of the waveform this spectrogram was computed from.
    pub signal_len: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.bins.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.bins.ncols()
    }

    fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.n_bins() != self.config.n_bins() {
            return Err(Error::invalid(format!(
                "spectrogram has {} bins, config implies {}",
                self.n_bins(),
                self.config.n_bins()
            )));
        }
        if self.n_frames() != self.config.n_frames(self.signal_len) {
            return Err(Error::invalid(format!(
                "spectrogram has {} frames, a {}-sample signal implies {}",
                self.n_frames(),
                self.signal_len,
                self.config.n_frames(self.signal_len)
            )));
        }
        Ok(())
    }
}

/// Real/imaginary planes of a spectrogram, shaped `[2, frames, bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiFeature {
    pub planes: Array3<f64>,
    pub config: StftConfig,
    pub signal_len: usize,
    pub sample_rate: u32,
}

impl RiFeature {
    pub fn n_frames(&self) -> usize {
        self.planes.len_of(Axis(1))
    }

    pub fn n_bins(&self) -> usize {
        self.planes.len_of(Axis(2))
    }
}

fn reflect_pad(x: &[f64], cfg: &StftConfig, n_frames: usize) -> Vec<f64> {
    let pad = cfg.pad();
    let total = cfg.padded_len(n_frames);
    let n = x.len();
    let mut out = Vec::with_capacity(total);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out.resize(total, 0.0);
    out
}

pub(crate) fn analysis(x: &[f64], cfg: &StftConfig) -> Array2<Complex64> {
    let n_frames = cfg.n_frames(x.len());
    let padded = reflect_pad(x, cfg, n_frames);
    let win = cfg.window.coefficients(cfg.frame_size);
    let fft = FftPlanner::new().plan_fft_forward(cfg.frame_size);
    let k = cfg.n_bins();
    let mut out = Array2::zeros((n_frames, k));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.frame_size];
    for (f, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let seg = &padded[f * cfg.hop..f * cfg.hop + cfg.frame_size];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&win) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (o, b) in row.iter_mut().zip(&buf[..k]) {
            *o = *b;
        }
    }
    out
}

/// Overlap-add synthesis of `[frames, bins]` into `len` samples.
///
/// Imaginary parts of the DC and Nyquist bins do not contribute.
pub(crate) fn synthesis(bins: ArrayView2<Complex64>, cfg: &StftConfig, len: usize) -> Vec<f64> {
    let n = cfg.frame_size;
    let k = cfg.n_bins();
    let n_frames = bins.nrows();
    let win = cfg.window.coefficients(n);
    let gain = cfg.synthesis_gain() / n as f64;
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut acc = vec![0.0; cfg.padded_len(n_frames)];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (f, row) in bins.axis_iter(Axis(0)).enumerate() {
        for i in 0..k {
            buf[i] = row[i];
        }
        buf[0].im = 0.0;
        buf[k - 1].im = 0.0;
        for i in k..n {
            buf[i] = buf[n - i].conj();
        }
        ifft.process(&mut buf);
        let dst = &mut acc[f * cfg.hop..f * cfg.hop + n];
        for ((d, b), &w) in dst.iter_mut().zip(&buf).zip(&win) {
            *d += b.re * w * gain;
        }
    }
    let pad = cfg.pad();
    let mut out = acc[pad..].to_vec();
    out.resize(len, 0.0);
    out
}

/// Adjoint of [`synthesis`]: maps a gradient over the output samples to a
/// gradient over the real and imaginary parts of every bin.
pub(crate) fn synthesis_adjoint(
    grad: &[f64],
    cfg: &StftConfig,
    n_frames: usize,
) -> (Array2<f64>, Array2<f64>) {
    let n = cfg.frame_size;
    let k = cfg.n_bins();
    let win = cfg.window.coefficients(n);
    let gain = cfg.synthesis_gain() / n as f64;
    let pad = cfg.pad();
    let mut padded = vec![0.0; cfg.padded_len(n_frames)];
    let take = grad.len().min(padded.len() - pad);
    padded[pad..pad + take].copy_from_slice(&grad[..take]);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut re = Array2::zeros((n_frames, k));
    let mut im = Array2::zeros((n_frames, k));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for f in 0..n_frames {
        let seg = &padded[f * cfg.hop..f * cfg.hop + n];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&win) {
            *b = Complex64::new(s * w * gain, 0.0);
        }
        fft.process(&mut buf);
        for i in 0..k {
            let edge = i == 0 || i == k - 1;
            let scale = if edge { 1.0 } else { 2.0 };
            re[[f, i]] = scale * buf[i].re;
            im[[f, i]] = if edge { 0.0 } else { scale * buf[i].im };
        }
    }
    (re, im)
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.len() < cfg.frame_size {
        return Err(Error::invalid(format!(
            "signal of {} samples is shorter than one frame ({})",
            w.len(),
            cfg.frame_size
        )));
    }
    Ok(Spectrogram {
        bins: analysis(w.samples(), cfg),
        config: *cfg,
        signal_len: w.len(),
        sample_rate: w.sample_rate(),
    })
}

pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    s.check()?;
    Waveform::new(
        synthesis(s.bins.view(), &s.config, s.signal_len),
        s.sample_rate,
    )
}

pub fn to_ri(s: &Spectrogram) -> RiFeature {
    let (n, k) = s.bins.dim();
    let mut planes = Array3::zeros((2, n, k));
    for ((f, b), c) in s.bins.indexed_iter() {
        planes[[0, f, b]] = c.re;
        planes[[1, f, b]] = c.im;
    }
    RiFeature {
        planes,
        config: s.config,
        signal_len: s.signal_len,
        sample_rate: s.sample_rate,
    }
}

pub fn from_ri(f: &RiFeature) -> Result<Spectrogram> {
    let (c, n, k) = f.planes.dim();
    if c != 2 {
        return Err(Error::invalid(format!(
            "RI feature must have 2 channels, found {c}"
        )));
    }
    if k != f.config.n_bins() {
        return Err(Error::invalid(format!(
            "RI feature has {k} bins, config implies {}",
            f.config.n_bins()
        )));
    }
    let bins = Array2::from_shape_fn((n, k), |(i, j)| {
        Complex64::new(f.planes[[0, i, j]], f.planes[[1, i, j]])
    });
    Ok(Spectrogram {
        bins,
        config: f.config,
        signal_len: f.signal_len,
        sample_rate: f.sample_rate,
    })
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Rational polyphase resampling with a Hann-windowed sinc low-pass.
pub fn resample(x: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    let from = x.sample_rate();
    if from == target_rate {
        return Ok(x.clone());
    }
    let g = gcd(from, target_rate);
    let up = (target_rate / g) as usize;
    let down = (from / g) as usize;
    let factor = up.max(down);
    let cutoff = 1.0 / factor as f64;
    let half = 16 * factor;
    let taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let t = i as f64 - half as f64;
            let w = 0.5 + 0.5 * (PI * t / (half as f64 + 1.0)).cos();
            cutoff * sinc(cutoff * t) * w * up as f64
        })
        .collect();
    let src = x.samples();
    let out_len = (src.len() * up).div_ceil(down);
    let mut out = vec![0.0; out_len];
    for (m, o) in out.iter_mut().enumerate() {
        let p = (m * down + half) as isize;
        // taps index j contributes upsampled sample p - j, nonzero only on multiples of `up`
        let first = p.rem_euclid(up as isize) as usize;
        let mut acc = 0.0;
        let mut j = first;
        while j < taps.len() {
            let idx = (p - j as isize) / up as isize;
            if idx >= 0 && (idx as usize) < src.len() {
                acc += taps[j] * src[idx as usize];
            }
            j += up;
        }
        *o = acc;
    }
    Waveform::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    #[test]
    fn waveform_rejects_nan_and_zero_rate() {
        assert!(Waveform::new(vec![0.0, f64::NAN], 8000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn frame_count_matches_policy() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_frames(256), 3);
        assert_eq!(cfg.n_frames(257), 4);
        assert_eq!(cfg.n_frames(16000), 126);
        for n in [3, 4, 12, 63] {
            let len = cfg.min_len_for_frames(n).max(cfg.frame_size);
            if cfg.min_len_for_frames(n) >= cfg.frame_size {
                assert_eq!(cfg.n_frames(len), n);
                assert_eq!(cfg.n_frames(len - 1), n - 1);
            }
        }
    }

    #[test]
    fn short_signal_is_rejected() {
        let w = Waveform::zeros(255, 8000);
        assert!(matches!(
            stft(&w, &StftConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn sinusoid_at_bin_center_concentrates_energy() {
        let cfg = StftConfig::default();
        let bin = 20;
        let f = bin as f64 * 8000.0 / 256.0;
        let x: Vec<f64> = (0..4000)
            .map(|t| (2.0 * PI * f * t as f64 / 8000.0).sin())
            .collect();
        let s = stft(&Waveform::new(x, 8000).unwrap(), &cfg).unwrap();
        for frame in 2..s.n_frames() - 2 {
            let row = s.bins.row(frame);
            let peak = (0..row.len())
                .max_by(|&a, &b| row[a].norm().total_cmp(&row[b].norm()))
                .unwrap();
            assert_eq!(peak, bin);
            let total: f64 = row.iter().map(|c| c.norm_sqr()).sum();
            let near: f64 = (bin - 1..=bin + 1).map(|k| row[k].norm_sqr()).sum();
            assert!(near / total > 0.99);
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let cfg = StftConfig::default();
        let s = stft(&Waveform::zeros(1000, 8000), &cfg).unwrap();
        assert!(s.bins.iter().all(|c| c.norm() == 0.0));
        let w = istft(&s).unwrap();
        assert!(w.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stft_is_homogeneous() {
        let cfg = StftConfig::default();
        let w = noise(8000, 1);
        let a = stft(&w, &cfg).unwrap();
        let b = stft(&w.scaled(3.7), &cfg).unwrap();
        let max_ref = a.bins.iter().map(|c| c.norm()).fold(0.0, f64::max);
        for (x, y) in a.bins.iter().zip(b.bins.iter()) {
            assert!((x * 3.7 - y).norm() <= 1e-12 * max_ref * 3.7);
        }
    }

    #[test]
    fn white_noise_reconstructs() {
        let cfg = StftConfig::default();
        let w = noise(16000, 2);
        let r = istft(&stft(&w, &cfg).unwrap()).unwrap();
        assert_eq!(r.len(), w.len());
        let err = w
            .samples()
            .iter()
            .zip(r.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
    }

    #[test]
    fn ri_round_trip_is_exact() {
        let cfg = StftConfig::default();
        let s = stft(&noise(3000, 3), &cfg).unwrap();
        assert_eq!(from_ri(&to_ri(&s)).unwrap(), s);
    }

    #[test]
    fn real_spectrum_has_zero_imag_plane() {
        let cfg = StftConfig::default();
        let mut s = stft(&noise(3000, 4), &cfg).unwrap();
        s.bins.mapv_inplace(|c| Complex64::new(c.re, 0.0));
        let ri = to_ri(&s);
        assert!(ri.planes.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn from_ri_rejects_wrong_channel_count() {
        let cfg = StftConfig::default();
        let mut ri = to_ri(&stft(&noise(3000, 5), &cfg).unwrap());
        ri.planes = Array3::zeros((3, ri.n_frames(), ri.n_bins()));
        assert!(matches!(from_ri(&ri), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn istft_rejects_inconsistent_spectrogram() {
        let cfg = StftConfig::default();
        let mut s = stft(&noise(3000, 6), &cfg).unwrap();
        s.signal_len = 10_000;
        assert!(istft(&s).is_err());
    }

    #[test]
    fn non_cola_config_is_rejected() {
        assert!(StftConfig::new(256, 96).is_err());
        assert!(StftConfig::new(256, 128).is_ok());
        assert!(StftConfig::new(256, 64).is_ok());
    }

    #[test]
    fn quarter_hop_reconstructs() {
        let cfg = StftConfig::new(256, 64).unwrap();
        let w = noise(5000, 7);
        let r = istft(&stft(&w, &cfg).unwrap()).unwrap();
        let err = w
            .samples()
            .iter()
            .zip(r.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        // <synthesis(X), g> == <X, synthesis_adjoint(g)> with X split into Re/Im
        let cfg = StftConfig::default();
        let len = 2000;
        let n_frames = cfg.n_frames(len);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array2::from_shape_fn((n_frames, cfg.n_bins()), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let g: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = synthesis(x.view(), &cfg, len);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let (re, im) = synthesis_adjoint(&g, &cfg, n_frames);
        let rhs: f64 = x
            .indexed_iter()
            .map(|((f, k), c)| c.re * re[[f, k]] + c.im * im[[f, k]])
            .sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn resample_preserves_low_frequency_tone() {
        let f = 440.0;
        let x: Vec<f64> = (0..8000)
            .map(|t| (2.0 * PI * f * t as f64 / 8000.0).sin())
            .collect();
        let y = resample(&Waveform::new(x, 8000).unwrap(), 10000).unwrap();
        assert_eq!(y.len(), 10000);
        for t in 500..9500 {
            let expect = (2.0 * PI * f * t as f64 / 10000.0).sin();
            assert!((y.samples()[t] - expect).abs() < 1e-2, "t={t}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn stft_round_trip_prop(x in proptest::collection::vec(-1.0f64..1.0, 256..3000)) {
            let w = Waveform::new(x.clone(), 8000).unwrap();
            let cfg = StftConfig::default();
            proptest::prop_assert!(stft(&w.truncated(255), &cfg).is_err());
            let back = istft(&from_ri(&to_ri(&stft(&w, &cfg).unwrap())).unwrap()).unwrap();
            proptest::prop_assert_eq!(back.len(), x.len());
            for (a, b) in back.samples().iter().zip(&x) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
