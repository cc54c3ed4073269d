//! Shoebox room simulation with the image-source method.
//!
//! Rooms are drawn from uniform ranges: walls `U[4,8] x U[4,8] x U[2.5,3]`
//! meters, T60 `U[0.2,0.6]` s, microphone near the horizontal center at 1.5 m
//! height, and each source at azimuth `U[0,180]` degrees and `1 + U[-0.5,0.5]`
//! meters from the microphone in the microphone's horizontal plane.
//!
//! Wall absorption is uniform over all six surfaces. It starts from Sabine's
//! formula and is then refined against the image-source energy decay so the
//! measured T60 matches the request. Fractional arrival times are rendered
//! with an 81-tap windowed sinc, and the response is high-passed at 100 Hz.

use std::f64::consts::{LN_10, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::DEFAULT_SAMPLE_RATE;

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const MIC_HEIGHT: f64 = 1.5;
pub const SOURCE_HEIGHT: f64 = 1.5;

pub const ROOM_XY_RANGE: (f64, f64) = (4.0, 8.0);
pub const ROOM_Z_RANGE: (f64, f64) = (2.5, 3.0);
pub const T60_RANGE: (f64, f64) = (0.2, 0.6);
pub const MIC_JITTER: f64 = 0.5;
pub const ANGLE_RANGE: (f64, f64) = (0.0, 180.0);
pub const DISTANCE_RANGE: (f64, f64) = (0.5, 1.5);

/// Source azimuth (degrees) and distance (meters) relative to the microphone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourcePlacement {
    pub angle_deg: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Room extent along x, y, z in meters.
    pub dims: [f64; 3],
    pub t60: f64,
    pub mic_pos: [f64; 3],
    pub source: SourcePlacement,
}

fn inside(dims: &[f64; 3], p: &[f64; 3]) -> bool {
    p.iter().zip(dims).all(|(&v, &d)| v > 0.0 && v < d)
}

impl RoomSpec {
    /// Cartesian position of a source placed relative to the microphone.
    pub fn position_of(&self, placement: &SourcePlacement) -> [f64; 3] {
        let th = placement.angle_deg.to_radians();
        [
            self.mic_pos[0] + placement.distance * th.cos(),
            self.mic_pos[1] + placement.distance * th.sin(),
            SOURCE_HEIGHT,
        ]
    }

    pub fn source_position(&self) -> [f64; 3] {
        self.position_of(&self.source)
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        inside(&self.dims, p)
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    /// Uniform pressure reflection coefficient from Sabine's formula.
    ///
    /// Returns 0 (anechoic) when the requested T60 is not reachable.
    pub fn reflection_coefficient(&self) -> f64 {
        if self.t60 <= 0.0 {
            return 0.0;
        }
        let alpha = 24.0 * LN_10 * self.volume() / (SPEED_OF_SOUND * self.surface() * self.t60);
        if alpha >= 1.0 {
            0.0
        } else {
            (1.0 - alpha).sqrt()
        }
    }
}

/// Draws a source placement, retrying until the source lies inside the room.
pub fn sample_placement<R: Rng>(rng: &mut R, dims: &[f64; 3], mic: &[f64; 3]) -> SourcePlacement {
    loop {
        let p = SourcePlacement {
            angle_deg: rng.gen_range(ANGLE_RANGE.0..=ANGLE_RANGE.1),
            distance: rng.gen_range(DISTANCE_RANGE.0..=DISTANCE_RANGE.1),
        };
        let th = p.angle_deg.to_radians();
        let pos = [
            mic[0] + p.distance * th.cos(),
            mic[1] + p.distance * th.sin(),
            SOURCE_HEIGHT,
        ];
        if inside(dims, &pos) {
            return p;
        }
    }
}

/// Draws a room, microphone and one source placement.
pub fn sample_room_with<R: Rng>(rng: &mut R) -> RoomSpec {
    loop {
        let dims = [
            rng.gen_range(ROOM_XY_RANGE.0..=ROOM_XY_RANGE.1),
            rng.gen_range(ROOM_XY_RANGE.0..=ROOM_XY_RANGE.1),
            rng.gen_range(ROOM_Z_RANGE.0..=ROOM_Z_RANGE.1),
        ];
        let t60 = rng.gen_range(T60_RANGE.0..=T60_RANGE.1);
        let mic_pos = [
            dims[0] / 2.0 + rng.gen_range(-MIC_JITTER..=MIC_JITTER),
            dims[1] / 2.0 + rng.gen_range(-MIC_JITTER..=MIC_JITTER),
            MIC_HEIGHT,
        ];
        if !inside(&dims, &mic_pos) {
            continue;
        }
        let source = sample_placement(rng, &dims, &mic_pos);
        return RoomSpec {
            dims,
            t60,
            mic_pos,
            source,
        };
    }
}

pub fn sample_room(rng_seed: u64) -> RoomSpec {
    sample_room_with(&mut ChaCha8Rng::seed_from_u64(rng_seed))
}

/// Room impulse response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
    /// Sample index of the direct-path arrival.
    pub direct_path_index: usize,
    /// Amplitude of the direct path, `1 / (4 pi r)`.
    pub direct_gain: f64,
}

impl Rir {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RirOptions {
    pub sample_rate: u32,
    pub sound_speed: f64,
    /// Odd length of the fractional-delay kernel.
    pub kernel_taps: usize,
    /// Response length as a multiple of T60.
    pub length_factor: f64,
    /// Upper bound on the response length in seconds.
    pub max_seconds: f64,
    /// Remove the DC build-up of the positive image train.
    pub highpass: bool,
    /// Refine the Sabine reflection coefficient against the image decay.
    pub calibrate: bool,
}

impl Default for RirOptions {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            sound_speed: SPEED_OF_SOUND,
            kernel_taps: 81,
            length_factor: 1.2,
            max_seconds: 2.0,
            highpass: true,
            calibrate: true,
        }
    }
}

const KERNEL_PHASES: usize = 512;

/// Hann-windowed sinc kernels tabulated over fractional delays `[0, 1)`.
struct FractionalDelay {
    half: usize,
    table: Vec<f64>,
}

impl FractionalDelay {
    fn new(taps: usize) -> Self {
        let half = taps / 2;
        let width = taps as f64 + 1.0;
        let mut table = Vec::with_capacity((KERNEL_PHASES + 1) * taps);
        for p in 0..=KERNEL_PHASES {
            let frac = p as f64 / KERNEL_PHASES as f64;
            for j in 0..taps {
                let t = j as f64 - half as f64 - frac;
                let sinc = if t.abs() < 1e-12 {
                    1.0
                } else {
                    (PI * t).sin() / (PI * t)
                };
                let w = 0.5 * (1.0 + (2.0 * PI * t / width).cos());
                table.push(sinc * w);
            }
        }
        Self { half, table }
    }

    fn taps(&self) -> usize {
        2 * self.half + 1
    }

    /// Adds `gain * kernel` centered at fractional sample `delay`.
    fn splat(&self, out: &mut [f64], delay: f64, gain: f64) {
        let base = delay.floor();
        let phase = ((delay - base) * KERNEL_PHASES as f64).round() as usize;
        let n = self.taps();
        let kernel = &self.table[phase * n..(phase + 1) * n];
        let start = base as isize - self.half as isize;
        for (j, &k) in kernel.iter().enumerate() {
            let idx = start + j as isize;
            if idx >= 0 && (idx as usize) < out.len() {
                out[idx as usize] += gain * k;
            }
        }
    }
}

fn check_geometry(room: &RoomSpec, source: &[f64; 3]) -> Result<()> {
    if room.dims.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
        return Err(Error::invalid("room dimensions must be positive"));
    }
    if !(room.t60.is_finite() && room.t60 >= 0.0) {
        return Err(Error::invalid("T60 must be non-negative"));
    }
    if !room.contains(&room.mic_pos) {
        return Err(Error::invalid("microphone lies outside the room"));
    }
    if !room.contains(source) {
        return Err(Error::invalid("source lies outside the room"));
    }
    if distance(source, &room.mic_pos) < 1e-3 {
        return Err(Error::invalid("source coincides with the microphone"));
    }
    Ok(())
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn generate_rir(room: &RoomSpec, source_pos: &[f64; 3]) -> Result<Rir> {
    generate_rir_with(room, source_pos, &RirOptions::default())
}

/// Image-source room impulse response for a source at `source_pos`.
pub fn generate_rir_with(room: &RoomSpec, source_pos: &[f64; 3], opts: &RirOptions) -> Result<Rir> {
    check_geometry(room, source_pos)?;
    let fs = opts.sample_rate as f64;
    let c = opts.sound_speed;
    let beta = room.reflection_coefficient();
    let kernel = FractionalDelay::new(opts.kernel_taps);
    let direct = distance(source_pos, &room.mic_pos);
    let direct_delay = direct / c * fs;

    let len = response_len(room.t60, direct_delay, opts);
    let mut taps = vec![0.0; len];
    let max_dist = len as f64 / fs * c;

    if beta == 0.0 {
        splat_image(&kernel, &mut taps, direct, 1.0, c, fs);
    } else {
        let beta = if opts.calibrate {
            calibrate_reflection(room, source_pos, beta, max_dist, len, opts)
        } else {
            beta
        };
        let max_refl = max_reflections(room, max_dist);
        let beta_pow: Vec<f64> = (0..=max_refl).map(|k| beta.powi(k as i32)).collect();
        for_each_image(room, source_pos, max_dist, |d, refl| {
            splat_image(&kernel, &mut taps, d, beta_pow[refl], c, fs);
        });
    }

    if opts.highpass {
        highpass(&mut taps, fs);
    }

    Ok(Rir {
        taps,
        sample_rate: opts.sample_rate,
        direct_path_index: direct_delay.round() as usize,
        direct_gain: 1.0 / (4.0 * PI * direct),
    })
}

fn max_reflections(room: &RoomSpec, max_dist: f64) -> usize {
    room.dims
        .iter()
        .map(|&d| 2 * ((max_dist / (2.0 * d)).ceil() as usize + 1) + 1)
        .sum()
}

/// Visits every image source within `max_dist` of the microphone with its
/// distance and total number of wall reflections.
fn for_each_image(room: &RoomSpec, src: &[f64; 3], max_dist: f64, mut visit: impl FnMut(f64, usize)) {
    let mic = room.mic_pos;
    let axis_terms = |axis: usize| -> Vec<(f64, usize)> {
        let reach = (max_dist / (2.0 * room.dims[axis])).ceil() as i64 + 1;
        let mut v = Vec::new();
        for n in -reach..=reach {
            for q in 0..=1i64 {
                let offset =
                    (1 - 2 * q) as f64 * src[axis] + 2.0 * n as f64 * room.dims[axis] - mic[axis];
                v.push((offset, ((n - q).abs() + n.abs()) as usize));
            }
        }
        v
    };
    let xs = axis_terms(0);
    let ys = axis_terms(1);
    let zs = axis_terms(2);
    let max_sq = max_dist * max_dist;
    for &(dx, rx) in &xs {
        let dx2 = dx * dx;
        if dx2 > max_sq {
            continue;
        }
        for &(dy, ry) in &ys {
            let dxy2 = dx2 + dy * dy;
            if dxy2 > max_sq {
                continue;
            }
            for &(dz, rz) in &zs {
                let d2 = dxy2 + dz * dz;
                if d2 <= max_sq {
                    visit(d2.sqrt(), rx + ry + rz);
                }
            }
        }
    }
}

/// Adjusts the reflection coefficient so the decay of the image-source
/// response matches the requested T60.
///
/// Sabine's coefficient is the starting point. In a shoebox with uniform
/// absorption the late response is dominated by images with few reflections,
/// so the uncorrected decay is slower than requested. Image energies are
/// binned by arrival sample and reflection count; the decay curve for any
/// coefficient then follows from the bins, and bisection finds the value whose
/// -5..-25 dB slope gives the requested T60.
fn calibrate_reflection(
    room: &RoomSpec,
    src: &[f64; 3],
    sabine: f64,
    max_dist: f64,
    len: usize,
    opts: &RirOptions,
) -> f64 {
    let fs = opts.sample_rate as f64;
    let n_refl = max_reflections(room, max_dist) + 1;
    let mut hist = vec![0.0; len * n_refl];
    for_each_image(room, src, max_dist, |d, refl| {
        let t = (d / opts.sound_speed * fs) as usize;
        if t < len {
            let g = 1.0 / (4.0 * PI * d);
            hist[t * n_refl + refl] += g * g;
        }
    });
    let decay_t60 = |beta: f64| -> f64 {
        let b2 = beta * beta;
        let pows: Vec<f64> = (0..n_refl).map(|k| b2.powi(k as i32)).collect();
        let energy: Vec<f64> = hist
            .chunks(n_refl)
            .map(|row| row.iter().zip(&pows).map(|(h, p)| h * p).sum())
            .collect();
        schroeder_t60(&energy, fs).unwrap_or(0.0)
    };
    let target = room.t60;
    let (mut lo, mut hi) = if decay_t60(sabine) > target {
        (0.0, sabine)
    } else {
        (sabine, 0.9999)
    };
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if decay_t60(mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Allen-Berkley 100 Hz high-pass.
fn highpass(x: &mut [f64], fs: f64) {
    let w = 2.0 * PI * 100.0 / fs;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y0 = b1 * y1 + b2 * y2 + *v;
        *v = y0 + a1 * y1 + r1 * y2;
        y2 = y1;
        y1 = y0;
    }
}

fn response_len(t60: f64, direct_delay: f64, opts: &RirOptions) -> usize {
    let secs = (opts.length_factor * t60).min(opts.max_seconds);
    ((secs * opts.sample_rate as f64).ceil() as usize)
        .max(direct_delay.ceil() as usize + opts.kernel_taps / 2 + 1)
}

fn splat_image(kernel: &FractionalDelay, taps: &mut [f64], dist: f64, refl_gain: f64, c: f64, fs: f64) {
    let delay = dist / c * fs;
    kernel.splat(taps, delay, refl_gain / (4.0 * PI * dist));
}

/// Response containing only the direct path of `generate_rir` for the same
/// geometry: the arrival delayed and attenuated exactly as in the full RIR.
pub fn direct_path_rir(room: &RoomSpec, source_pos: &[f64; 3]) -> Result<Rir> {
    let opts = RirOptions::default();
    let anechoic = RoomSpec { t60: 0.0, ..*room };
    let mut rir = generate_rir_with(&anechoic, source_pos, &opts)?;
    let delay = distance(source_pos, &room.mic_pos) / opts.sound_speed * opts.sample_rate as f64;
    let full_len = response_len(room.t60, delay, &opts);
    rir.taps.resize(full_len.max(rir.taps.len()), 0.0);
    Ok(rir)
}

/// Schroeder energy decay curve in dB, normalized to 0 dB at the start.
pub fn energy_decay_curve(taps: &[f64]) -> Vec<f64> {
    let energy: Vec<f64> = taps.iter().map(|v| v * v).collect();
    decay_curve_db(&energy)
}

fn decay_curve_db(energy: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut edc: Vec<f64> = energy
        .iter()
        .rev()
        .map(|e| {
            acc += e;
            acc
        })
        .collect();
    edc.reverse();
    let total = edc.first().copied().unwrap_or(0.0);
    edc.iter()
        .map(|&e| {
            if total > 0.0 && e > 0.0 {
                10.0 * (e / total).log10()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// Reverberation time from a least-squares fit of the -5..-25 dB segment of
/// the Schroeder decay curve, extrapolated to 60 dB.
pub fn measure_t60(r: &Rir) -> Result<f64> {
    let energy: Vec<f64> = r.taps.iter().map(|v| v * v).collect();
    schroeder_t60(&energy, r.sample_rate as f64)
}

fn schroeder_t60(energy: &[f64], fs: f64) -> Result<f64> {
    let edc = decay_curve_db(energy);
    if edc.is_empty() || !edc[0].is_finite() {
        return Err(Error::Measurement("impulse response has no energy".into()));
    }
    let start = edc.iter().position(|&v| v <= -5.0);
    let end = edc.iter().position(|&v| v <= -25.0);
    let (start, end) = match (start, end) {
        (Some(s), Some(e)) if e > s && edc[e].is_finite() && edc[s].is_finite() => (s, e),
        _ => {
            return Err(Error::Measurement(
                "decay curve lacks a usable -5..-25 dB range".into(),
            ))
        }
    };
    let pts: Vec<(f64, f64)> = (start..=end)
        .filter(|&i| edc[i].is_finite())
        .map(|i| (i as f64 / fs, edc[i]))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Measurement(
            "too few samples in the decay range".into(),
        ));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(Error::Measurement("decay slope is not negative".into()));
    }
    Ok(-60.0 / slope)
}

/// Full linear convolution.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let n = x.len() + h.len() - 1;
    if x.len().min(h.len()) < 64 {
        let mut out = vec![0.0; n];
        for (i, &a) in x.iter().enumerate() {
            for (j, &b) in h.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        return out;
    }
    fft_convolve(x, h, n)
}

fn fft_convolve(x: &[f64], h: &[f64], n: usize) -> Vec<f64> {
    use rustfft::num_complex::Complex64;
    let size = n.next_power_of_two();
    let mut planner = rustfft::FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let to_buf = |v: &[f64]| {
        let mut b = vec![Complex64::new(0.0, 0.0); size];
        for (o, &s) in b.iter_mut().zip(v) {
            o.re = s;
        }
        b
    };
    let mut a = to_buf(x);
    let mut b = to_buf(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..n].iter().map(|c| c.re / size as f64).collect()
}
