//! Projection-based SDR and SIR with time-invariant FIR distortion filters.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::clamp_db;
use crate::error::{Error, Result};

/// Length of the allowed distortion filter.
pub const DEFAULT_TAPS: usize = 512;

/// Cross-correlation `r[k] = sum_t a[t] b[t + k]` for `k` in `0..lags`,
/// with both signals treated as zero outside their support.
fn xcorr(planner: &mut FftPlanner<f64>, a: &[f64], b: &[f64], lags: usize) -> Vec<f64> {
    let n = (a.len() + b.len() + lags).next_power_of_two();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let load = |x: &[f64]| {
        let mut v = vec![Complex64::new(0.0, 0.0); n];
        for (d, &s) in v.iter_mut().zip(x) {
            d.re = s;
        }
        v
    };
    let mut fa = load(a);
    let mut fb = load(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    let mut prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x.conj() * y).collect();
    inv.process(&mut prod);
    prod[..lags].iter().map(|c| c.re / n as f64).collect()
}

/// Gram matrix and right-hand side for projecting `est` onto delayed copies
/// (0..taps samples) of every reference. References are zero padded by
/// `taps - 1` samples, as is the estimate.
fn normal_equations(refs: &[&[f64]], est: &[f64], taps: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut planner = FftPlanner::new();
    let n = refs.len() * taps;
    let mut g = DMatrix::zeros(n, n);
    let mut d = DVector::zeros(n);
    for (i, a) in refs.iter().enumerate() {
        for (j, b) in refs.iter().enumerate().skip(i) {
            // <a(t - p), b(t - q)> = r_ba[q - p] for q >= p, r_ab[p - q] otherwise
            let r_ab = xcorr(&mut planner, a, b, taps);
            let r_ba = if i == j { r_ab.clone() } else { xcorr(&mut planner, b, a, taps) };
            for p in 0..taps {
                for q in 0..taps {
                    let v = if q >= p { r_ba[q - p] } else { r_ab[p - q] };
                    g[(i * taps + p, j * taps + q)] = v;
                    g[(j * taps + q, i * taps + p)] = v;
                }
            }
        }
        let r = xcorr(&mut planner, a, est, taps);
        for p in 0..taps {
            d[i * taps + p] = r[p];
        }
    }
    (g, d)
}

fn solve(g: DMatrix<f64>, d: &DVector<f64>) -> DVector<f64> {
    match g.clone().cholesky() {
        Some(c) => c.solve(d),
        // Rank deficient reference sets: least-squares via the pseudo-inverse
        // still yields the orthogonal projection.
        None => {
            let svd = g.svd(true, true);
            let tol = svd.singular_values.max() * 1e-12;
            svd.solve(d, tol).expect("svd with u and v")
        }
    }
}

/// Filtered sum `sum_i sum_p c[i, p] ref_i(t - p)` over `len + taps - 1` samples.
fn synthesize(refs: &[&[f64]], coef: &DVector<f64>, taps: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len + taps - 1];
    for (i, r) in refs.iter().enumerate() {
        for p in 0..taps {
            let c = coef[i * taps + p];
            if c == 0.0 {
                continue;
            }
            for (t, &v) in r.iter().enumerate() {
                out[t + p] += c * v;
            }
        }
    }
    out
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    clamp_db(10.0 * (num.max(f64::MIN_POSITIVE) / den.max(f64::MIN_POSITIVE)).log10())
}

/// SDR and SIR (dB, clamped) of `estimate` given the target and the
/// interfering source, with `taps`-long distortion filters.
pub fn eval_sdr_sir_taps(target: &[f64], interference: &[f64], estimate: &[f64], taps: usize) -> Result<(f64, f64)> {
    if target.len() != estimate.len() || interference.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "signal lengths differ: target {}, interference {}, estimate {}",
            target.len(),
            interference.len(),
            estimate.len()
        )));
    }
    if taps == 0 || estimate.is_empty() {
        return Err(Error::invalid("need at least one tap and one sample"));
    }
    if energy(target) == 0.0 || energy(interference) == 0.0 {
        return Err(Error::invalid("target and interference references must be nonzero"));
    }
    let len = estimate.len();
    let mut padded = estimate.to_vec();
    padded.resize(len + taps - 1, 0.0);

    let (g, d) = normal_equations(&[target], estimate, taps);
    let s_target = synthesize(&[target], &solve(g, &d), taps, len);
    let (g, d) = normal_equations(&[target, interference], estimate, taps);
    let p_all = synthesize(&[target, interference], &solve(g, &d), taps, len);

    let e_interf: Vec<f64> = p_all.iter().zip(&s_target).map(|(a, b)| a - b).collect();
    let e_total: Vec<f64> = padded.iter().zip(&s_target).map(|(a, b)| a - b).collect();
    let st = energy(&s_target);
    Ok((ratio_db(st, energy(&e_total)), ratio_db(st, energy(&e_interf))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn correlation_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = noise(&mut rng, 50);
        let b = noise(&mut rng, 50);
        let r = xcorr(&mut FftPlanner::new(), &a, &b, 7);
        for (k, &v) in r.iter().enumerate() {
            let direct: f64 = (0..50 - k).map(|t| a[t] * b[t + k]).sum();
            assert!((v - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn gram_matrix_matches_explicit_delays() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, taps) = (40, 5);
        let a = noise(&mut rng, n);
        let b = noise(&mut rng, n);
        let e = noise(&mut rng, n);
        let (g, d) = normal_equations(&[&a, &b], &e, taps);
        let delayed = |x: &[f64], p: usize| {
            let mut v = vec![0.0; n + taps - 1];
            v[p..p + n].copy_from_slice(x);
            v
        };
        let cols: Vec<Vec<f64>> = [&a, &b].iter().flat_map(|x| (0..taps).map(move |p| delayed(x, p))).collect();
        let mut ep = e.clone();
        ep.resize(n + taps - 1, 0.0);
        for i in 0..2 * taps {
            let di: f64 = cols[i].iter().zip(&ep).map(|(x, y)| x * y).sum();
            assert!((d[i] - di).abs() < 1e-10);
            for j in 0..2 * taps {
                let gij: f64 = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum();
                assert!((g[(i, j)] - gij).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn brute_force_projection_agrees() {
        // Projection through an explicit least-squares solve on the
        // delayed-copy matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, taps) = (300, 8);
        let s = noise(&mut rng, n);
        let i = noise(&mut rng, n);
        let est: Vec<f64> = (0..n).map(|t| s[t] + 0.5 * i[t] + 0.1 * rng.gen_range(-1.0..1.0)).collect();
        let (sdr, sir) = eval_sdr_sir_taps(&s, &i, &est, taps).unwrap();

        let m = n + taps - 1;
        let build = |refs: &[&Vec<f64>]| {
            let mut a = DMatrix::zeros(m, refs.len() * taps);
            for (k, r) in refs.iter().enumerate() {
                for p in 0..taps {
                    for t in 0..n {
                        a[(t + p, k * taps + p)] = r[t];
                    }
                }
            }
            a
        };
        let mut e = DVector::zeros(m);
        for t in 0..n {
            e[t] = est[t];
        }
        let proj = |a: DMatrix<f64>| {
            let svd = a.clone().svd(true, true);
            let c = svd.solve(&e, 1e-12).unwrap();
            a * c
        };
        let st = proj(build(&[&s]));
        let pa = proj(build(&[&s, &i]));
        let sdr_bf = 10.0 * (st.norm_squared() / (&e - &st).norm_squared()).log10();
        let sir_bf = 10.0 * (st.norm_squared() / (&pa - &st).norm_squared()).log10();
        assert!((sdr - sdr_bf).abs() < 1e-6, "{sdr} vs {sdr_bf}");
        assert!((sir - sir_bf).abs() < 1e-6, "{sir} vs {sir_bf}");
    }
}
