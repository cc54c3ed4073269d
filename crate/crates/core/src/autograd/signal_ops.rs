use std::f64::consts::LN_10;

use ndarray::{s, Array2, Axis, Ix2, Ix4, IxDyn};
use rustfft::num_complex::Complex64;

use super::{Graph, Tensor, Var};
use crate::signal::{synthesis, synthesis_adjoint, StftConfig};

/// Value and gradient (with respect to the estimate) of SI-SDR in dB.
///
/// `eps` clamps the target energy and both terms of the ratio from below, so
/// the value equals the textbook expression whenever neither is degenerate.
pub(crate) fn si_sdr_with_grad(target: &[f64], est: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let a: f64 = target.iter().zip(est).map(|(s, e)| s * e).sum();
    let p = target.iter().map(|s| s * s).sum::<f64>().max(eps);
    let q: f64 = est.iter().map(|e| e * e).sum();
    // |beta s|^2 with beta = a / p, and the residual energy |beta s - est|^2
    let proj = a * a / p;
    let resid = q - proj;
    let (num, num_active) = if proj > eps { (proj, true) } else { (eps, false) };
    let (den, den_active) = if resid > eps { (resid, true) } else { (eps, false) };
    let value = 10.0 * (num / den).log10();
    let c = 10.0 / LN_10;
    let dproj = 2.0 * a / p;
    let grad = target
        .iter()
        .zip(est)
        .map(|(&s, &e)| {
            let dn = if num_active { dproj * s / num } else { 0.0 };
            let dd = if den_active { (2.0 * e - dproj * s) / den } else { 0.0 };
            c * (dn - dd)
        })
        .collect();
    (value, grad)
}

/// Cosine distance `1 - <a,b> / max(|a||b|, eps)` and its gradients.
pub(crate) fn cosine_distance_with_grad(a: &[f64], b: &[f64], eps: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = na * nb;
    if d <= eps {
        let ga = b.iter().map(|y| -y / eps).collect();
        let gb = a.iter().map(|x| -x / eps).collect();
        return (1.0 - dot / eps, ga, gb);
    }
    let cos = dot / d;
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(y / d - cos * x / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(x / d - cos * y / (nb * nb)))
        .collect();
    (1.0 - cos, ga, gb)
}

impl Graph {
    /// Inverse STFT of RI planes `[B, 2, N, K]` into waveforms `[B, len]`.
    pub fn istft(&self, x: Var, cfg: StftConfig, len: usize) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().unwrap();
        let (bsz, ch, n, k) = x4.dim();
        assert_eq!(ch, 2, "istft expects RI planes");
        assert_eq!(k, cfg.n_bins(), "istft: bin count");
        let mut out = Array2::<f64>::zeros((bsz, len));
        for b in 0..bsz {
            let re = x4.slice(s![b, 0, .., ..]);
            let im = x4.slice(s![b, 1, .., ..]);
            let mut bins = Array2::<Complex64>::zeros((n, k));
            ndarray::Zip::from(&mut bins)
                .and(&re)
                .and(&im)
                .for_each(|c, &r, &i| *c = Complex64::new(r, i));
            let y = synthesis(bins.view(), &cfg, len);
            out.row_mut(b).assign(&ndarray::ArrayView1::from(&y));
        }
        self.push(
            out.into_dyn(),
            &[x],
            Some(Box::new(move |g, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = ndarray::Array4::<f64>::zeros((bsz, 2, n, k));
                for b in 0..bsz {
                    let row = g2.row(b).to_vec();
                    let (re, im) = synthesis_adjoint(&row, &cfg, n);
                    gx.slice_mut(s![b, 0, .., ..]).assign(&re);
                    gx.slice_mut(s![b, 1, .., ..]).assign(&im);
                }
                vec![Some(gx.into_dyn())]
            })),
        )
    }

    /// Row-wise SI-SDR in dB of estimates `[B, T]` against fixed targets `[B, T]`.
    pub fn si_sdr(&self, target: &Tensor, est: Var, eps: f64) -> Var {
        let ve = self.value(est);
        assert_eq!(ve.shape(), target.shape(), "si_sdr: shape mismatch");
        let e2 = ve.view().into_dimensionality::<Ix2>().unwrap();
        let t2 = target.view().into_dimensionality::<Ix2>().unwrap();
        let bsz = e2.nrows();
        let mut values = Vec::with_capacity(bsz);
        let mut grads = Array2::<f64>::zeros(e2.raw_dim());
        for b in 0..bsz {
            let (v, gr) = si_sdr_with_grad(&t2.row(b).to_vec(), &e2.row(b).to_vec(), eps);
            values.push(v);
            grads.row_mut(b).assign(&ndarray::ArrayView1::from(&gr));
        }
        self.push(
            Tensor::from_shape_vec(IxDyn(&[bsz]), values).unwrap(),
            &[est],
            Some(Box::new(move |g, _| {
                let mut d = grads.clone();
                for (b, mut row) in d.axis_iter_mut(Axis(0)).enumerate() {
                    row *= g[b];
                }
                vec![Some(d.into_dyn())]
            })),
        )
    }

    /// Row-wise cosine distance of `[B, D]` pairs.
    pub fn cosine_distance(&self, a: Var, b: Var, eps: f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "cosine_distance: shape mismatch");
        let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
        let bsz = a2.nrows();
        let mut values = Vec::with_capacity(bsz);
        let mut ga = Array2::<f64>::zeros(a2.raw_dim());
        let mut gb = Array2::<f64>::zeros(b2.raw_dim());
        for i in 0..bsz {
            let (v, da, db) = cosine_distance_with_grad(&a2.row(i).to_vec(), &b2.row(i).to_vec(), eps);
            values.push(v);
            ga.row_mut(i).assign(&ndarray::ArrayView1::from(&da));
            gb.row_mut(i).assign(&ndarray::ArrayView1::from(&db));
        }
        self.push(
            Tensor::from_shape_vec(IxDyn(&[bsz]), values).unwrap(),
            &[a, b],
            Some(Box::new(move |g, need| {
                let scale = |m: &Array2<f64>| {
                    let mut d = m.clone();
                    for (i, mut row) in d.axis_iter_mut(Axis(0)).enumerate() {
                        row *= g[i];
                    }
                    d.into_dyn()
                };
                vec![need[0].then(|| scale(&ga)), need[1].then(|| scale(&gb))]
            })),
        )
    }

    /// Elementwise `max(x, 0)` written as a hinge; identical to relu but named
    /// for loss code. The subgradient at zero is zero.
    pub fn hinge(&self, x: Var) -> Var {
        self.relu(x)
    }
}
