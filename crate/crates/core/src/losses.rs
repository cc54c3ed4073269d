//! Training objectives: SI-SDR, the multi-output extraction loss, the triplet
//! embedding loss, and the warm-up gated total.
//!
//! Plain functions on slices serve as references and for reporting; the
//! `graph_*` variants build the same quantities inside an autodiff graph.

use serde::{Deserialize, Serialize};

use crate::autograd::{cosine_distance_with_grad, si_sdr_with_grad};
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub margin: f64,
    /// First optimizer step at which the triplet term is active.
    pub warmup_steps: u64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            margin: 0.5,
            warmup_steps: 200,
            epsilon: EPSILON,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.margin >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "loss config needs alpha >= 0, margin >= 0, epsilon > 0 (got {}, {}, {})",
                self.alpha, self.margin, self.epsilon
            )));
        }
        Ok(())
    }

    /// Value of the warm-up indicator at `step`.
    pub fn triplet_active(&self, step: u64) -> bool {
        step >= self.warmup_steps
    }
}

/// SI-SDR in dB of `est` against `target`.
pub fn si_sdr(target: &[f64], est: &[f64]) -> Result<f64> {
    si_sdr_eps(target, est, EPSILON)
}

pub fn si_sdr_eps(target: &[f64], est: &[f64], eps: f64) -> Result<f64> {
    if target.len() != est.len() {
        return Err(Error::invalid(format!(
            "si_sdr: lengths differ ({} vs {})",
            target.len(),
            est.len()
        )));
    }
    if target.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("si_sdr: reference is identically zero"));
    }
    Ok(si_sdr_with_grad(target, est, eps).0)
}

/// `1 - <a,b> / (|a||b|)`, with the norm product clamped to at least epsilon.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine_distance: widths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_distance_with_grad(a, b, EPSILON).0)
}

/// Hinge on precomputed distances: `max(cd_ap - cd_an + margin, 0)`.
pub fn triplet_from_distances(cd_ap: f64, cd_an: f64, margin: f64) -> f64 {
    (cd_ap - cd_an + margin).max(0.0)
}

pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    let ap = cosine_distance(anchor, positive)?;
    let an = cosine_distance(anchor, negative)?;
    Ok(triplet_from_distances(ap, an, margin))
}

/// Which stage-1 estimates receive an SI-SDR term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageOneTerms {
    /// Only the last iteration's estimate.
    Final,
    /// Every iteration's estimate.
    All,
}

fn supervised<T>(stage1: &[T], terms: StageOneTerms) -> Result<&[T]> {
    if stage1.is_empty() {
        return Err(Error::Contract("extraction loss needs at least one stage-1 output".into()));
    }
    Ok(match terms {
        StageOneTerms::All => stage1,
        StageOneTerms::Final => &stage1[stage1.len() - 1..],
    })
}

/// Negated sum of SI-SDR over the supervised stage-1 estimates (against the
/// reverberant target) plus the stage-2 estimate (against the dry target).
pub fn extraction_loss(
    reverberant: &[f64],
    dry: &[f64],
    stage1: &[Vec<f64>],
    stage2: &[f64],
    terms: StageOneTerms,
) -> Result<f64> {
    let mut total = 0.0;
    for est in supervised(stage1, terms)? {
        total += si_sdr(reverberant, est)?;
    }
    total += si_sdr(dry, stage2)?;
    Ok(-total)
}

/// Extraction and triplet losses for both reference roles of one mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoleLosses {
    pub extraction_d: f64,
    pub extraction_i: f64,
    /// `None` when the configuration has no triplet term at all.
    pub triplet: Option<(f64, f64)>,
}

/// `(L_d + L_i)/2 + alpha * 1[step >= warmup] * (T_d + T_i)/2`.
pub fn total_loss(parts: &RoleLosses, cfg: &LossConfig, step: u64) -> f64 {
    let sisdr = (parts.extraction_d + parts.extraction_i) / 2.0;
    sisdr + triplet_contribution(parts, cfg, step)
}

/// The gated triplet part of [`total_loss`].
pub fn triplet_contribution(parts: &RoleLosses, cfg: &LossConfig, step: u64) -> f64 {
    match parts.triplet {
        Some((td, ti)) if cfg.triplet_active(step) => cfg.alpha * (td + ti) / 2.0,
        _ => 0.0,
    }
}

/// Per-item negated extraction loss `[B]` for waveform estimates `[B, T]`.
pub fn graph_extraction_loss(
    g: &Graph,
    reverberant: &Tensor,
    dry: &Tensor,
    stage1: &[Var],
    stage2: Var,
    terms: StageOneTerms,
    eps: f64,
) -> Result<Var> {
    let mut acc = g.si_sdr(dry, stage2, eps);
    for &est in supervised(stage1, terms)? {
        let v = g.si_sdr(reverberant, est, eps);
        acc = g.add(acc, v);
    }
    Ok(g.scale(acc, -1.0))
}

/// Per-item triplet hinge `[B]` on embeddings `[B, D]`.
pub fn graph_triplet(g: &Graph, anchor: Var, positive: Var, negative: Var, margin: f64, eps: f64) -> Var {
    let ap = g.cosine_distance(anchor, positive, eps);
    let an = g.cosine_distance(anchor, negative, eps);
    let d = g.sub(ap, an);
    let shifted = g.add_scalar(d, margin);
    g.hinge(shifted)
}

/// Averages a per-item quantity `[B]` over a role-paired batch: even rows hold
/// the desired-speaker role and odd rows the interference role of the same
/// mixture, and the result is `(mean_d + mean_i) / 2`.
pub fn graph_role_mean(g: &Graph, per_item: Var) -> Result<Var> {
    let n = g.shape(per_item)[0];
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "batch of {n} items does not pair each mixture with both reference roles"
        )));
    }
    let even: Vec<usize> = (0..n).step_by(2).collect();
    let odd: Vec<usize> = (1..n).step_by(2).collect();
    let d = g.select(per_item, &even);
    let d = g.mean(d);
    let i = g.select(per_item, &odd);
    let i = g.mean(i);
    let s = g.add(d, i);
    Ok(g.scale(s, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use ndarray::{Array2, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Textbook evaluation with no epsilon anywhere.
    fn direct_si_sdr(s: &[f64], e: &[f64]) -> f64 {
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let beta = dot(e, s) / dot(s, s);
        let proj: Vec<f64> = s.iter().map(|v| beta * v).collect();
        let resid: Vec<f64> = proj.iter().zip(e).map(|(p, v)| p - v).collect();
        10.0 * (dot(&proj, &proj) / dot(&resid, &resid)).log10()
    }

    #[test]
    fn si_sdr_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = rand_vec(&mut rng, 300);
            let n = rand_vec(&mut rng, 300);
            let e: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + 0.4 * b).collect();
            let v = si_sdr(&s, &e).unwrap();
            assert!((v - direct_si_sdr(&s, &e)).abs() < 1e-9);
        }
    }

    #[test]
    fn si_sdr_edge_cases() {
        let s: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
        let scaled: Vec<f64> = s.iter().map(|v| 2.5 * v).collect();
        assert!(si_sdr(&s, &scaled).unwrap() >= 60.0);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_eq!(si_sdr(&s, &neg).unwrap(), si_sdr(&s, &s).unwrap());
        assert!(si_sdr(&vec![0.0; 100], &s).is_err());
        assert!(si_sdr(&s, &s[..50]).is_err());
    }

    #[test]
    fn cosine_distance_cases() {
        let v = [1.0, -2.0, 0.5];
        assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-15);
        let n: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_distance(&v, &n).unwrap() - 2.0).abs() < 1e-15);
        assert!(cosine_distance(&v, &v[..2]).is_err());
        assert!(cosine_distance(&[0.0; 3], &v).unwrap().is_finite());
    }

    #[test]
    fn triplet_hand_cases() {
        assert_eq!(triplet_from_distances(0.8, 0.2, 0.5), 1.1);
        assert_eq!(triplet_from_distances(0.0, 1.0, 0.5), 0.0);
    }

    #[test]
    fn triplet_gradient_moves_anchor_toward_positive() {
        let a0 = [1.0, 0.2];
        let p = [0.0, 1.0];
        let n = [1.0, 0.0];
        let g = Graph::new(Mode::Train);
        let a = g.input(Tensor::from_shape_vec(IxDyn(&[1, 2]), a0.to_vec()).unwrap());
        let pv = g.constant(Tensor::from_shape_vec(IxDyn(&[1, 2]), p.to_vec()).unwrap());
        let nv = g.constant(Tensor::from_shape_vec(IxDyn(&[1, 2]), n.to_vec()).unwrap());
        let t = graph_triplet(&g, a, pv, nv, 0.5, EPSILON);
        let loss = g.sum(t);
        let grad = g.backward(loss).of(a).unwrap().clone();
        let a1: Vec<f64> = a0.iter().zip(grad.iter()).map(|(x, d)| x - 0.1 * d).collect();
        assert!(cosine_distance(&a1, &p).unwrap() < cosine_distance(&a0, &p).unwrap());
    }

    #[test]
    fn extraction_loss_sums_the_supervised_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rev = rand_vec(&mut rng, 200);
        let dry = rand_vec(&mut rng, 200);
        let s1: Vec<Vec<f64>> = (0..2)
            .map(|_| rev.iter().map(|v| v + 0.5 * rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let s2: Vec<f64> = dry.iter().map(|v| v + 0.3 * rng.gen_range(-1.0..1.0)).collect();
        let manual = -(direct_si_sdr(&rev, &s1[0]) + direct_si_sdr(&rev, &s1[1]) + direct_si_sdr(&dry, &s2));
        let all = extraction_loss(&rev, &dry, &s1, &s2, StageOneTerms::All).unwrap();
        assert!((all - manual).abs() < 1e-9);
        let fin = extraction_loss(&rev, &dry, &s1, &s2, StageOneTerms::Final).unwrap();
        let manual_fin = -(direct_si_sdr(&rev, &s1[1]) + direct_si_sdr(&dry, &s2));
        assert!((fin - manual_fin).abs() < 1e-9);
        assert!(matches!(
            extraction_loss(&rev, &dry, &[], &s2, StageOneTerms::All),
            Err(Error::Contract(_))
        ));

        // graph version agrees with the plain one
        let g = Graph::new(Mode::Eval);
        let row = |v: &Vec<f64>| Tensor::from_shape_vec(IxDyn(&[1, 200]), v.clone()).unwrap();
        let est: Vec<Var> = s1.iter().map(|v| g.constant(row(v))).collect();
        let l = graph_extraction_loss(&g, &row(&rev), &row(&dry), &est, g.constant(row(&s2)), StageOneTerms::All, EPSILON)
            .unwrap();
        assert!((g.value(l)[0] - all).abs() < 1e-9);
    }

    #[test]
    fn total_loss_gating() {
        let cfg = LossConfig {
            warmup_steps: 10,
            ..Default::default()
        };
        let parts = RoleLosses {
            extraction_d: -12.0,
            extraction_i: -8.0,
            triplet: Some((0.3, 0.7)),
        };
        assert_eq!(total_loss(&parts, &cfg, 9), -10.0);
        assert!((total_loss(&parts, &cfg, 10) - (-10.0 + 2.0 * 0.5)).abs() < 1e-15);
        let zero_alpha = LossConfig { alpha: 0.0, ..cfg };
        assert_eq!(total_loss(&parts, &zero_alpha, 50), total_loss(&parts, &cfg, 0));
    }

    #[test]
    fn role_mean_needs_pairs() {
        let g = Graph::new(Mode::Eval);
        let v = g.constant(Array2::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 6.0]).unwrap().into_dyn());
        let flat = g.reshape(v, &[4]);
        let m = graph_role_mean(&g, flat).unwrap();
        assert_eq!(g.scalar(m), 3.0);
        let odd = g.narrow(flat, 0, 0, 3);
        assert!(graph_role_mean(&g, odd).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn signal(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-1.0f64..1.0, len)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn si_sdr_ignores_gain(s in signal(8..200), e in signal(8..200), g in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0]) {
                let n = s.len().min(e.len());
                let (s, e) = (&s[..n], &e[..n]);
                prop_assume!(s.iter().any(|v| v.abs() > 1e-3) && e.iter().any(|v| v.abs() > 1e-3));
                let scaled: Vec<f64> = e.iter().map(|v| v * g).collect();
                prop_assert!((si_sdr(s, e).unwrap() - si_sdr(s, &scaled).unwrap()).abs() < 1e-6);
            }

            #[test]
            fn cosine_distance_is_bounded(a in signal(4..5), b in signal(4..5)) {
                let d = cosine_distance(&a, &b).unwrap();
                prop_assert!((-1e-12..=2.0 + 1e-12).contains(&d));
            }

            #[test]
            fn triplet_hinge(a in signal(6..7), p in signal(6..7), n in signal(6..7), m in 0.0f64..1.0) {
                let t = triplet_loss(&a, &p, &n, m).unwrap();
                let (dp, dn) = (cosine_distance(&a, &p).unwrap(), cosine_distance(&a, &n).unwrap());
                prop_assert!(t >= 0.0);
                prop_assert_eq!(t, triplet_from_distances(dp, dn, m));
                if dp - dn + m <= 0.0 {
                    prop_assert_eq!(t, 0.0);
                }
            }
        }
    }
}
