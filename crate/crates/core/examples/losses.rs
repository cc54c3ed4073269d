//! The training objective on hand-made signals: SI-SDR, the triplet hinge
//! and the warm-up gate on the combined loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tse::losses::{extraction_loss, si_sdr, total_loss, triplet_loss, LossConfig, RoleLosses, StageOneTerms};

fn main() -> tse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clean: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let hiss: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for k in [0.03, 0.1, 0.3, 1.0] {
        let est: Vec<f64> = clean.iter().zip(&hiss).map(|(s, n)| s + k * n).collect();
        let loud: Vec<f64> = est.iter().map(|v| 5.0 * v).collect();
        println!(
            "noise x{k:<4} SI-SDR {:>6.2} dB, at 5x gain {:>6.2} dB",
            si_sdr(&clean, &est)?,
            si_sdr(&clean, &loud)?
        );
    }

    let anchor = [1.0, 0.2, 0.0];
    let same = [0.9, 0.3, 0.1];
    let other = [-0.2, 1.0, 0.4];
    println!("triplet, well separated: {:.4}", triplet_loss(&anchor, &same, &other, 0.5)?);
    println!("triplet, roles swapped:  {:.4}", triplet_loss(&anchor, &other, &same, 0.5)?);

    let half: Vec<f64> = clean.iter().zip(&hiss).map(|(s, n)| s + 0.2 * n).collect();
    let l = extraction_loss(&clean, &clean, &[half.clone(), half.clone()], &half, StageOneTerms::All)?;
    let parts = RoleLosses {
        extraction_d: l,
        extraction_i: l,
        triplet: Some((0.3, 0.1)),
    };
    let cfg = LossConfig::default();
    for step in [0, cfg.warmup_steps - 1, cfg.warmup_steps] {
        println!("step {step:>3}: total loss {:.3}", total_loss(&parts, &cfg, step));
    }
    Ok(())
}
