//! Trains the small model on a few in-memory scenes and reports training-set
//! SI-SDR before and after.
//!
//! cargo run --release --example train_tiny -- [steps] [preset] [ablation]

use tse::dataset::{build_scene, crop, NoiseSource, SceneOptions, SpeakerCorpus};
use tse::model::{Model, ModelConfig};
use tse::training::{training_scores, ScoreSummary, TrainConfig, Trainer};

fn main() -> tse::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|v| v.parse().ok()).unwrap_or(100);
    let preset = args.next().unwrap_or_else(|| "desk".into());
    let ablation = args.next().unwrap_or_else(|| "cfg4".into()).parse()?;

    let corpus = SpeakerCorpus::synthetic(4, 3, 1, 8000);
    let scenes = (0..4)
        .map(|seed| {
            let s = build_scene(&corpus, &NoiseSource::Synthetic, seed, &SceneOptions::default())?;
            crop(&s, (s.len() - 8000) / 2, 8000)
        })
        .collect::<tse::Result<Vec<_>>>()?;

    let cfg = TrainConfig {
        max_steps: steps,
        ablation,
        crop_secs: None,
        warmup_steps: steps / 4,
        valid_interval: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(Model::new(ModelConfig::preset(&preset)?)?, cfg, scenes, vec![])?;
    println!("{} parameters", trainer.model.param_count());
    let before = ScoreSummary::of(&training_scores(&trainer)?);
    while trainer.step < steps {
        let row = trainer.step()?;
        if row.step % 25 == 0 {
            println!(
                "step {:>4} loss {:>8.3} stage1 {:>6.2} dB stage2 {:>6.2} dB triplet {:.4}",
                row.step, row.loss, row.train_stage1_si_sdr, row.train_stage2_si_sdr, row.triplet_contribution
            );
        }
    }
    let after = ScoreSummary::of(&training_scores(&trainer)?);
    println!("mixture       {:>6.2} dB (vs reverberant), {:>6.2} dB (vs dry)", after.mixture_reverberant, after.mixture_dry);
    println!("stage 1 {:>6.2} -> {:>6.2} dB", before.stage1, after.stage1);
    println!("stage 2 {:>6.2} -> {:>6.2} dB", before.stage2, after.stage2);
    Ok(())
}
