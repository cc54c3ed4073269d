//! Extracts one speaker from a generated scene with a trained checkpoint and
//! writes both stage outputs.
//!
//! cargo run --release --example extract -- <checkpoint> [out_dir]

use std::path::PathBuf;

use tse::dataset::{build_scene, NoiseSource, SceneOptions, SpeakerCorpus};
use tse::model::Checkpoint;
use tse::wav::{match_level, write_wav};

fn main() -> tse::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(ckpt) = args.next() else {
        eprintln!("usage: extract <checkpoint> [out_dir]");
        std::process::exit(1);
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tse_extract"));
    let model = Checkpoint::load(ckpt.as_ref())?.model;

    let corpus = SpeakerCorpus::synthetic(4, 3, 1, 8000);
    let scene = build_scene(&corpus, &NoiseSource::Synthetic, 0, &SceneOptions::default())?;
    let (result, secs) = model.extract_timed(&scene.mixture, &scene.reference_desired)?;
    let s1 = result.stage1_waveform()?;
    let s2 = result.stage2_waveform()?;
    println!(
        "{:.2} s of audio in {secs:.2} s; SI-SDR stage 1 {:.2} dB (mixture {:.2}), stage 2 {:.2} dB (mixture {:.2})",
        scene.mixture.duration_secs(),
        tse::metrics::si_sdr(&scene.reverberant_desired, &s1)?,
        tse::metrics::si_sdr(&scene.reverberant_desired, &scene.mixture)?,
        tse::metrics::si_sdr(&scene.dry_desired, &s2)?,
        tse::metrics::si_sdr(&scene.dry_desired, &scene.mixture)?,
    );
    write_wav(&out.join("mixture.wav"), &scene.mixture)?;
    write_wav(&out.join("stage1.wav"), &match_level(&s1, &scene.mixture))?;
    write_wav(&out.join("stage2.wav"), &match_level(&s2, &scene.mixture))?;
    println!("wrote {}", out.display());
    Ok(())
}
