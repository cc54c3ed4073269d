//! SI-SDR, SDR, SIR and STOI on a scene with progressively better estimates.

use tse::dataset::{build_scene, NoiseSource, SceneOptions, SpeakerCorpus};
use tse::metrics::Scores;
use tse::signal::Waveform;

fn blend(a: &Waveform, b: &Waveform, gb: f64) -> Waveform {
    let v = a.samples().iter().zip(b.samples()).map(|(x, y)| x + gb * y).collect();
    Waveform::new(v, a.sample_rate()).unwrap()
}

fn main() -> tse::Result<()> {
    let corpus = SpeakerCorpus::synthetic(4, 3, 1, 8000);
    let scene = build_scene(&corpus, &NoiseSource::Synthetic, 2, &SceneOptions::default())?;
    let target = &scene.dry_desired;
    let interf = &scene.reverberant_interference;

    println!("{:<24} {:>8} {:>8} {:>8} {:>7}", "estimate", "SI-SDR", "SDR", "SIR", "STOI");
    let show = |name: &str, est: &Waveform| -> tse::Result<()> {
        let s = Scores::compute(target, interf, est)?;
        println!("{name:<24} {:>8.2} {:>8.2} {:>8.2} {:>7.3}", s.si_sdr, s.sdr, s.sir, s.stoi);
        Ok(())
    };
    show("mixture", &scene.mixture)?;
    show("reverberant target", &scene.reverberant_desired)?;
    show("target + 0.3 interferer", &blend(target, interf, 0.3))?;
    show("target + 0.1 interferer", &blend(target, interf, 0.1))?;
    show("dry target", target)?;
    Ok(())
}
