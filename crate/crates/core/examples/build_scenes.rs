//! Writes a small reverberant two-speaker corpus and reads it back.
//!
//! cargo run --release --example build_scenes -- [out_dir]

use std::path::PathBuf;

use tse::dataset::{generate_corpus, DatasetConfig, Manifest, Split};

fn main() -> tse::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tse_scenes"));
    let cfg = DatasetConfig {
        n_train: 6,
        n_valid: 2,
        n_test: 2,
        synthetic_speakers: 6,
        ..DatasetConfig::default()
    };
    let manifest = generate_corpus(&cfg, &out)?;
    println!("manifest at {}", out.join(Manifest::FILE_NAME).display());

    let again = Manifest::load(&out)?;
    for split in Split::ALL {
        println!("{}: {} scenes", split.as_str(), again.split(split).count());
    }
    let rec = &manifest.records[0];
    let scene = again.load_scene(rec)?;
    println!(
        "{}: {:.2} s, SNR {:.1} dB, T60 {:.2} s, speakers {} / {}",
        scene.id,
        scene.mixture.duration_secs(),
        scene.snr_db,
        scene.room.t60,
        scene.meta.desired_speaker,
        scene.meta.interference_speaker
    );
    Ok(())
}
