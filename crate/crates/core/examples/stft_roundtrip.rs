//! Analysis/synthesis round trip and the real/imaginary feature layout the
//! network consumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tse::dataset::speech::{synth_utterance, VoiceProfile};
use tse::signal::{from_ri, istft, stft, to_ri, StftConfig};

fn main() -> tse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let voice = VoiceProfile::sample(&mut rng);
    let x = synth_utterance(&mut rng, &voice, 1.5, 8000);
    let cfg = StftConfig::default();

    let spec = stft(&x, &cfg)?;
    let ri = to_ri(&spec);
    println!(
        "{} samples -> {} frames x {} bins, features {:?}",
        x.len(),
        spec.n_frames(),
        spec.n_bins(),
        ri.planes.shape()
    );

    let y = istft(&from_ri(&ri)?)?;
    let err: f64 = x.samples().iter().zip(y.samples()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = x.samples().iter().map(|a| a * a).sum::<f64>().sqrt();
    println!("relative reconstruction error {:.2e}", err / norm);
    Ok(())
}
