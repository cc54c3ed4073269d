//! Samples rooms, simulates image-source impulse responses and checks them
//! against the requested reverberation time and geometry.
//!
//! cargo run --release --example simulate_rir -- [n_rooms]

use tse::acoustics::{generate_rir, measure_t60, sample_room};

fn main() -> tse::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(5);
    println!("{:>4} {:>18} {:>7} {:>9} {:>7} {:>9}", "room", "dims (m)", "T60", "measured", "dist", "delay");
    for seed in 0..n {
        let room = sample_room(seed);
        let src = room.source_position();
        let rir = generate_rir(&room, &src)?;
        let t60 = measure_t60(&rir)?;
        let d: f64 = src.iter().zip(&room.mic_pos).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        println!(
            "{seed:>4} {:>5.2}x{:>5.2}x{:>5.2} {:>7.3} {:>9.3} {:>7.2} {:>9}",
            room.dims[0], room.dims[1], room.dims[2], room.t60, t60, d, rir.direct_path_index
        );
    }
    Ok(())
}
