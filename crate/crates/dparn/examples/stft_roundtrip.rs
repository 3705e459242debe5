//! Analysis/synthesis STFT round trip on white noise, at both precisions.
//!
//! ```bash
//! cargo run --release --example stft_roundtrip
//! ```

use dparn::dsp::stft::reconstruction_snr;
use dparn::dsp::{istft, stft, StftConfig};
use dparn::rng::Rng;

fn main() {
    let cfg = StftConfig::default();
    println!(
        "window {} samples, hop {} (50% overlap), {} bins",
        cfg.window_len,
        cfg.hop,
        cfg.bins()
    );

    let mut rng = Rng::new(0xD5B);
    let noise: Vec<f64> = (0..48_000).map(|_| rng.uniform_symmetric(0.8)).collect();

    let spec = stft(&noise, &cfg).expect("stft");
    println!(
        "1 s of noise -> {} frames x {} bins",
        spec.frames, spec.bins
    );
    let back = istft(&spec, &cfg).expect("istft");
    println!(
        "f64 interior reconstruction SNR: {:.1} dB",
        reconstruction_snr(&noise, &back, cfg.window_len)
    );

    let noise32: Vec<f32> = noise.iter().map(|&v| v as f32).collect();
    let spec32 = stft(&noise32, &cfg).expect("stft");
    let back32 = istft(&spec32, &cfg).expect("istft");
    println!(
        "f32 interior reconstruction SNR: {:.1} dB",
        reconstruction_snr(&noise32, &back32, cfg.window_len)
    );
}
