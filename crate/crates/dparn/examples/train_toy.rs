//! Overfit the reduced model on one synthetic 2-second clip mixed with
//! noise at 5 dB SNR, then measure the SI-SDR improvement on that clip.
//!
//! ```bash
//! cargo run --release --example train_toy [steps]
//! ```

use dparn::dsp::{istft, mix_at_snr, stft, StftConfig, SAMPLE_RATE};
use dparn::metrics::si_sdr;
use dparn::model::{DparnModel, ModelConfig};
use dparn::rng::Rng;
use dparn::training::{train_toy, TrainConfig};

/// A few voiced harmonics with a slow envelope plus a fricative-like band
/// of high-frequency noise: enough spectral structure to be interesting.
fn speech_like(seconds: f64, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let envelope = 0.55 + 0.45 * (2.0 * std::f64::consts::PI * 2.3 * t).sin();
            let mut v = 0.0;
            for (h, amp) in [(130.0, 0.5), (260.0, 0.35), (390.0, 0.2), (1170.0, 0.12)] {
                v += amp * (2.0 * std::f64::consts::PI * h * t).sin();
            }
            let hiss =
                rng.uniform_symmetric(0.06) * (1.2 + (2.0 * std::f64::consts::PI * 1.1 * t).cos());
            (envelope * v + hiss) * 0.5
        })
        .collect()
}

fn main() {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(120);
    let clean = speech_like(2.0, 11);
    let mut rng = Rng::new(22);
    let noise: Vec<f64> = (0..clean.len())
        .map(|_| rng.uniform_symmetric(0.4))
        .collect();

    let cfg = TrainConfig::toy(16, steps, 5.0);
    let mut model = DparnModel::<f64>::new(ModelConfig::reduced(), 33).expect("model");
    println!(
        "reduced model: {} trainable parameters, {} steps at {} dB SNR",
        model.num_trainable(),
        steps,
        cfg.snr_db
    );
    let trace = train_toy(&mut model, &clean, &noise, &cfg).expect("training");
    let (first, last) = (trace.first().unwrap(), trace.last().unwrap());
    println!(
        "loss: {:.3} -> {:.3} ({:.1}% of initial)",
        first.total,
        last.total,
        100.0 * last.total / first.total
    );

    // enhance the training mixture and compare SI-SDR against the noisy input
    let mix = mix_at_snr(&clean, &noise, cfg.snr_db, true).expect("mix");
    let stft_cfg = StftConfig::default();
    let spec = stft(&mix.mixture, &stft_cfg).expect("stft");
    let enhanced_spec = model.enhance_spectrogram(&spec).expect("forward");
    let mut enhanced = istft(&enhanced_spec, &stft_cfg).expect("istft");
    enhanced.truncate(mix.mixture.len());

    let noisy_score = si_sdr(&mix.mixture, &mix.clean_ref).expect("si-sdr");
    let enhanced_score = si_sdr(&enhanced, &mix.clean_ref).expect("si-sdr");
    println!(
        "SI-SDR: noisy {:.2} dB -> enhanced {:.2} dB ({:+.2} dB)",
        noisy_score.db,
        enhanced_score.db,
        enhanced_score.db - noisy_score.db
    );
}
