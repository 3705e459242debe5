//! End-to-end inference plumbing: WAV in, STFT, network forward, inverse
//! STFT, WAV out. Uses a freshly initialized full-size model, so this
//! demonstrates throughput and geometry, not learned denoising (see the
//! train_toy example for that).
//!
//! ```bash
//! cargo run --release --example enhance
//! ```

use std::time::Instant;

use dparn::dsp::{istft, save_wav, stft, StftConfig, WavBuffer, SAMPLE_RATE};
use dparn::model::{DparnModel, ModelConfig};
use dparn::rng::Rng;

fn main() {
    let seconds = 2.0;
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let mut rng = Rng::new(7);
    let samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            let tone = 0.3 * (2.0 * std::f64::consts::PI * 440.0 * t).sin();
            (tone + rng.uniform_symmetric(0.1)) as f32
        })
        .collect();

    let model = DparnModel::<f32>::new(ModelConfig::canonical(), 1).expect("model");
    println!(
        "full-size model: {} trainable parameters, frequency trace {:?}",
        model.num_trainable(),
        model.config.freq_trace()
    );

    let cfg = StftConfig::default();
    let start = Instant::now();
    let spec = stft(&samples, &cfg).expect("stft");
    let enhanced = model.enhance_spectrogram(&spec).expect("forward");
    let mut out = istft(&enhanced, &cfg).expect("istft");
    out.truncate(samples.len());
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "{} frames in {:.2} s (real-time factor {:.2})",
        spec.frames,
        elapsed,
        seconds / elapsed
    );

    let path = std::env::temp_dir().join("dparn_enhance_example.wav");
    save_wav(
        &path,
        &WavBuffer {
            samples: out,
            sample_rate: SAMPLE_RATE,
            channels: 1,
            format: dparn::dsp::WavFormat::Float32,
        },
    )
    .expect("save");
    println!("wrote {}", path.display());
}
