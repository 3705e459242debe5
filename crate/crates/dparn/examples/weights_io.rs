//! Weight-file round trip: save, reload, compare outputs bit for bit, and
//! show what tampering does to the checksum.
//!
//! ```bash
//! cargo run --release --example weights_io
//! ```

use dparn::dsp::ComplexSpectrogram;
use dparn::model::weights::{load_weights, save_weights};
use dparn::model::{DparnModel, ModelConfig};
use dparn::rng::Rng;

fn main() {
    let model = DparnModel::<f32>::new(ModelConfig::reduced(), 123).expect("model");
    let path = std::env::temp_dir().join("dparn_weights_example.dprn");
    save_weights(&model, &path).expect("save");
    let size = std::fs::metadata(&path).expect("stat").len();
    println!(
        "saved {} parameters ({} trainable) to {} ({} bytes)",
        model.params.len(),
        model.num_trainable(),
        path.display(),
        size
    );

    let loaded = load_weights::<f32>(&path).expect("load");
    let mut rng = Rng::new(5);
    let mut spec = ComplexSpectrogram::<f32>::zeros(3, model.config.f_bins);
    for v in spec.re.iter_mut().chain(spec.im.iter_mut()) {
        *v = rng.uniform_symmetric(0.5) as f32;
    }
    let a = model.enhance_spectrogram(&spec).expect("forward");
    let b = loaded.enhance_spectrogram(&spec).expect("forward");
    let identical =
        a.re.iter()
            .zip(b.re.iter())
            .chain(a.im.iter().zip(b.im.iter()))
            .all(|(x, y)| x.to_bits() == y.to_bits());
    println!("outputs before save and after load identical: {identical}");

    // flip one payload byte: the checksum must catch it
    let mut bytes = std::fs::read(&path).expect("read");
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes).expect("write");
    match load_weights::<f32>(&path) {
        Err(e) => println!("tampered file rejected: {e}"),
        Ok(_) => println!("UNEXPECTED: tampered file loaded"),
    }
    std::fs::remove_file(&path).ok();
}
