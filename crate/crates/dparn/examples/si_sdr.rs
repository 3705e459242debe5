//! SI-SDR sanity table: mixtures with exactly orthogonal noise score their
//! construction SNR, and scaling the estimate never changes the score.
//!
//! ```bash
//! cargo run --release --example si_sdr
//! ```

use dparn::metrics::{orthogonal_mixture, si_sdr};
use dparn::rng::Rng;

fn main() {
    let mut rng = Rng::new(99);
    let reference: Vec<f64> = (0..48_000).map(|_| rng.uniform_symmetric(0.6)).collect();
    let noise: Vec<f64> = (0..48_000).map(|_| rng.uniform_symmetric(0.6)).collect();

    println!("{:>8} {:>12}", "SNR dB", "SI-SDR dB");
    for &snr in &[-5.0, 0.0, 5.0, 10.0, 15.0] {
        let mixture = orthogonal_mixture(&reference, &noise, snr);
        let r = si_sdr(&mixture, &reference).expect("si-sdr");
        println!("{snr:>8.1} {:>12.4}", r.db);
    }

    let mixture = orthogonal_mixture(&reference, &noise, 5.0);
    let scaled: Vec<f64> = mixture.iter().map(|v| v * 1e3).collect();
    let a = si_sdr(&mixture, &reference).unwrap().db;
    let b = si_sdr(&scaled, &reference).unwrap().db;
    println!("scale invariance: {a:.6} dB vs {b:.6} dB after a 60 dB gain");

    let perfect = si_sdr(&reference, &reference).unwrap();
    println!("identical signals report the {} dB cap", perfect.db);
}
