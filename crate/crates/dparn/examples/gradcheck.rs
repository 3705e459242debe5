//! Finite-difference check of the training-loss gradient through the
//! reduced model at 64-bit.
//!
//! ```bash
//! cargo run --release --example gradcheck [samples]
//! ```

use dparn::verify::gradcheck_reduced_model;

fn main() {
    let samples: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(80);
    let report = gradcheck_reduced_model(samples, 0xC0FFEE).expect("gradcheck");
    println!(
        "{} sampled parameters, max relative error {:.3e} (worst at {})",
        report.sampled, report.max_rel_err, report.worst_param
    );
    println!(
        "tolerance {:.0e}: {}",
        report.tolerance,
        if report.passed() { "PASS" } else { "FAIL" }
    );
}
