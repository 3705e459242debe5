//! Build the canonical spectral compression matrix and print its geometry:
//! the warped-frequency grid, a few triangular filters, and the partition
//! property on shared slopes.
//!
//! ```bash
//! cargo run --release --example scm_filters
//! ```

use dparn::dsp::BIN_HZ;
use dparn::scm::{warp, warped_step, ScmMatrix};

fn main() {
    let scm = ScmMatrix::canonical();
    println!(
        "matrix: {} rows x {} bins, identity rows 0..{}",
        scm.compressed, scm.f_bins, scm.low_band
    );
    println!(
        "warp(5000) = {:.2}, warp(24000) = {:.2}, warped grid step = {:.3}",
        warp(5000.0).unwrap(),
        warp(24_000.0).unwrap(),
        warped_step(scm.compressed, scm.low_band)
    );

    for &k in &[0usize, 1, 65, 130] {
        let f = scm.filters[k];
        let row = &scm.high[k * scm.f_bins..(k + 1) * scm.f_bins];
        let support: Vec<usize> = (0..scm.f_bins).filter(|&m| row[m] > 0.0).collect();
        println!(
            "filter {:3}: center {:8.1} Hz, edges [{:8.1}, {:8.1}], {} bins of support, row sum {:.3}",
            scm.low_band + k,
            f.center_hz,
            f.left_hz,
            f.right_hz,
            support.len(),
            row.iter().sum::<f64>()
        );
    }

    // complementary crossing between two mid filters
    let k = 40;
    let c_k = scm.filters[k].center_hz;
    let c_next = scm.filters[k + 1].center_hz;
    let m = ((c_k + c_next) / 2.0 / BIN_HZ).round() as usize;
    let sum = scm.high[k * scm.f_bins + m] + scm.high[(k + 1) * scm.f_bins + m];
    println!(
        "bin {} between centers {:.0} and {:.0} Hz: g_k + g_k+1 = {:.12}",
        m, c_k, c_next, sum
    );
}
