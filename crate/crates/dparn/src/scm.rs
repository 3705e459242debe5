//! Spectral compression mapping: a linear map from the 601-bin full-band
//! spectrum to a compressed representation that keeps the low band intact
//! (identity rows) and covers the high band with triangular filters whose
//! centers are uniformly spaced in a warped frequency domain. The high-band
//! block is the trainable initialization of a learnable compression layer;
//! the inverse mapping is a fully learnable matrix with random init.

use crate::dsp::{ComplexSpectrogram, BIN_HZ};
use crate::error::{dim_err, DparnError, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Knee below which frequencies pass through unwarped, in Hz.
pub const KNEE_HZ: f64 = 5000.0;
/// Scale constant of the logarithmic branch, in Hz.
pub const SCALE_HZ: f64 = 2500.0;
/// Nyquist frequency of the 48 kHz path, in Hz.
pub const NYQUIST_HZ: f64 = 24000.0;

/// Canonical sizes of the full-band configuration.
pub const FULL_BANDS: usize = 256;
pub const FULL_LOW_BAND: usize = 125;

/// Map a physical frequency into the warped domain: identity below the
/// knee, logarithmic above it. Continuous at the knee.
pub fn warp(f_hz: f64) -> Result<f64> {
    if !(0.0..=NYQUIST_HZ).contains(&f_hz) {
        return Err(DparnError::Domain(format!(
            "warp: frequency {f_hz} outside [0, {NYQUIST_HZ}]"
        )));
    }
    Ok(warp_unchecked(f_hz))
}

fn warp_unchecked(f_hz: f64) -> f64 {
    if f_hz <= KNEE_HZ {
        f_hz
    } else {
        SCALE_HZ * (((f_hz - SCALE_HZ) / SCALE_HZ).ln() + 2.0)
    }
}

/// Inverse of [`warp`]: identity below the knee, exponential above it.
pub fn unwarp(fc: f64) -> Result<f64> {
    let top = warp_unchecked(NYQUIST_HZ);
    if !(0.0..=top + 1e-9).contains(&fc) {
        return Err(DparnError::Domain(format!(
            "unwarp: value {fc} outside [0, {top}]"
        )));
    }
    Ok(unwarp_unchecked(fc))
}

fn unwarp_unchecked(fc: f64) -> f64 {
    if fc <= KNEE_HZ {
        fc
    } else {
        SCALE_HZ * ((fc / SCALE_HZ - 2.0).exp() + 1.0)
    }
}

/// Center frequencies (Hz) of the compressed representation: the first
/// `low_band` centers are the raw bin frequencies; the remaining centers
/// are uniformly spaced in the warped domain from warp(knee)
/// (exclusive) to warp(Nyquist) (inclusive).
pub fn center_grid(compressed: usize, low_band: usize) -> Vec<f64> {
    assert!(low_band < compressed);
    let mut centers = Vec::with_capacity(compressed);
    for m in 0..low_band {
        centers.push(m as f64 * BIN_HZ);
    }
    let (lo, hi) = (warp_unchecked(KNEE_HZ), warp_unchecked(NYQUIST_HZ));
    let step = (hi - lo) / (compressed - low_band) as f64;
    for j in 1..=(compressed - low_band) {
        centers.push(unwarp_unchecked(lo + j as f64 * step));
    }
    centers
}

/// Warped-domain spacing of the high-band grid.
pub fn warped_step(compressed: usize, low_band: usize) -> f64 {
    (warp_unchecked(NYQUIST_HZ) - warp_unchecked(KNEE_HZ)) / (compressed - low_band) as f64
}

/// Support of one triangular filter, in Hz. The right edge of the last
/// filter is extrapolated one warped step past Nyquist; its support is
/// clamped to Nyquist (half-triangle).
#[derive(Debug, Clone, Copy)]
pub struct FilterShape {
    pub center_hz: f64,
    pub left_hz: f64,
    pub right_hz: f64,
}

/// The compression matrix `[compressed x f_bins]`: a fixed identity block
/// over the first `low_band` rows and triangular filters above, kept as a
/// separate block because only the high band is trainable.
#[derive(Debug, Clone)]
pub struct ScmMatrix {
    pub f_bins: usize,
    pub compressed: usize,
    pub low_band: usize,
    /// High-band block, `(compressed - low_band) x f_bins`, row-major.
    pub high: Vec<f64>,
    /// Per-high-row filter geometry, retained for inspection and tests.
    pub filters: Vec<FilterShape>,
}

impl ScmMatrix {
    /// Triangular-filterbank initialization over the canonical bin grid.
    pub fn build_init(f_bins: usize, compressed: usize, low_band: usize) -> Self {
        let centers = center_grid(compressed, low_band);
        let step = warped_step(compressed, low_band);
        let n_high = compressed - low_band;
        let mut high = vec![0.0f64; n_high * f_bins];
        let mut filters = Vec::with_capacity(n_high);
        for k in 0..n_high {
            let center = centers[low_band + k];
            // the knee itself is the left edge of the first high-band filter
            let left = if k == 0 {
                KNEE_HZ
            } else {
                centers[low_band + k - 1]
            };
            let right = if k + 1 < n_high {
                centers[low_band + k + 1]
            } else {
                unwarp_unchecked(warp_unchecked(NYQUIST_HZ) + step)
            };
            filters.push(FilterShape {
                center_hz: center,
                left_hz: left,
                right_hz: right,
            });
            for m in 0..f_bins {
                let f = m as f64 * BIN_HZ;
                let v = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f <= right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                high[k * f_bins + m] = v;
            }
        }
        ScmMatrix {
            f_bins,
            compressed,
            low_band,
            high,
            filters,
        }
    }

    pub fn canonical() -> Self {
        Self::build_init(crate::dsp::FULL_BINS, FULL_BANDS, FULL_LOW_BAND)
    }

    /// The assembled full matrix `[compressed x f_bins]` (identity block
    /// plus high band).
    pub fn full_matrix(&self) -> Vec<f64> {
        let mut w = vec![0.0f64; self.compressed * self.f_bins];
        for k in 0..self.low_band {
            w[k * self.f_bins + k] = 1.0;
        }
        w[self.low_band * self.f_bins..].copy_from_slice(&self.high);
        w
    }

    /// Identity block `[low_band x f_bins]` as a tensor (never trained).
    pub fn low_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut w = vec![T::ZERO; self.low_band * self.f_bins];
        for k in 0..self.low_band {
            w[k * self.f_bins + k] = T::ONE;
        }
        Tensor::from_vec(vec![self.low_band, self.f_bins], w).expect("low block shape")
    }

    /// High-band block as a tensor (trainable initialization).
    pub fn high_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![self.compressed - self.low_band, self.f_bins],
            self.high.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("high block shape")
    }
}

/// Learnable inverse mapping `[f_bins x compressed]`, fan-in uniform init.
#[derive(Debug, Clone)]
pub struct IscmMatrix {
    pub f_bins: usize,
    pub compressed: usize,
    pub weights: Vec<f64>,
}

impl IscmMatrix {
    pub fn random_init(f_bins: usize, compressed: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / compressed as f64).sqrt();
        let weights = (0..f_bins * compressed)
            .map(|_| rng.uniform_symmetric(bound))
            .collect();
        IscmMatrix {
            f_bins,
            compressed,
            weights,
        }
    }

    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![self.f_bins, self.compressed],
            self.weights.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("iscm shape")
    }
}

/// Apply a `[compressed x f_bins]` matrix to both planes of a spectrogram.
pub fn apply_matrix_per_frame<T: Scalar>(
    spec_plane: &[T],
    frames: usize,
    in_bins: usize,
    matrix: &[f64],
    out_bins: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; frames * out_bins];
    for t in 0..frames {
        let x = &spec_plane[t * in_bins..(t + 1) * in_bins];
        let y = &mut out[t * out_bins..(t + 1) * out_bins];
        for (r, yv) in y.iter_mut().enumerate() {
            let row = &matrix[r * in_bins..(r + 1) * in_bins];
            let mut acc = 0.0f64;
            for (w, xv) in row.iter().zip(x.iter()) {
                acc += w * xv.to_f64();
            }
            *yv = T::from_f64(acc);
        }
    }
    out
}

/// Compress a spectrogram with the (initial) mapping matrix.
pub fn apply_scm<T: Scalar>(
    spec: &ComplexSpectrogram<T>,
    scm: &ScmMatrix,
) -> Result<ComplexSpectrogram<T>> {
    if spec.bins != scm.f_bins {
        return dim_err(
            "apply_scm",
            &[spec.frames, spec.bins],
            &[scm.compressed, scm.f_bins],
        );
    }
    let w = scm.full_matrix();
    Ok(ComplexSpectrogram {
        frames: spec.frames,
        bins: scm.compressed,
        re: apply_matrix_per_frame(&spec.re, spec.frames, spec.bins, &w, scm.compressed),
        im: apply_matrix_per_frame(&spec.im, spec.frames, spec.bins, &w, scm.compressed),
    })
}

/// Expand a compressed spectrogram with an inverse-mapping matrix.
pub fn apply_iscm<T: Scalar>(
    spec: &ComplexSpectrogram<T>,
    iscm: &IscmMatrix,
) -> Result<ComplexSpectrogram<T>> {
    if spec.bins != iscm.compressed {
        return dim_err(
            "apply_iscm",
            &[spec.frames, spec.bins],
            &[iscm.f_bins, iscm.compressed],
        );
    }
    Ok(ComplexSpectrogram {
        frames: spec.frames,
        bins: iscm.f_bins,
        re: apply_matrix_per_frame(&spec.re, spec.frames, spec.bins, &iscm.weights, iscm.f_bins),
        im: apply_matrix_per_frame(&spec.im, spec.frames, spec.bins, &iscm.weights, iscm.f_bins),
    })
}

/// Write the assembled initial matrix as CSV (`compressed` rows of
/// `f_bins` columns).
pub fn write_matrix_csv(scm: &ScmMatrix, mut sink: impl std::io::Write) -> Result<()> {
    let w = scm.full_matrix();
    for row in w.chunks(scm.f_bins) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(sink, "{}", line.join(","))?;
    }
    Ok(())
}
