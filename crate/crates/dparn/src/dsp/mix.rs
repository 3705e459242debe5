//! SNR-controlled mixing of a clean clip with a noise clip.

use crate::error::{DparnError, Result};
use crate::tensor::Scalar;

/// Result of mixing: the noisy signal plus the aligned clean reference
/// (rescaled together if peak renormalization kicked in).
#[derive(Debug, Clone)]
pub struct SnrMix<T: Scalar> {
    pub mixture: Vec<T>,
    pub clean_ref: Vec<T>,
    pub noise_gain: f64,
    pub renorm_gain: f64,
}

fn power<T: Scalar>(x: &[T]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / x.len() as f64
}

/// Scale the noise so that 10*log10(P_clean / P_noise_scaled) = snr_db and
/// add it to the clean signal. Noise shorter than the clean clip is looped,
/// longer noise is truncated. With `renormalize`, a mixture peaking above
/// 0.99 is scaled down together with the clean reference.
pub fn mix_at_snr<T: Scalar>(
    clean: &[T],
    noise: &[T],
    snr_db: f64,
    renormalize: bool,
) -> Result<SnrMix<T>> {
    if clean.is_empty() || noise.is_empty() {
        return Err(DparnError::Degenerate("empty clean or noise input".into()));
    }
    let p_clean = power(clean);
    if p_clean <= 0.0 {
        return Err(DparnError::Degenerate(
            "silent clean input: SNR undefined".into(),
        ));
    }
    let aligned: Vec<T> = (0..clean.len()).map(|i| noise[i % noise.len()]).collect();
    let p_noise = power(&aligned);
    if p_noise <= 0.0 {
        return Err(DparnError::Degenerate("silent noise input".into()));
    }
    let noise_gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();

    let mut mixture: Vec<T> = clean
        .iter()
        .zip(aligned.iter())
        .map(|(&c, &n)| c + T::from_f64(noise_gain) * n)
        .collect();
    let mut clean_ref = clean.to_vec();
    let mut renorm_gain = 1.0;
    if renormalize {
        let peak = mixture
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0f64, f64::max);
        if peak > 0.99 {
            renorm_gain = 0.99 / peak;
            let g = T::from_f64(renorm_gain);
            for v in &mut mixture {
                *v *= g;
            }
            for v in &mut clean_ref {
                *v *= g;
            }
        }
    }
    Ok(SnrMix {
        mixture,
        clean_ref,
        noise_gain,
        renorm_gain,
    })
}

/// Measured SNR of `mixture` against its clean reference, in dB.
pub fn measured_snr<T: Scalar>(mixture: &[T], clean_ref: &[T]) -> f64 {
    let residual: Vec<f64> = mixture
        .iter()
        .zip(clean_ref.iter())
        .map(|(&m, &c)| m.to_f64() - c.to_f64())
        .collect();
    let p_c: f64 = clean_ref.iter().map(|v| v.to_f64() * v.to_f64()).sum();
    let p_n: f64 = residual.iter().map(|v| v * v).sum();
    10.0 * (p_c / p_n).log10()
}
