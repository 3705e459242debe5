//! Analysis/synthesis STFT: periodic Hann, 25 ms window, 12.5 ms hop.
//!
//! Analysis frames start at `t * hop` with no look-back padding, so frame t
//! covers samples `[t*hop, t*hop + window)` and the transform is causal.
//! Synthesis is weighted overlap-add with a Hann synthesis window and
//! per-sample normalization by the accumulated squared window, which makes
//! the round trip exact on the interior regardless of overlap ratio.

use rustfft::{num_complex::Complex, FftNum, FftPlanner};

use super::ComplexSpectrogram;
use crate::error::{DparnError, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_len: 1200,
            hop: 600,
            fft_len: 1200,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.hop == 0 || self.fft_len < self.window_len {
            return Err(DparnError::Config(format!("bad STFT geometry {self:?}")));
        }
        if !self.window_len.is_multiple_of(self.hop) {
            return Err(DparnError::Config(format!(
                "hop {} must divide window {}",
                self.hop, self.window_len
            )));
        }
        Ok(())
    }

    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}

/// Periodic (DFT-even) Hann window of unit peak.
pub fn hann_periodic<T: Scalar>(len: usize) -> Vec<T> {
    (0..len)
        .map(|n| {
            let x = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
            T::from_f64(0.5 * (1.0 - x.cos()))
        })
        .collect()
}

#[allow(clippy::needless_range_loop)]
pub fn stft<T: Scalar + FftNum>(samples: &[T], cfg: &StftConfig) -> Result<ComplexSpectrogram<T>> {
    cfg.validate()?;
    let frames = cfg.num_frames(samples.len());
    let bins = cfg.bins();
    let window = hann_periodic::<T>(cfg.window_len);
    let mut planner = FftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(cfg.fft_len);

    let mut spec = ComplexSpectrogram::zeros(frames, bins);
    let mut buf = vec![Complex::<T>::default(); cfg.fft_len];
    for t in 0..frames {
        let start = t * cfg.hop;
        for (n, b) in buf.iter_mut().enumerate() {
            let s = if start + n < samples.len() {
                samples[start + n]
            } else {
                T::ZERO
            };
            *b = Complex::new(s * window[n], T::ZERO);
        }
        fft.process(&mut buf);
        for m in 0..bins {
            spec.re[t * bins + m] = buf[m].re;
            spec.im[t * bins + m] = buf[m].im;
        }
    }
    Ok(spec)
}

/// Inverse STFT. Output length is `(frames-1)*hop + window_len`; callers
/// that know the original length truncate.
#[allow(clippy::needless_range_loop)]
pub fn istft<T: Scalar + FftNum>(spec: &ComplexSpectrogram<T>, cfg: &StftConfig) -> Result<Vec<T>> {
    cfg.validate()?;
    if spec.bins != cfg.bins() {
        return Err(DparnError::Dimension {
            op: "istft",
            lhs: vec![spec.frames, spec.bins],
            rhs: vec![cfg.bins()],
        });
    }
    if spec.frames == 0 {
        return Ok(Vec::new());
    }
    let window = hann_periodic::<T>(cfg.window_len);
    let mut planner = FftPlanner::<T>::new();
    let ifft = planner.plan_fft_inverse(cfg.fft_len);

    let out_len = (spec.frames - 1) * cfg.hop + cfg.window_len;
    let mut acc = vec![T::ZERO; out_len];
    let mut norm = vec![T::ZERO; out_len];
    let inv_n = <T as Scalar>::from_f64(1.0 / cfg.fft_len as f64);
    let bins = spec.bins;
    let mut buf = vec![Complex::<T>::default(); cfg.fft_len];
    for t in 0..spec.frames {
        for m in 0..bins {
            buf[m] = Complex::new(spec.re[t * bins + m], spec.im[t * bins + m]);
        }
        // Hermitian completion of the upper half
        for m in bins..cfg.fft_len {
            buf[m] = buf[cfg.fft_len - m].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for n in 0..cfg.window_len {
            acc[start + n] += buf[n].re * inv_n * window[n];
            norm[start + n] += window[n] * window[n];
        }
    }
    // The interior accumulates at least 0.5 of squared window, so the floor
    // only touches the outer ~2.5 ms of the first and last frame. There a
    // hard 1/w^2 would amplify any frame inconsistency enormously; flooring
    // trades that for a short deterministic fade.
    let floor = <T as Scalar>::from_f64(1e-2);
    for (a, n) in acc.iter_mut().zip(norm.iter()) {
        *a = *a / (*n).max(floor);
    }
    Ok(acc)
}

/// Reconstruction SNR in dB over `[skip, len-skip)`.
pub fn reconstruction_snr<T: Scalar>(original: &[T], rebuilt: &[T], skip: usize) -> f64 {
    let len = original.len().min(rebuilt.len());
    let (mut sig, mut err) = (0.0f64, 0.0f64);
    for i in skip..len.saturating_sub(skip) {
        let o = original[i].to_f64();
        let d = o - rebuilt[i].to_f64();
        sig += o * o;
        err += d * d;
    }
    if err == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (sig / err).log10()
}
