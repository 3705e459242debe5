//! 48 kHz waveform I/O, analysis/synthesis STFT, and SNR-controlled mixing.

pub mod mix;
pub mod stft;
pub mod wav;

pub use mix::{mix_at_snr, SnrMix};
pub use stft::{istft, stft, StftConfig};
pub use wav::{load_wav, save_wav, WavBuffer, WavFormat};

use crate::tensor::{Scalar, Tensor};

/// Sample rate required by the enhancement path.
pub const SAMPLE_RATE: u32 = 48_000;

/// Spacing of STFT bins in Hz (48000 / 1200).
pub const BIN_HZ: f64 = 40.0;

/// Number of frequency bins of the full-band analysis (1200/2 + 1).
pub const FULL_BINS: usize = 601;

/// Complex T-F representation: `frames x bins`, stored as separate real
/// and imaginary planes, row-major over frames. Bin `m` (0-based) sits at
/// physical frequency `m * 40` Hz; bin 600 is Nyquist (24 kHz).
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram<T: Scalar> {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        ComplexSpectrogram {
            frames,
            bins,
            re: vec![T::ZERO; frames * bins],
            im: vec![T::ZERO; frames * bins],
        }
    }

    pub fn at(&self, frame: usize, bin: usize) -> (T, T) {
        let i = frame * self.bins + bin;
        (self.re[i], self.im[i])
    }

    pub fn magnitude(&self, frame: usize, bin: usize) -> T {
        let (re, im) = self.at(frame, bin);
        (re * re + im * im).sqrt()
    }

    /// Real plane as a `[frames, bins]` tensor.
    pub fn re_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(vec![self.frames, self.bins], self.re.clone()).expect("plane shape")
    }

    /// Imaginary plane as a `[frames, bins]` tensor.
    pub fn im_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(vec![self.frames, self.bins], self.im.clone()).expect("plane shape")
    }

    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(self.im.iter())
            .map(|(&r, &i)| r.to_f64() * r.to_f64() + i.to_f64() * i.to_f64())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ComplexSpectrogram<U> {
        ComplexSpectrogram {
            frames: self.frames,
            bins: self.bins,
            re: self.re.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            im: self.im.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
