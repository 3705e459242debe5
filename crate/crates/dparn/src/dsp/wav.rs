//! RIFF/WAVE reader and writer for PCM16 and IEEE float32, 48 kHz.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DparnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Audio buffer in [-1, 1]; samples interleaved when `channels > 1`.
#[derive(Debug, Clone)]
pub struct WavBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub channels: u16,
    /// Subformat the buffer was read from (or should be written as).
    pub format: WavFormat,
}

impl WavBuffer {
    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Self {
        WavBuffer {
            samples,
            sample_rate,
            channels: 1,
            format: WavFormat::Float32,
        }
    }

    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels as usize
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }

    /// Average all channels into one. Explicit, never implicit.
    pub fn downmix(&self) -> WavBuffer {
        if self.channels <= 1 {
            return self.clone();
        }
        let ch = self.channels as usize;
        let mono: Vec<f32> = self
            .samples
            .chunks_exact(ch)
            .map(|frame| frame.iter().sum::<f32>() / ch as f32)
            .collect();
        WavBuffer {
            samples: mono,
            sample_rate: self.sample_rate,
            channels: 1,
            format: self.format,
        }
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self
            .samples
            .iter()
            .map(|&s| s as f64 * s as f64)
            .sum::<f64>()
            / self.samples.len() as f64)
            .sqrt()
    }
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| DparnError::Format("truncated file".into()))
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DparnError::Format("truncated file".into()))
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<WavBuffer> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(DparnError::Format(format!(
            "not a RIFF/WAVE file: {}",
            path.as_ref().display()
        )));
    }

    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (code, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let chunk_len = read_u32(&bytes, pos + 4)? as usize;
        let body_start = pos + 8;
        if body_start + chunk_len > bytes.len() {
            return Err(DparnError::Format(format!(
                "truncated chunk '{}'",
                String::from_utf8_lossy(chunk_id)
            )));
        }
        match chunk_id {
            b"fmt " => {
                if chunk_len < 16 {
                    return Err(DparnError::Format("short 'fmt ' chunk".into()));
                }
                fmt = Some((
                    read_u16(&bytes, body_start)?,
                    read_u16(&bytes, body_start + 2)?,
                    read_u32(&bytes, body_start + 4)?,
                    read_u16(&bytes, body_start + 14)?,
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_start + chunk_len]),
            _ => {} // skip ancillary chunks (LIST, fact, ...)
        }
        pos = body_start + chunk_len + (chunk_len & 1);
    }

    let (code, channels, sample_rate, bits) =
        fmt.ok_or_else(|| DparnError::Format("missing 'fmt ' chunk".into()))?;
    let data = data.ok_or_else(|| DparnError::Format("missing 'data' chunk".into()))?;
    if channels == 0 {
        return Err(DparnError::Format("zero channels in 'fmt '".into()));
    }

    let (samples, format) = match (code, bits) {
        (1, 16) => {
            if data.len() % 2 != 0 {
                return Err(DparnError::Format("odd byte count in 'data'".into()));
            }
            let s = data
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
                .collect();
            (s, WavFormat::Pcm16)
        }
        (3, 32) => {
            if data.len() % 4 != 0 {
                return Err(DparnError::Format("ragged float 'data' chunk".into()));
            }
            let s = data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            (s, WavFormat::Float32)
        }
        _ => {
            return Err(DparnError::Format(format!(
                "unsupported codec in 'fmt ': format {code}, {bits} bits"
            )))
        }
    };

    Ok(WavBuffer {
        samples,
        sample_rate,
        channels,
        format,
    })
}

pub fn save_wav(path: impl AsRef<Path>, buf: &WavBuffer) -> Result<()> {
    let (code, bits): (u16, u16) = match buf.format {
        WavFormat::Pcm16 => (1, 16),
        WavFormat::Float32 => (3, 32),
    };
    let bytes_per_sample = (bits / 8) as u32;
    let data_len = buf.samples.len() as u32 * bytes_per_sample;
    let byte_rate = buf.sample_rate * buf.channels as u32 * bytes_per_sample;
    let block_align = buf.channels * (bits / 8);

    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&code.to_le_bytes());
    out.extend_from_slice(&buf.channels.to_le_bytes());
    out.extend_from_slice(&buf.sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());

    for &s in &buf.samples {
        let clamped = s.clamp(-1.0, 1.0);
        match buf.format {
            WavFormat::Pcm16 => {
                let q = (clamped * 32767.0).round() as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            WavFormat::Float32 => out.extend_from_slice(&clamped.to_le_bytes()),
        }
    }

    let mut file = fs::File::create(path.as_ref())?;
    file.write_all(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("dparn_wav_test_{}_{}", std::process::id(), name));
        p
    }

    #[test]
    fn float32_round_trip_is_bit_identical() {
        let mut rng = Rng::new(1);
        let samples: Vec<f32> = (0..4800)
            .map(|_| rng.uniform_symmetric(0.9) as f32)
            .collect();
        let buf = WavBuffer::mono(samples.clone(), 48_000);
        let path = tmp("f32.wav");
        save_wav(&path, &buf).unwrap();
        let loaded = load_wav(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(loaded.sample_rate, 48_000);
        assert_eq!(loaded.channels, 1);
        assert_eq!(loaded.format, WavFormat::Float32);
        assert!(loaded
            .samples
            .iter()
            .zip(samples.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn pcm16_scaling_definition() {
        // stored value 16384 decodes to 0.5 within one LSB
        let mut buf = WavBuffer::mono(vec![16384.0 / 32768.0], 48_000);
        buf.format = WavFormat::Pcm16;
        let path = tmp("pcm16.wav");
        save_wav(&path, &buf).unwrap();
        let loaded = load_wav(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(loaded.format, WavFormat::Pcm16);
        assert!((loaded.samples[0] - 0.5).abs() <= 1.0 / 32768.0);
    }

    #[test]
    fn save_clamps_out_of_range() {
        let buf = WavBuffer::mono(vec![1.5, -2.0], 48_000);
        let path = tmp("clamp.wav");
        save_wav(&path, &buf).unwrap();
        let loaded = load_wav(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(loaded.samples, vec![1.0, -1.0]);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let buf = WavBuffer::mono(vec![0.25; 100], 48_000);
        let path = tmp("trunc.wav");
        save_wav(&path, &buf).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 37]).unwrap();
        let err = load_wav(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        assert!(matches!(err, DparnError::Format(_)), "got {err:?}");
    }

    #[test]
    fn unsupported_codec_names_the_chunk() {
        let buf = WavBuffer::mono(vec![0.0; 10], 48_000);
        let path = tmp("codec.wav");
        save_wav(&path, &buf).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] = 7; // mu-law
        std::fs::write(&path, &bytes).unwrap();
        let err = load_wav(&path).unwrap_err();
        std::fs::remove_file(&path).ok();
        let msg = err.to_string();
        assert!(msg.contains("fmt"), "message should name the chunk: {msg}");
    }

    #[test]
    fn downmix_averages_channels() {
        let buf = WavBuffer {
            samples: vec![0.2, 0.4, -0.6, 0.6],
            sample_rate: 48_000,
            channels: 2,
            format: WavFormat::Float32,
        };
        let mono = buf.downmix();
        assert_eq!(mono.channels, 1);
        assert!((mono.samples[0] - 0.3).abs() < 1e-7);
        assert!(mono.samples[1].abs() < 1e-7);
    }
}
