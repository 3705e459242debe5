//! Binary weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DPRN"  magic
//! u16     version (1)
//! u32     entry count
//! entries: u16 name length, name bytes (UTF-8), u8 dtype (0=f32, 1=f64),
//!          u8 rank, rank x u32 extents, u8 frozen flag, u64 payload offset
//! payload: raw little-endian arrays, in table order
//! u32     CRC-32 of the payload bytes
//! ```
//!
//! Save -> load -> save is byte-identical; any payload tamper trips the
//! checksum.

use std::fs;
use std::path::Path;

use super::{DparnModel, ModelConfig};
use crate::error::{DparnError, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DPRN";
pub const VERSION: u16 = 1;

/// IEEE CRC-32 (reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

#[derive(Debug, Clone)]
pub struct EntryMeta {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub offset: u64,
}

pub fn save_weights<T: Scalar>(model: &DparnModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut table = Vec::new();
    let mut payload = Vec::new();
    let mut count = 0u32;
    for (_, p) in model.params.iter() {
        let offset = payload.len() as u64;
        for &v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes_vec());
        }
        let name = p.name.as_bytes();
        table.extend_from_slice(&(name.len() as u16).to_le_bytes());
        table.extend_from_slice(name);
        table.push(T::DTYPE_CODE);
        table.push(p.value.shape().len() as u8);
        for &e in p.value.shape() {
            table.extend_from_slice(&(e as u32).to_le_bytes());
        }
        table.push(if p.trainable { 0 } else { 1 });
        table.extend_from_slice(&offset.to_le_bytes());
        count += 1;
    }
    let mut out = Vec::with_capacity(4 + 2 + 4 + table.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&table);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32(&payload).to_le_bytes());
    fs::write(path.as_ref(), out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| DparnError::Format("weight file truncated".into()))?;
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parse the header table and verify the payload checksum. Returns the
/// entries and the payload slice.
pub fn read_entries(bytes: &[u8]) -> Result<(Vec<EntryMeta>, &[u8])> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(DparnError::Format("bad magic, not a weight file".into()));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(DparnError::Format(format!(
            "unsupported weight file version {version}"
        )));
    }
    let count = cur.u32()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| DparnError::Format("non-UTF8 parameter name".into()))?;
        let dtype = cur.u8()?;
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let frozen = cur.u8()? != 0;
        let offset = cur.u64()?;
        entries.push(EntryMeta {
            name,
            dtype,
            shape,
            frozen,
            offset,
        });
    }
    if bytes.len() < cur.pos + 4 {
        return Err(DparnError::Format("weight file truncated".into()));
    }
    let payload = &bytes[cur.pos..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(payload);
    if stored != computed {
        return Err(DparnError::Checksum { stored, computed });
    }
    Ok((entries, payload))
}

/// Reconstruct the architecture sizes from the parameter table. The layer
/// family (stride pattern, padding rule) is fixed; everything else is read
/// off the shapes.
pub fn infer_config(entries: &[EntryMeta]) -> Result<ModelConfig> {
    let find = |name: &str| -> Result<&EntryMeta> {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| DparnError::Format(format!("missing required entry '{name}'")))
    };
    let iscm = find("dec_re.iscm")?;
    if iscm.shape.len() != 2 {
        return Err(DparnError::Format("malformed iscm shape".into()));
    }
    let (f_bins, compressed) = (iscm.shape[0], iscm.shape[1]);
    let scm_high = find("scm.high")?;
    let low_band = compressed
        .checked_sub(scm_high.shape[0])
        .ok_or_else(|| DparnError::Format("compression blocks disagree".into()))?;

    let mut encoder_channels = Vec::new();
    let mut encoder_kernels = Vec::new();
    let mut encoder_strides = Vec::new();
    for i in 0.. {
        let name = format!("enc{i}.w");
        match entries.iter().find(|e| e.name == name) {
            Some(e) if e.shape.len() == 4 => {
                encoder_channels.push(e.shape[0]);
                encoder_kernels.push((e.shape[2], e.shape[3]));
                encoder_strides.push(if i == 0 { (2, 1) } else { (1, 1) });
            }
            _ => break,
        }
    }
    let heads = entries
        .iter()
        .filter(|e| e.name.starts_with("intra.block0.head") && e.name.ends_with(".wq"))
        .count();
    let mha_blocks = entries
        .iter()
        .filter(|e| e.name.starts_with("intra.block") && e.name.ends_with(".wo"))
        .count();
    let lstm = find("inter.lstm.w")?;
    let lstm_hidden = lstm.shape[0] / 4;

    let config = ModelConfig {
        f_bins,
        compressed,
        low_band,
        encoder_channels,
        encoder_kernels,
        encoder_strides,
        mha_blocks,
        heads,
        lstm_hidden,
    };
    config.validate()?;
    Ok(config)
}

pub fn load_weights<T: Scalar>(path: impl AsRef<Path>) -> Result<DparnModel<T>> {
    let bytes = fs::read(path.as_ref())?;
    let (entries, payload) = read_entries(&bytes)?;
    let config = infer_config(&entries)?;
    let mut model = DparnModel::<T>::new(config, 0)?;

    // every file entry must match a model parameter, and vice versa
    if entries.len() != model.params.len() {
        return Err(DparnError::Format(format!(
            "parameter count mismatch: file {}, model {}",
            entries.len(),
            model.params.len()
        )));
    }
    for entry in &entries {
        if entry.dtype != T::DTYPE_CODE {
            return Err(DparnError::Format(format!(
                "dtype mismatch for '{}': file code {}, expected {}",
                entry.name,
                entry.dtype,
                T::DTYPE_CODE
            )));
        }
        let id = model
            .params
            .iter()
            .find(|(_, p)| p.name == entry.name)
            .map(|(id, _)| id)
            .ok_or_else(|| {
                DparnError::Format(format!("unknown parameter name '{}'", entry.name))
            })?;
        let expected_shape = model.params.get(id).value.shape().to_vec();
        if expected_shape != entry.shape {
            return Err(DparnError::Dimension {
                op: "load_weights",
                lhs: entry.shape.clone(),
                rhs: expected_shape,
            });
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * T::BYTES;
        if end > payload.len() {
            return Err(DparnError::Format(format!(
                "payload overrun for '{}'",
                entry.name
            )));
        }
        let data: Vec<T> = payload[start..end]
            .chunks_exact(T::BYTES)
            .map(T::from_le_slice)
            .collect();
        model
            .params
            .set_value(id, Tensor::from_vec(entry.shape.clone(), data)?);
    }
    Ok(model)
}
