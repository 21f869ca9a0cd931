//! `ADVD` dataset dumps, one file per split.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"ADVD"
//! version    u16    (= 1)
//! classes    u16
//! count      u32    number of samples
//! height     u32    HR height; LR is half of it
//! width      u32    HR width
//! records    count x (class_id u16, HR f64 x 3*H*W, LR f64 x 3*H/2*W/2)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DatasetSplit, Sample, SplitKind};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"ADVD";
pub const DUMP_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 4 + 4;

fn encode(split: &DatasetSplit) -> Result<Vec<u8>> {
    let (h, w) = match split.samples.first() {
        Some(s) => (s.hr.shape()[1], s.hr.shape()[2]),
        None => (0, 0),
    };
    let record = 2 + 8 * (3 * h * w + 3 * (h / 2) * (w / 2));
    let mut out = Vec::with_capacity(HEADER_LEN + record * split.len());
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&(split.classes as u16).to_le_bytes());
    out.extend_from_slice(&(split.len() as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for s in &split.samples {
        if s.hr.shape() != [3, h, w] || s.lr.shape() != [3, h / 2, w / 2] {
            return Err(Error::shape("dataset dump", &[3, h, w], s.hr.shape()));
        }
        out.extend_from_slice(&(s.class_id as u16).to_le_bytes());
        for v in s.hr.data().iter().chain(s.lr.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    let bytes = encode(split)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a split dump. The dump carries no seed, so `seed` is recorded
/// as given.
pub fn read_split(path: &Path, kind: SplitKind, seed: u64) -> Result<DatasetSplit> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != DUMP_MAGIC {
        return Err(Error::format(path, "bad magic, not an ADVD dataset dump"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != DUMP_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported dump version {version}"),
        ));
    }
    let classes = u16_at(6) as usize;
    let count = u32_at(8) as usize;
    let (h, w) = (u32_at(12) as usize, u32_at(16) as usize);
    let (hr_len, lr_len) = (3 * h * w, 3 * (h / 2) * (w / 2));
    let record = 2 + 8 * (hr_len + lr_len);
    if bytes.len() != HEADER_LEN + count * record {
        return Err(Error::format(
            path,
            format!(
                "size {} does not match {count} records of {record} bytes",
                bytes.len()
            ),
        ));
    }
    let floats = |o: usize, n: usize| -> Vec<f64> {
        bytes[o..o + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let o = HEADER_LEN + i * record;
        let class_id = u16_at(o) as usize;
        if class_id >= classes {
            return Err(Error::format(
                path,
                format!("record {i}: class id {class_id} >= class count {classes}"),
            ));
        }
        samples.push(Sample {
            hr: Tensor::new(vec![3, h, w], floats(o + 2, hr_len))?,
            lr: Tensor::new(vec![3, h / 2, w / 2], floats(o + 2 + 8 * hr_len, lr_len))?,
            class_id,
        });
    }
    Ok(DatasetSplit {
        kind,
        classes,
        seed,
        samples,
    })
}
