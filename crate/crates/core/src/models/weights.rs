//! `ADVW` weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"ADVW"
//! version    u16            (= 1)
//! count      u32            number of tensors
//! table      count entries:
//!              name_len u32, name (UTF-8), rank u32, dims u32 x rank,
//!              offset u64   absolute byte offset of the payload
//! payloads   f64 little-endian, in table order, contiguous
//! ```

use std::fs;
use std::path::Path;

use super::{ClassifierModel, FeatureExtractor, Parameters, SrModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 4] = b"ADVW";
pub const WEIGHT_VERSION: u16 = 1;

/// Ordered named tensors as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<(String, Tensor)>,
}

impl WeightFile {
    pub fn from_model(model: &impl Parameters) -> Self {
        WeightFile {
            tensors: model
                .named_params()
                .into_iter()
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.grad = None;
                    (n, t)
                })
                .collect(),
        }
    }

    pub fn header_len(&self) -> usize {
        4 + 2
            + 4
            + self
                .tensors
                .iter()
                .map(|(n, t)| 4 + n.len() + 4 + 4 * t.rank() + 8)
                .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_len();
        let payload: usize = self.tensors.iter().map(|(_, t)| 8 * t.numel()).sum();
        let mut out = Vec::with_capacity(header + payload);
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = header as u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.numel() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != WEIGHT_MAGIC {
            return Err(Error::format(path, "bad magic, not an ADVW weight file"));
        }
        let version = r.u16()?;
        if version != WEIGHT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported weight file version {version}"),
            ));
        }
        let count = r.u32()? as usize;
        let mut table = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            table.push((name, dims, offset));
        }
        let mut expected = r.pos as u64;
        let mut tensors = Vec::with_capacity(count);
        for (name, dims, offset) in table {
            if offset != expected {
                return Err(Error::format(
                    path,
                    format!("tensor {name}: payload offset {offset} inconsistent with table (expected {expected})"),
                ));
            }
            let numel: usize = dims.iter().product();
            let end = offset as usize + 8 * numel;
            if end > bytes.len() {
                return Err(Error::format(
                    path,
                    format!(
                        "truncated: tensor {name} needs bytes up to {end}, file has {}",
                        bytes.len()
                    ),
                ));
            }
            let data = bytes[offset as usize..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(dims, data)?));
            expected = end as u64;
        }
        if expected as usize != bytes.len() {
            return Err(Error::format(
                path,
                format!(
                    "{} trailing bytes after last payload",
                    bytes.len() - expected as usize
                ),
            ));
        }
        Ok(WeightFile { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated header"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Any network that can be stored in a weight file.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Sr(SrModel),
    Classifier(ClassifierModel),
    FeatureExtractor(FeatureExtractor),
}

pub fn save_weights(model: &impl Parameters, path: &Path) -> Result<()> {
    WeightFile::from_model(model).save(path)
}

/// Loads a weight file and rebuilds whichever network its tensor names
/// describe.
pub fn load_weights(path: &Path) -> Result<LoadedModel> {
    let file = WeightFile::load(path)?;
    let prefix = file
        .tensors
        .first()
        .map(|(n, _)| n.split('.').next().unwrap_or("").to_string())
        .unwrap_or_default();
    let wrap = |e: Error| Error::format(path, e.to_string());
    match prefix.as_str() {
        "sr" => SrModel::from_tensors(file.tensors)
            .map(LoadedModel::Sr)
            .map_err(wrap),
        "cls" => ClassifierModel::from_tensors(file.tensors)
            .map(LoadedModel::Classifier)
            .map_err(wrap),
        "feat" => FeatureExtractor::from_tensors(file.tensors)
            .map(LoadedModel::FeatureExtractor)
            .map_err(wrap),
        other => Err(Error::format(
            path,
            format!("unknown model prefix {other:?}"),
        )),
    }
}

impl SrModel {
    pub fn load(path: &Path) -> Result<Self> {
        match load_weights(path)? {
            LoadedModel::Sr(m) => Ok(m),
            _ => Err(Error::format(path, "not an SR model weight file")),
        }
    }
}

impl ClassifierModel {
    pub fn load(path: &Path) -> Result<Self> {
        match load_weights(path)? {
            LoadedModel::Classifier(m) => Ok(m),
            _ => Err(Error::format(path, "not a classifier weight file")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassifierConfig, SrConfig};

    #[test]
    fn save_load_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sr.advw");
        let m = SrModel::build(SrConfig::default(), 11).unwrap();
        save_weights(&m, &path).unwrap();
        assert_eq!(SrModel::load(&path).unwrap(), m);

        let c = ClassifierModel::build(ClassifierConfig::default(), 12).unwrap();
        let cpath = dir.path().join("cls.advw");
        save_weights(&c, &cpath).unwrap();
        assert_eq!(load_weights(&cpath).unwrap(), LoadedModel::Classifier(c));

        let f = FeatureExtractor::build(13);
        let fpath = dir.path().join("feat.advw");
        save_weights(&f, &fpath).unwrap();
        assert_eq!(
            load_weights(&fpath).unwrap(),
            LoadedModel::FeatureExtractor(f)
        );
    }

    #[test]
    fn file_size_is_header_plus_payload() {
        let m = SrModel::build(SrConfig::default(), 1).unwrap();
        let wf = WeightFile::from_model(&m);
        // 4 + 2 + 4, then per tensor: 4 + name + 4 + 4*rank + 8
        let header: usize = 10
            + m.named_params()
                .iter()
                .map(|(n, t)| 4 + n.len() + 4 + 4 * t.rank() + 8)
                .sum::<usize>();
        assert_eq!(wf.to_bytes().len(), header + 8 * m.param_count());
    }

    #[test]
    fn corrupt_files_refused() {
        let m = SrModel::build(SrConfig::default(), 1).unwrap();
        let bytes = WeightFile::from_model(&m).to_bytes();
        let p = Path::new("mem");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(WeightFile::from_bytes(&bad, p)
            .unwrap_err()
            .to_string()
            .contains("magic"));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(WeightFile::from_bytes(&bad, p)
            .unwrap_err()
            .to_string()
            .contains("version"));

        let truncated = &bytes[..bytes.len() - 8];
        assert!(WeightFile::from_bytes(truncated, p)
            .unwrap_err()
            .to_string()
            .contains("truncated"));

        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(WeightFile::from_bytes(&extra, p).is_err());

        assert!(WeightFile::from_bytes(&bytes[..7], p).is_err());
    }
}
