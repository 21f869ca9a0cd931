//! Synthetic shape dataset with paired HR/LR images.

mod degrade;
mod dump;
mod render;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub use degrade::{degrade, gaussian_kernel, Decimation, DegradeConfig};
pub use dump::{read_split, write_split, DUMP_MAGIC, DUMP_VERSION};
pub use render::{render_sample, SHAPE_NAMES};

/// Number of distinct shape classes the renderer can draw.
pub const MAX_CLASSES: usize = SHAPE_NAMES.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub hr_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub degrade: DegradeConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 8,
            hr_size: 48,
            train_per_class: 200,
            val_per_class: 25,
            test_per_class: 25,
            degrade: DegradeConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return Err(Error::InvalidArgument(format!(
                "data.classes must be in 2..={MAX_CLASSES}, got {}",
                self.classes
            )));
        }
        for (name, n) in [
            ("train_per_class", self.train_per_class),
            ("val_per_class", self.val_per_class),
            ("test_per_class", self.test_per_class),
        ] {
            if n == 0 {
                return Err(Error::InvalidArgument(format!("data.{name} must be >= 1")));
            }
        }
        if !self.hr_size.is_multiple_of(2) || self.hr_size <= self.degrade.kernel_size {
            return Err(Error::InvalidArgument(format!(
                "data.hr_size {} must be even and larger than the blur kernel ({})",
                self.hr_size, self.degrade.kernel_size
            )));
        }
        self.degrade.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            SplitKind::Train => 1,
            SplitKind::Val => 2,
            SplitKind::Test => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3 x H x W`
    pub hr: Tensor,
    /// `3 x H/2 x W/2`
    pub lr: Tensor,
    pub class_id: usize,
}

/// A stacked minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub hr: Tensor,
    pub lr: Tensor,
    pub class_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub kind: SplitKind,
    pub classes: usize,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            counts[s.class_id] += 1;
        }
        counts
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let pick = |f: fn(&Sample) -> &Tensor| -> Result<Tensor> {
            let parts: Vec<&Tensor> = indices.iter().map(|&i| f(&self.samples[i])).collect();
            Tensor::stack(&parts)
        };
        Ok(Batch {
            hr: pick(|s| &s.hr)?,
            lr: pick(|s| &s.lr)?,
            class_ids: indices.iter().map(|&i| self.samples[i].class_id).collect(),
        })
    }

    /// Consecutive batches of at most `size` samples, in index order.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &DatasetSplit {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

/// Generates one split. Sample `i` has class `i mod C` and draws from its
/// own stream keyed by `(seed, split, i)`.
pub fn make_split(cfg: &DataConfig, seed: u64, kind: SplitKind) -> Result<DatasetSplit> {
    cfg.validate()?;
    let per_class = match kind {
        SplitKind::Train => cfg.train_per_class,
        SplitKind::Val => cfg.val_per_class,
        SplitKind::Test => cfg.test_per_class,
    };
    let samples = (0..per_class * cfg.classes)
        .map(|i| {
            let class_id = i % cfg.classes;
            let mut r = rng::stream(&[seed, kind.tag(), i as u64]);
            let hr = render_sample(class_id, cfg.hr_size, &mut r)?;
            let lr = degrade(&hr, &cfg.degrade)?;
            Ok(Sample { hr, lr, class_id })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit {
        kind,
        classes: cfg.classes,
        seed,
        samples,
    })
}

pub fn make_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    Ok(Dataset {
        train: make_split(cfg, seed, SplitKind::Train)?,
        val: make_split(cfg, seed, SplitKind::Val)?,
        test: make_split(cfg, seed, SplitKind::Test)?,
    })
}
