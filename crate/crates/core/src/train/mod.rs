//! Optimizer, scheduler, and the three training procedures.

mod classifier;
mod optim;
mod sr;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use classifier::{classifier_val_metrics, train_classifier, ClassifierRun};
pub use optim::{AdamState, PlateauScheduler};
pub use sr::{finetune_sr, val_mse, SrRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Classifier,
    SrClean,
    SrAdvsr,
}

/// Which epoch's weights a run returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelect {
    Final,
    BestValMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    /// Loss ratio, advsr mode only.
    pub r: Option<f64>,
    pub select: CheckpointSelect,
}

impl TrainConfig {
    pub fn classifier(seed: u64) -> Self {
        TrainConfig {
            mode: TrainMode::Classifier,
            epochs: 30,
            batch_size: 32,
            seed,
            lr: 1e-3,
            r: None,
            select: CheckpointSelect::BestValMse,
        }
    }

    pub fn sr_clean(seed: u64) -> Self {
        TrainConfig {
            mode: TrainMode::SrClean,
            epochs: 60,
            batch_size: 16,
            seed,
            lr: 1e-4,
            r: None,
            select: CheckpointSelect::BestValMse,
        }
    }

    pub fn sr_advsr(seed: u64, r: f64) -> Self {
        TrainConfig {
            mode: TrainMode::SrAdvsr,
            epochs: 60,
            batch_size: 16,
            seed,
            lr: 1e-4,
            r: Some(r),
            select: CheckpointSelect::Final,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        match (self.mode, self.r) {
            (TrainMode::SrAdvsr, None) => Err(Error::InvalidArgument(
                "advsr mode requires a loss ratio r".into(),
            )),
            (TrainMode::SrAdvsr, Some(r)) if !(r >= 0.0 && r.is_finite()) => Err(
                Error::InvalidArgument(format!("r must be finite and non-negative, got {r}")),
            ),
            (TrainMode::Classifier | TrainMode::SrClean, Some(_)) => Err(Error::InvalidArgument(
                "r is only meaningful in advsr mode".into(),
            )),
            _ => Ok(()),
        }
    }

    fn expect_mode(&self, mode: TrainMode) -> Result<()> {
        self.validate()?;
        if self.mode != mode {
            return Err(Error::InvalidArgument(format!(
                "config is for {:?} training, expected {mode:?}",
                self.mode
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_advce: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_mse,val_advce,lr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let advce = r.val_advce.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_mse, advce, r.lr
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::InvalidArgument(format!(
                "training log must start with header {:?}",
                Self::CSV_HEADER
            )));
        }
        let bad =
            |line: &str| Error::InvalidArgument(format!("malformed training log row {line:?}"));
        let records = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(line));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
                Ok(EpochRecord {
                    epoch: f[0].parse().map_err(|_| bad(line))?,
                    train_loss: num(f[1])?,
                    val_mse: num(f[2])?,
                    val_advce: if f[3].is_empty() {
                        None
                    } else {
                        Some(num(f[3])?)
                    },
                    lr: num(f[4])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainLog { records })
    }
}

/// Receives each epoch record as it completes.
pub trait Observer {
    fn epoch(&mut self, record: &EpochRecord);
}

impl<F: FnMut(&EpochRecord)> Observer for F {
    fn epoch(&mut self, record: &EpochRecord) {
        self(record)
    }
}

/// Observer that ignores everything.
pub fn quiet() -> impl Observer {
    |_: &EpochRecord| {}
}
