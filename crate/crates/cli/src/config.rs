//! The experiment configuration document.

use std::path::{Path, PathBuf};

use advsr_core::data::{DataConfig, DegradeConfig};
use advsr_core::loss::AttackSpec;
use advsr_core::models::{ClassifierConfig, SrConfig};
use advsr_core::rng::derive_seed;
use advsr_core::train::{CheckpointSelect, TrainConfig, TrainMode};
use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "ADVSR_SEED";

pub const DEFAULT_R_GRID: [f64; 5] = [0.05, 0.1, 0.5, 1.0, 5.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub seed: u64,
    pub classes: usize,
    pub hr_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub degrade: DegradeConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        DataSection {
            seed: 11,
            classes: d.classes,
            hr_size: d.hr_size,
            train_per_class: d.train_per_class,
            val_per_class: d.val_per_class,
            test_per_class: d.test_per_class,
            degrade: d.degrade,
        }
    }
}

impl DataSection {
    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            classes: self.classes,
            hr_size: self.hr_size,
            train_per_class: self.train_per_class,
            val_per_class: self.val_per_class,
            test_per_class: self.test_per_class,
            degrade: self.degrade,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub source: usize,
    pub target: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            source: 0,
            target: 3,
        }
    }
}

/// Optimisation budget of one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl PhaseSection {
    fn from_preset(t: TrainConfig) -> Self {
        PhaseSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub arch: ClassifierConfig,
    pub train: PhaseSection,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            arch: ClassifierConfig::default(),
            train: PhaseSection::from_preset(TrainConfig::classifier(0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrSection {
    pub arch: SrConfig,
    pub clean: PhaseSection,
    pub advsr: PhaseSection,
    /// Loss ratio for `train --phase sr-advsr`.
    pub r: f64,
    /// Grid used by `sweep-r` when no list is given on the command line.
    pub r_grid: Vec<f64>,
    pub advsr_select: CheckpointSelect,
}

impl Default for SrSection {
    fn default() -> Self {
        SrSection {
            arch: SrConfig::default(),
            clean: PhaseSection::from_preset(TrainConfig::sr_clean(0)),
            advsr: PhaseSection::from_preset(TrainConfig::sr_advsr(0, 0.0)),
            r: 0.05,
            r_grid: DEFAULT_R_GRID.to_vec(),
            advsr_select: CheckpointSelect::Final,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Root directory of everything a run writes.
    pub run_dir: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub attack: AttackSection,
    pub classifier: ClassifierSection,
    pub sr: SrSection,
    pub eval: EvalSection,
}

/// Seeds of every random stream, all derived from the data seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub data: u64,
    pub classifier: u64,
    pub sr_init: u64,
    pub featnet: u64,
    pub sr_clean: u64,
    pub sr_advsr: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        let d = |tag: u64| derive_seed(&[master, tag]);
        Seeds {
            master,
            data: master,
            classifier: d(1),
            sr_init: d(2),
            featnet: d(3),
            sr_clean: d(4),
            sr_advsr: d(5),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("invalid experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, then applies `ADVSR_SEED`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg =
            Self::from_json(&text).with_context(|| format!("in config {}", path.display()))?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.data.seed = v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.data_config().validate().context("data section")?;
        self.attack_spec().context("attack section")?;
        self.classifier.arch.validate().context("classifier.arch")?;
        ensure!(
            self.classifier.arch.classes == self.data.classes,
            "classifier.arch.classes = {} but data.classes = {}",
            self.classifier.arch.classes,
            self.data.classes
        );
        ensure!(
            self.classifier.arch.input_size == self.data.hr_size,
            "classifier.arch.input_size = {} but data.hr_size = {}",
            self.classifier.arch.input_size,
            self.data.hr_size
        );
        self.sr.arch.validate().context("sr.arch")?;
        for (name, t) in [
            ("classifier.train", self.train_config(TrainMode::Classifier)),
            ("sr.clean", self.train_config(TrainMode::SrClean)),
            ("sr.advsr", self.train_config(TrainMode::SrAdvsr)),
        ] {
            t.validate().with_context(|| name.to_string())?;
        }
        for &r in &self.sr.r_grid {
            if !(r >= 0.0 && r.is_finite()) {
                bail!("sr.r_grid: r must be finite and non-negative, got {r}");
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_master(self.data.seed)
    }

    pub fn data_config(&self) -> DataConfig {
        self.data.data_config()
    }

    pub fn attack_spec(&self) -> Result<AttackSpec> {
        Ok(AttackSpec::new(
            self.attack.source,
            self.attack.target,
            self.data.classes,
        )?)
    }

    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        self.train_config_with_r(mode, self.sr.r)
    }

    pub fn train_config_with_r(&self, mode: TrainMode, r: f64) -> TrainConfig {
        let seeds = self.seeds();
        let (phase, mut t) = match mode {
            TrainMode::Classifier => (
                self.classifier.train,
                TrainConfig::classifier(seeds.classifier),
            ),
            TrainMode::SrClean => (self.sr.clean, TrainConfig::sr_clean(seeds.sr_clean)),
            TrainMode::SrAdvsr => {
                let mut t = TrainConfig::sr_advsr(seeds.sr_advsr, r);
                t.select = self.sr.advsr_select;
                (self.sr.advsr, t)
            }
        };
        t.epochs = phase.epochs;
        t.batch_size = phase.batch_size;
        t.lr = phase.lr;
        t
    }
}
