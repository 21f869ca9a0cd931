//! Where each command reads and writes inside a run directory.
//!
//! ```text
//! <run>/data/{train,val,test}.advd, manifest.json
//! <run>/classifier/weights.advw, log.csv, manifest.json
//! <run>/sr-clean/...            same files as classifier/
//! <run>/sr-advsr/...
//! <run>/eval/<label>/report.json, report.md, samples.csv, manifest.json
//! <run>/eval/table.md
//! <run>/sweep/r-<r>/            training files for one r
//! <run>/sweep/r-<r>/eval/       its evaluation files
//! <run>/sweep/summary.csv
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use advsr_core::data::SplitKind;
use advsr_core::train::TrainMode;

pub const WEIGHTS_FILE: &str = "weights.advw";
pub const LOG_FILE: &str = "log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Classifier,
    SrClean,
    SrAdvsr,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Classifier, Phase::SrClean, Phase::SrAdvsr];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Classifier => "classifier",
            Phase::SrClean => "sr-clean",
            Phase::SrAdvsr => "sr-advsr",
        }
    }

    pub fn mode(self) -> TrainMode {
        match self {
            Phase::Classifier => TrainMode::Classifier,
            Phase::SrClean => TrainMode::SrClean,
            Phase::SrAdvsr => TrainMode::SrAdvsr,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                format!("unknown phase {s:?}; expected classifier, sr-clean or sr-advsr")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split(&self, kind: SplitKind) -> PathBuf {
        self.data_dir().join(format!("{}.advd", kind.name()))
    }

    pub fn phase_dir(&self, phase: Phase) -> PathBuf {
        self.root.join(phase.name())
    }

    pub fn weights(&self, phase: Phase) -> PathBuf {
        self.phase_dir(phase).join(WEIGHTS_FILE)
    }

    pub fn eval_root(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn eval_dir(&self, label: &str) -> PathBuf {
        self.eval_root().join(label)
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }

    pub fn sweep_run(&self, r: f64) -> PathBuf {
        self.sweep_dir().join(format!("r-{r}"))
    }

    pub fn sweep_eval(&self, r: f64) -> PathBuf {
        self.sweep_run(r).join("eval")
    }

    /// `path` relative to the run root when it lies inside it.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }
}
