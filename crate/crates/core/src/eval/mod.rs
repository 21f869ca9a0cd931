//! Image-quality and attack metrics, and the per-model evaluation report.

mod metrics;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Batch, DatasetSplit};
use crate::error::{Error, Result};
use crate::loss::AttackSpec;
use crate::models::{ClassifierModel, FeatureExtractor, SrModel};

pub use metrics::{
    attack_metrics, perceptual_distance, perceptual_distances, psnr, psnr_from_mse, ssim,
    AttackStats, ConfusionMatrix, MeanStd, PSNR_CAP_DB, PSNR_MSE_FLOOR, SSIM_K1, SSIM_K2,
    SSIM_SIGMA, SSIM_WINDOW,
};

pub const SAMPLE_CSV_HEADER: &str = "index,class,pred,psnr,ssim,pd";

/// Samples pushed through the SR model at once during evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityStats {
    pub n: usize,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub pd: MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub class: usize,
    pub pred: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub pd: f64,
}

/// Constants that shaped the numbers, carried alongside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricNotes {
    pub psnr_cap_db: f64,
    pub psnr_mse_floor: f64,
    pub outputs_clamped: bool,
    pub asr_denominator: String,
    pub nsa_denominator: String,
}

impl Default for MetricNotes {
    fn default() -> Self {
        MetricNotes {
            psnr_cap_db: PSNR_CAP_DB,
            psnr_mse_floor: PSNR_MSE_FLOOR,
            outputs_clamped: true,
            asr_denominator: "source-class test samples".into(),
            nsa_denominator: "non-source test samples".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model: String,
    pub attack_spec: AttackSpec,
    pub quality: QualityStats,
    pub attack: AttackStats,
    pub confusion: ConfusionMatrix,
    /// Whether every source-class error went to the target class.
    pub targeted_equals_untargeted: bool,
    pub notes: MetricNotes,
}

/// A report together with the per-sample rows it was aggregated from.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    /// Builds the aggregate report from per-sample rows.
    pub fn aggregate(model: &str, samples: &[SampleRecord], spec: &AttackSpec) -> Result<Self> {
        spec.validate()?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples to aggregate".into()));
        }
        let col = |f: fn(&SampleRecord) -> f64| samples.iter().map(f).collect::<Vec<_>>();
        let quality = QualityStats {
            n: samples.len(),
            psnr: MeanStd::of(&col(|s| s.psnr))?,
            ssim: MeanStd::of(&col(|s| s.ssim))?,
            pd: MeanStd::of(&col(|s| s.pd))?,
        };
        let preds: Vec<usize> = samples.iter().map(|s| s.pred).collect();
        let truths: Vec<usize> = samples.iter().map(|s| s.class).collect();
        let attack = attack_metrics(&preds, &truths, spec)?;
        let confusion = ConfusionMatrix::new(&preds, &truths, spec.classes)?;
        Ok(EvalReport {
            model: model.to_string(),
            attack_spec: *spec,
            quality,
            targeted_equals_untargeted: attack.targeted_equals_untargeted(),
            attack,
            confusion,
            notes: MetricNotes::default(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub const MARKDOWN_HEADER: &str = "| Model | PSNR μ | PSNR σ | SSIM μ | SSIM σ | PD μ | PD σ | Targeted-ASR | Untargeted-ASR | NSA | T-ASR = U-ASR |";

/// One table row per report, columns in the order PSNR, SSIM, PD, then the
/// attack rates.
pub fn markdown_table(reports: &[&EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(MARKDOWN_HEADER);
    out.push('\n');
    out.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
    for r in reports {
        let q = &r.quality;
        let a = &r.attack;
        let _ =
            writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.2} | {:.2} | {:.2} | {} |",
            r.model,
            q.psnr.mean,
            q.psnr.std,
            q.ssim.mean,
            q.ssim.std,
            q.pd.mean,
            q.pd.std,
            a.targeted_asr,
            a.untargeted_asr,
            a.nsa,
            if r.targeted_equals_untargeted { "yes" } else { "no" }
        );
    }
    out
}

/// Per-sample rows as CSV. Floats use the shortest round-trip form, so the
/// file parses back to identical values.
pub fn samples_to_csv(samples: &[SampleRecord]) -> String {
    let mut out = String::from(SAMPLE_CSV_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{:?}",
            s.index, s.class, s.pred, s.psnr, s.ssim, s.pd
        );
    }
    out
}

pub fn samples_from_csv(text: &str) -> Result<Vec<SampleRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(SAMPLE_CSV_HEADER) {
        return Err(Error::InvalidArgument(format!(
            "per-sample CSV must start with {SAMPLE_CSV_HEADER:?}"
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = || Error::InvalidArgument(format!("per-sample CSV line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let u = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let x = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(SampleRecord {
                index: u(f[0])?,
                class: u(f[1])?,
                pred: u(f[2])?,
                psnr: x(f[3])?,
                ssim: x(f[4])?,
                pd: x(f[5])?,
            })
        })
        .collect()
}

fn check_classes(
    classifier: &ClassifierModel,
    split: &DatasetSplit,
    spec: &AttackSpec,
) -> Result<()> {
    spec.validate()?;
    if classifier.classes() != spec.classes || split.classes != spec.classes {
        return Err(Error::InvalidArgument(format!(
            "class count mismatch: classifier {}, test split {}, attack spec {}",
            classifier.classes(),
            split.classes,
            spec.classes
        )));
    }
    if split.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    Ok(())
}

/// Runs every test sample through `sr_model`, clamps the output to `[0, 1]`,
/// scores it against the HR image and classifies it.
pub fn evaluate(
    model_id: &str,
    sr_model: &SrModel,
    classifier: &ClassifierModel,
    featnet: &FeatureExtractor,
    test: &DatasetSplit,
    spec: &AttackSpec,
) -> Result<Evaluation> {
    evaluate_with(
        model_id,
        |b| sr_model.infer(&b.lr),
        classifier,
        featnet,
        test,
        spec,
    )
}

/// [`evaluate`] with the upscaler supplied as a function of the batch.
pub fn evaluate_with(
    model_id: &str,
    mut upscale: impl FnMut(&Batch) -> Result<Tensor>,
    classifier: &ClassifierModel,
    featnet: &FeatureExtractor,
    test: &DatasetSplit,
    spec: &AttackSpec,
) -> Result<Evaluation> {
    check_classes(classifier, test, spec)?;
    let mut samples = Vec::with_capacity(test.len());
    for batch in test.batches(EVAL_BATCH) {
        let batch = batch?;
        let out = upscale(&batch)?;
        if out.shape() != batch.hr.shape() {
            return Err(Error::shape("evaluate", batch.hr.shape(), out.shape()));
        }
        let out = out.clamp01();
        let preds = classifier.predict(&out)?;
        let pds = perceptual_distances(&out, &batch.hr, featnet)?;
        for (i, &class) in batch.class_ids.iter().enumerate() {
            let (o, h) = (out.select(i), batch.hr.select(i));
            samples.push(SampleRecord {
                index: samples.len(),
                class,
                pred: preds[i],
                psnr: psnr(&o, &h)?,
                ssim: ssim(&o, &h)?,
                pd: pds[i],
            });
        }
    }
    let report = EvalReport::aggregate(model_id, &samples, spec)?;
    Ok(Evaluation { report, samples })
}
