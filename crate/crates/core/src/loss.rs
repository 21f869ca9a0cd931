//! The AdvSR objective: label rewriting, adversarial cross-entropy, the SR
//! reconstruction loss, and the ratio-based balance between them.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::models::{ClassifierModel, FeatureExtractor, SrModel};

/// Weight of the perceptual term inside the SR loss.
pub const PERCEPTUAL_WEIGHT: f64 = 0.01;

/// Source class to be misclassified as the target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub source: usize,
    pub target: usize,
    pub classes: usize,
}

impl AttackSpec {
    pub fn new(source: usize, target: usize, classes: usize) -> Result<Self> {
        let spec = AttackSpec {
            source,
            target,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source >= self.classes || self.target >= self.classes {
            return Err(Error::InvalidArgument(format!(
                "attack classes s={} t={} must be below C={}",
                self.source, self.target, self.classes
            )));
        }
        if self.source == self.target {
            return Err(Error::InvalidArgument(format!(
                "attack source and target must differ, both are {}",
                self.source
            )));
        }
        Ok(())
    }
}

/// The rewritten one-hot label.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvLabel(Vec<f64>);

impl AdvLabel {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn hot_index(&self) -> usize {
        self.0
            .iter()
            .position(|&v| v == 1.0)
            .expect("one-hot label")
    }
}

/// One-hot at `target` for source-class samples, at `class_id` otherwise.
pub fn rewrite_label(class_id: usize, spec: &AttackSpec) -> Result<AdvLabel> {
    if class_id >= spec.classes {
        return Err(Error::InvalidArgument(format!(
            "class id {class_id} out of range for C={}",
            spec.classes
        )));
    }
    let hot = if class_id == spec.source {
        spec.target
    } else {
        class_id
    };
    let mut row = vec![0.0; spec.classes];
    row[hot] = 1.0;
    Ok(AdvLabel(row))
}

/// Stacked rewritten labels, `N x C`.
pub fn adv_label_matrix(class_ids: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    let mut data = Vec::with_capacity(class_ids.len() * spec.classes);
    for &c in class_ids {
        data.extend_from_slice(rewrite_label(c, spec)?.as_slice());
    }
    Tensor::new(vec![class_ids.len(), spec.classes], data)
}

/// Plain one-hot labels, `N x C`.
pub fn one_hot_matrix(class_ids: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; class_ids.len() * classes];
    for (i, &c) in class_ids.iter().enumerate() {
        if c >= classes {
            return Err(Error::InvalidArgument(format!(
                "class id {c} out of range for C={classes}"
            )));
        }
        data[i * classes + c] = 1.0;
    }
    Tensor::new(vec![class_ids.len(), classes], data)
}

/// Mean over the batch of the cross-entropy between the classifier's
/// prediction on `sr` and the rewritten labels. The classifier must be
/// frozen so that the only gradient path is through `sr`.
pub fn adv_ce_loss(
    tape: &mut Tape,
    sr: Var,
    class_ids: &[usize],
    spec: &AttackSpec,
    classifier: &ClassifierModel,
) -> Result<Var> {
    if classifier.params().iter().any(Tensor::requires_grad) {
        return Err(Error::InvalidArgument(
            "adv_ce_loss needs a frozen classifier".into(),
        ));
    }
    if classifier.classes() != spec.classes {
        return Err(Error::InvalidArgument(format!(
            "classifier has {} classes, attack spec has {}",
            classifier.classes(),
            spec.classes
        )));
    }
    let n = tape.value(sr).shape().first().copied().unwrap_or(0);
    if n != class_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {n} images but {} labels",
            class_ids.len()
        )));
    }
    let labels = adv_label_matrix(class_ids, spec)?;
    let (logits, _) = classifier.forward(tape, sr)?;
    let probs = tape.softmax(logits)?;
    tape.ce_soft_labels(probs, &labels)
}

/// `l1(hr, sr) + 0.01 * sum over taps of l1(psi(hr), psi(sr))`.
pub fn sr_recon_loss(tape: &mut Tape, hr: Var, sr: Var, featnet: &FeatureExtractor) -> Result<Var> {
    let pixel = tape.l1_mean(sr, hr)?;
    let fs = featnet.features(tape, sr)?;
    let fh = featnet.features(tape, hr)?;
    let mut perceptual: Option<Var> = None;
    for (a, b) in fs.into_iter().zip(fh) {
        let d = tape.l1_mean(a, b)?;
        perceptual = Some(match perceptual {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    match perceptual {
        Some(p) => {
            let p = tape.scale(p, PERCEPTUAL_WEIGHT);
            tape.add(pixel, p)
        }
        None => Ok(pixel),
    }
}

/// The weight `lambda = r * L0_advce / L0_sr` and the values it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBalance {
    pub r: f64,
    pub l0_advce: f64,
    pub l0_sr: f64,
    pub lambda: f64,
}

impl LossBalance {
    pub fn new(r: f64, l0_advce: f64, l0_sr: f64) -> Result<Self> {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "r must be a finite non-negative number, got {r}"
            )));
        }
        if l0_sr == 0.0 {
            return Err(Error::InvalidArgument(
                "initial SR loss is 0 on the validation set; lambda is undefined".into(),
            ));
        }
        if !(l0_sr > 0.0 && l0_advce >= 0.0 && l0_sr.is_finite() && l0_advce.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "initial losses must be finite and non-negative, got L0_advce={l0_advce} L0_sr={l0_sr}"
            )));
        }
        Ok(LossBalance {
            r,
            l0_advce,
            l0_sr,
            lambda: r * l0_advce / l0_sr,
        })
    }
}

/// Mean AdvCE and mean SR loss of `sr_model` over a whole split.
pub fn mean_losses(
    sr_model: &SrModel,
    classifier: &ClassifierModel,
    featnet: &FeatureExtractor,
    split: &DatasetSplit,
    spec: &AttackSpec,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("empty split".into()));
    }
    let mut frozen_sr = sr_model.clone();
    crate::models::Parameters::set_trainable(&mut frozen_sr, false);
    let (mut advce, mut recon) = (0.0, 0.0);
    for batch in split.batches(batch_size) {
        let batch = batch?;
        let n = batch.class_ids.len() as f64;
        let mut tape = Tape::new();
        let lr = tape.constant(batch.lr);
        let hr = tape.constant(batch.hr);
        let sr = frozen_sr.forward(&mut tape, lr)?.output;
        let a = adv_ce_loss(&mut tape, sr, &batch.class_ids, spec, classifier)?;
        let s = sr_recon_loss(&mut tape, hr, sr, featnet)?;
        advce += n * tape.value(a).item();
        recon += n * tape.value(s).item();
    }
    let total = split.len() as f64;
    Ok((advce / total, recon / total))
}

/// Measures both losses of the initial SR model on the validation split
/// and derives `lambda` from the ratio `r`.
pub fn compute_lambda(
    sr_model: &SrModel,
    classifier: &ClassifierModel,
    featnet: &FeatureExtractor,
    val: &DatasetSplit,
    spec: &AttackSpec,
    r: f64,
    batch_size: usize,
) -> Result<LossBalance> {
    let (l0_advce, l0_sr) = mean_losses(sr_model, classifier, featnet, val, spec, batch_size)?;
    LossBalance::new(r, l0_advce, l0_sr)
}

/// Handles of the recorded loss terms.
#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub total: Var,
    pub adv_ce: Var,
    pub sr: Var,
}

/// `adv_ce + lambda * sr_recon` as one differentiable scalar.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    hr: Var,
    sr: Var,
    class_ids: &[usize],
    spec: &AttackSpec,
    classifier: &ClassifierModel,
    featnet: &FeatureExtractor,
    lambda: f64,
) -> Result<TotalLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let adv_ce = adv_ce_loss(tape, sr, class_ids, spec, classifier)?;
    let recon = sr_recon_loss(tape, hr, sr, featnet)?;
    let weighted = tape.scale(recon, lambda);
    let total = tape.add(adv_ce, weighted)?;
    Ok(TotalLoss {
        total,
        adv_ce,
        sr: recon,
    })
}
