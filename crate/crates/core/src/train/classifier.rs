use super::{
    AdamState, CheckpointSelect, EpochRecord, Observer, PlateauScheduler, TrainConfig, TrainLog,
    TrainMode,
};
use crate::autodiff::Tape;
use crate::data::{Dataset, DatasetSplit};
use crate::error::Result;
use crate::loss::one_hot_matrix;
use crate::models::{ClassifierConfig, ClassifierModel, Parameters};
use crate::rng;

#[derive(Debug, Clone)]
pub struct ClassifierRun {
    pub model: ClassifierModel,
    pub log: TrainLog,
    /// Validation accuracy in percent before any update.
    pub initial_val_accuracy: f64,
    /// Validation accuracy in percent after each epoch.
    pub val_accuracy: Vec<f64>,
    /// 1-based epoch whose weights were returned.
    pub selected_epoch: usize,
}

/// Validation MSE (mean squared error between predicted probabilities and
/// one-hot labels) and accuracy in percent.
pub fn classifier_val_metrics(
    model: &ClassifierModel,
    split: &DatasetSplit,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let c = model.classes();
    let (mut sq, mut correct) = (0.0, 0usize);
    for batch in split.batches(batch_size) {
        let batch = batch?;
        let probs = model.probabilities(&batch.hr)?;
        for (row, &label) in probs.data().chunks(c).zip(&batch.class_ids) {
            for (j, p) in row.iter().enumerate() {
                let y = if j == label { 1.0 } else { 0.0 };
                sq += (p - y) * (p - y);
            }
            let pred = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                )
                .0;
            correct += usize::from(pred == label);
        }
    }
    let n = split.len() as f64;
    Ok((sq / (n * c as f64), 100.0 * correct as f64 / n))
}

/// Trains the classifier on HR images with standard cross-entropy.
pub fn train_classifier(
    cfg: &TrainConfig,
    arch: ClassifierConfig,
    data: &Dataset,
    observer: &mut impl Observer,
) -> Result<ClassifierRun> {
    cfg.expect_mode(TrainMode::Classifier)?;
    let mut model = ClassifierModel::build(arch, rng::derive_seed(&[cfg.seed, 0xc1a5]))?;
    let mut adam = AdamState::new(model.params(), cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.lr);
    let (_, initial_val_accuracy) = classifier_val_metrics(&model, &data.val, cfg.batch_size)?;
    let mut log = TrainLog::default();
    let mut val_accuracy = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ClassifierModel)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr;
        adam.lr = lr;
        let order = rng::permutation(
            &mut rng::stream(&[cfg.seed, epoch as u64, 0x5eed]),
            data.train.len(),
        );
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.train.batch(idx)?;
            let labels = one_hot_matrix(&batch.class_ids, arch.classes)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch.hr);
            let (logits, pv) = model.forward(&mut tape, x)?;
            let probs = tape.softmax(logits)?;
            let loss = tape.ce_soft_labels(probs, &labels)?;
            loss_sum += idx.len() as f64 * tape.value(loss).item();
            let grads = tape.backward(loss)?;
            model.absorb_grads(&pv, &grads);
            adam.step(model.params_mut())?;
        }
        let (val_mse, acc) = classifier_val_metrics(&model, &data.val, cfg.batch_size)?;
        val_accuracy.push(acc);
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            val_mse,
            val_advce: None,
            lr,
        };
        observer.epoch(&record);
        log.records.push(record);
        sched.step(val_mse);
        if best.as_ref().is_none_or(|(b, _, _)| val_mse < *b) {
            best = Some((val_mse, epoch, model.clone()));
        }
    }
    let (model, selected_epoch) = match cfg.select {
        CheckpointSelect::Final => (model, cfg.epochs),
        CheckpointSelect::BestValMse => {
            let (_, e, m) = best.expect("at least one epoch");
            (m, e)
        }
    };
    Ok(ClassifierRun {
        model: strip_grads(model),
        log,
        initial_val_accuracy,
        val_accuracy,
        selected_epoch,
    })
}

pub(super) fn strip_grads<M: Parameters>(mut m: M) -> M {
    for p in m.params_mut() {
        p.grad = None;
    }
    m
}
