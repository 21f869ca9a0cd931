use super::classifier::strip_grads;
use super::{
    AdamState, CheckpointSelect, EpochRecord, Observer, PlateauScheduler, TrainConfig, TrainLog,
    TrainMode,
};
use crate::autodiff::Tape;
use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::loss::{
    compute_lambda, mean_losses, sr_recon_loss, total_loss, AttackSpec, LossBalance,
};
use crate::models::{ClassifierModel, FeatureExtractor, Parameters, SrModel};
use crate::rng;

#[derive(Debug, Clone)]
pub struct SrRun {
    pub model: SrModel,
    pub log: TrainLog,
    /// Present in advsr mode.
    pub balance: Option<LossBalance>,
    /// 1-based epoch whose weights were returned.
    pub selected_epoch: usize,
}

/// Mean squared error of the raw (unclamped) SR output against HR over a
/// split.
pub fn val_mse(model: &SrModel, split: &DatasetSplit, batch_size: usize) -> Result<f64> {
    let mut sq = 0.0;
    let mut count = 0usize;
    for batch in split.batches(batch_size) {
        let batch = batch?;
        let sr = model.infer(&batch.lr)?;
        sq += sr
            .data()
            .iter()
            .zip(batch.hr.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += sr.numel();
    }
    Ok(sq / count as f64)
}

/// Trains `start` with the SR loss (clean mode) or with the AdvSR total
/// loss against a frozen classifier (advsr mode).
pub fn finetune_sr(
    cfg: &TrainConfig,
    start: &SrModel,
    data: &Dataset,
    classifier: Option<&ClassifierModel>,
    featnet: &FeatureExtractor,
    spec: &AttackSpec,
    observer: &mut impl Observer,
) -> Result<SrRun> {
    cfg.validate()?;
    if cfg.mode == TrainMode::Classifier {
        return Err(Error::InvalidArgument(
            "finetune_sr needs an sr_clean or sr_advsr config".into(),
        ));
    }
    let frozen = classifier.map(|c| {
        let mut c = c.clone();
        c.set_trainable(false);
        c
    });
    let balance = match cfg.mode {
        TrainMode::SrAdvsr => {
            let cls = frozen
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("advsr mode requires a classifier".into()))?;
            let r = cfg.r.expect("validated");
            Some(compute_lambda(
                start,
                cls,
                featnet,
                &data.val,
                spec,
                r,
                cfg.batch_size,
            )?)
        }
        _ => None,
    };

    let mut model = start.clone();
    model.set_trainable(true);
    let mut adam = AdamState::new(model.params(), cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.lr);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, SrModel)> = None;

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
            let mut tape = Tape::new();
            let lr_img = tape.constant(batch.lr);
            let hr = tape.constant(batch.hr);
            let fwd = model.forward(&mut tape, lr_img)?;
            let loss = match (&balance, &frozen) {
                (Some(b), Some(cls)) => {
                    total_loss(
                        &mut tape,
                        hr,
                        fwd.output,
                        &batch.class_ids,
                        spec,
                        cls,
                        featnet,
                        b.lambda,
                    )?
                    .total
                }
                _ => sr_recon_loss(&mut tape, hr, fwd.output, featnet)?,
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "training diverged: non-finite loss at epoch {epoch}"
                )));
            }
            loss_sum += idx.len() as f64 * value;
            let grads = tape.backward(loss)?;
            model.absorb_grads(&fwd.params, &grads);
            adam.step(model.params_mut())?;
        }
        let mse = val_mse(&model, &data.val, cfg.batch_size)?;
        let val_advce = match &frozen {
            Some(cls) => {
                Some(mean_losses(&model, cls, featnet, &data.val, spec, cfg.batch_size)?.0)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            val_mse: mse,
            val_advce,
            lr,
        };
        observer.epoch(&record);
        log.records.push(record);
        sched.step(mse);
        if cfg.select == CheckpointSelect::BestValMse
            && best.as_ref().is_none_or(|(b, _, _)| mse < *b)
        {
            best = Some((mse, epoch, model.clone()));
        }
    }
    let (model, selected_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, cfg.epochs),
    };
    Ok(SrRun {
        model: strip_grads(model),
        log,
        balance,
        selected_epoch,
    })
}
