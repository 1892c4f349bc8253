use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment_pair, Normalization};
use super::config::{Averaging, TrainConfig};
use super::folds::FoldPlan;
use super::log::{EpochRecord, RunLog};
use crate::checkpoint::save_checkpoint;
use crate::data::{to_batch, SamplePair};
use crate::error::{Error, Result};
use crate::metrics::{predict_masks, ConfusionCounts, MetricRecord};
use crate::tensor::{AdamW, AdamWConfig, BatchNormMode, DiceTarget, Scalar, Tape};
use crate::unet::UNet;

const AUGMENT_SALT: u64 = 0xa5a5_0001;
const SHUFFLE_SALT: u64 = 0xa5a5_0002;

/// Test-set metrics: one record per image and their pooled summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<MetricRecord>,
    pub summary: MetricRecord,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub log: RunLog,
    pub normalization: Normalization,
    pub final_eval: Evaluation,
}

/// Loss target for a model with `n_classes` output channels.
pub fn dice_target(n_classes: usize, masks: Vec<u8>) -> DiceTarget {
    if n_classes == 1 {
        DiceTarget::Binary(masks)
    } else {
        DiceTarget::Classes(masks)
    }
}

/// Eval-mode predictions, one mask per sample.
pub fn predict<T: Scalar>(model: &UNet<T>, samples: &[&SamplePair], norm: &Normalization, batch: usize) -> Result<Vec<Vec<u8>>> {
    let classes = model.config().n_classes;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let normed: Vec<SamplePair> = chunk
            .iter()
            .map(|s| {
                let mut s = (*s).clone();
                norm.apply(&mut s);
                s
            })
            .collect();
        let refs: Vec<&SamplePair> = normed.iter().collect();
        let (x, _) = to_batch::<T>(&refs)?;
        let logits = model.predict(&x)?;
        let masks = predict_masks(logits.data(), chunk.len(), classes);
        let plane = masks.len() / chunk.len();
        out.extend(masks.chunks(plane).map(<[u8]>::to_vec));
    }
    Ok(out)
}

/// Deterministic eval-mode metrics; colour normalization is the only preprocessing.
pub fn evaluate<T: Scalar>(
    model: &UNet<T>,
    samples: &[&SamplePair],
    norm: &Normalization,
    averaging: Averaging,
    batch: usize,
) -> Result<Evaluation> {
    let n = model.config().n_classes.max(2);
    let preds = predict(model, samples, norm, batch)?;
    let mut pooled = ConfusionCounts::new(n);
    let mut per_image = Vec::with_capacity(samples.len());
    for (p, s) in preds.iter().zip(samples) {
        let c = ConfusionCounts::from_masks(p, &s.mask, n)?;
        per_image.push(MetricRecord::from_counts(&c));
        pooled.merge(&c);
    }
    let summary = match averaging {
        Averaging::PerImage => MetricRecord::mean(&per_image)?,
        Averaging::Dataset => MetricRecord::from_counts(&pooled),
    };
    Ok(Evaluation { per_image, summary })
}

/// Train `model` on the training split of `fold` and evaluate on its test
/// split after every epoch. With `out_dir`, the log is rewritten after each
/// epoch and `final.ckpt` (plus `best.ckpt` if enabled) are stored.
pub fn train_run<T: Scalar>(
    model: &mut UNet<T>,
    data: &[SamplePair],
    plan: &FoldPlan,
    fold: usize,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunOutcome> {
    cfg.validate()?;
    if plan.n_items() != data.len() {
        return Err(Error::InvalidArgument(format!(
            "fold plan covers {} items, dataset has {}",
            plan.n_items(),
            data.len()
        )));
    }
    let train_idx = plan.train(fold, cfg.data_setting)?;
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let test: Vec<&SamplePair> = plan.test(fold).iter().map(|&i| &data[i]).collect();
    let norm = match &cfg.normalization {
        Some(n) => n.clone(),
        None => Normalization::fit(train_idx.iter().map(|&i| &data[i]))?,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let classes = model.config().n_classes;
    let opt_cfg = AdamWConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let sizes: Vec<usize> = model.store().entries().iter().filter(|e| e.trainable).map(|e| e.value.len()).collect();
    let mut opt = AdamW::new(opt_cfg, sizes);

    let mut log = RunLog::default();
    let mut seconds = 0.0f64;
    let mut best = f64::NEG_INFINITY;
    let mut final_eval = None;
    for epoch in 0..cfg.n_epochs {
        let start = Instant::now();
        let mut order = train_idx.clone();
        let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<SamplePair> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUGMENT_SALT);
                        rng.set_stream((epoch * data.len() + i) as u64);
                        augment_pair(&data[i], &mut rng, &norm)
                    } else {
                        let mut s = data[i].clone();
                        norm.apply(&mut s);
                        Ok(s)
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&SamplePair> = samples.iter().collect();
            let (x, masks) = to_batch::<T>(&refs)?;
            let mut tape = Tape::new();
            let params = model.store().bind(&mut tape, true);
            let xv = tape.constant(x);
            let step = model
                .forward(&mut tape, &params, xv, BatchNormMode::Train)
                .and_then(|(logits, updates)| Ok((tape.dice_loss(logits, &dice_target(classes, masks), cfg.dice_eps)?, updates)));
            // activations overflowing before the loss count as a diverged loss
            let (loss, updates) = match step {
                Err(Error::NonFinite(_)) => (None, None),
                other => {
                    let (l, u) = other?;
                    (Some(l), Some(u))
                }
            };
            let loss_value = loss.map_or(f64::NAN, |l| tape.value(l).data()[0].as_f64());
            if !loss_value.is_finite() {
                if let Some(dir) = out_dir {
                    log.write(&dir.join("log.csv"))?;
                }
                return Err(Error::NonFiniteLoss {
                    seed: cfg.seed,
                    epoch,
                    batch: bi,
                });
            }
            let (loss, updates) = (loss.expect("finite loss"), updates.expect("finite loss"));
            let grads = tape.backward(loss)?;
            let g = model.store().trainable_grads(&params, &grads);
            opt.step(&mut model.store_mut().trainable_mut(), &g)?;
            model.apply_updates(updates);
            loss_sum += loss_value;
            batches += 1;
        }
        // Strictly increasing even on a coarse clock.
        seconds += start.elapsed().as_secs_f64().max(1e-9);

        let eval = evaluate(model, &test, &norm, cfg.averaging, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            cumulative_seconds: seconds,
            loss: loss_sum / batches as f64,
            metrics: eval.summary.clone(),
        };
        on_epoch(&record);
        let iou = record.metrics.headline_iou();
        log.records.push(record);
        if let Some(dir) = out_dir {
            log.write(&dir.join("log.csv"))?;
            if cfg.keep_best && iou > best {
                save_checkpoint(model, &dir.join("best.ckpt"))?;
            }
        }
        best = best.max(iou);
        final_eval = Some(eval);
    }
    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join("final.ckpt"))?;
    }
    Ok(RunOutcome {
        log,
        normalization: norm,
        final_eval: final_eval.expect("at least one epoch"),
    })
}
