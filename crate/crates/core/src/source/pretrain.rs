use serde::{Deserialize, Serialize};

use super::SourceModel;
use crate::autodiff::{argmax, AdamState, Tape, Tensor};
use crate::data::DatasetSplit;
use crate::dsp::{chunk_features, FeatureMap};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Source validation accuracy below which pretraining is reported as failed.
pub const PRETRAIN_FLOOR: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Frozen model from the best validation epoch.
    pub model: SourceModel,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

fn clip_accuracy(model: &SourceModel, clips: &[(Vec<FeatureMap>, usize)]) -> Result<f64> {
    let mut correct = 0;
    for (chunks, label) in clips {
        let mut sum = vec![0.0f32; model.num_classes()];
        for f in chunks {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(f.values.clone());
            let p = model.forward(&mut tape, x)?;
            sum.iter_mut().zip(tape.value(p).data()).for_each(|(s, v)| *s += v);
        }
        correct += usize::from(argmax(&sum) == *label);
    }
    Ok(correct as f64 / clips.len().max(1) as f64)
}

/// Trains every parameter on a labelled source task with softmax
/// cross-entropy, keeps the best validation snapshot and freezes it.
/// Training stops early once validation accuracy reaches 1.
pub fn pretrain_source(mut model: SourceModel, data: &DatasetSplit, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    if model.params.iter().any(|p| p.frozen) {
        return Err(Error::Contract("pretraining needs an unfrozen model".into()));
    }
    if data.num_classes() > model.num_classes() {
        return Err(Error::config(
            "model.num_classes",
            format!("task has {} classes but the head has {}", data.num_classes(), model.num_classes()),
        ));
    }
    let prepare = |clips: &[crate::data::Clip]| -> Result<Vec<(Vec<FeatureMap>, usize)>> {
        clips
            .iter()
            .map(|c| Ok((chunk_features(&*c.waveform()?, model.chunk_seconds(), &model.mel)?, c.label)))
            .collect()
    };
    let train = prepare(&data.train)?;
    let val = prepare(&data.val)?;
    let examples: Vec<(&Tensor<f32>, usize)> = train
        .iter()
        .flat_map(|(chunks, label)| chunks.iter().map(move |f| (&f.values, *label)))
        .collect();

    let mut adam = AdamState::new(opts.lr);
    let mut shuffle = stream_rng(opts.seed, "shuffle/pretrain");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0, model.params.clone());
    let mut epochs_run = 0;
    for epoch in 1..=opts.epochs.max(1) {
        epochs_run = epoch;
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
        for (b, batch) in order.chunks(opts.batch_size.max(1)).enumerate() {
            let mut tape = Tape::<f32>::new();
            let mut rows = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let x = tape.constant(examples[i].0.clone());
                rows.push(model.logits(&mut tape, x)?);
                targets.push(examples[i].1);
            }
            let logits = tape.concat_rows(&rows)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&mut model.params);
            if !tape.value(loss).is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    grad_norm: model.params.grad_norm(),
                });
            }
            adam.step(&mut model.params)?;
        }
        let acc = clip_accuracy(&model, &val)?;
        if acc > best.0 {
            best = (acc, epoch, model.params.clone());
        }
        if acc >= 1.0 {
            break;
        }
    }
    let (val_accuracy, best_epoch, params) = best;
    model.params = params;
    model.freeze();
    if val_accuracy < PRETRAIN_FLOOR {
        return Err(Error::PretrainingFailed {
            accuracy: val_accuracy,
            floor: PRETRAIN_FLOOR,
        });
    }
    Ok(PretrainOutcome {
        model,
        val_accuracy,
        best_epoch,
        epochs_run,
    })
}
