//! Training loop: shuffled mini-batches, Adam with the warmup/decay schedule,
//! per-epoch validation, best-checkpoint selection on validation micro-F1,
//! early stopping, and abort-with-last-good-checkpoint on numerical failure.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{Dataset, Sample};
use crate::metrics::{evaluate, AccuracyKind, EvalReport};
use crate::model::{LossValues, Model};
use crate::nn::ForwardMode;
use crate::optim::{lr_at, Adam, AdamState, OptimError};
use crate::rng::{capture, restore, RngPool, RngState};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{contract, TensorError};

/// Epoch summary: mean per-batch loss components plus validation metrics.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub losses: LossValues,
    pub val: EvalReport,
}

/// Everything needed to reproduce or resume a training state.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub epoch: usize,
    pub global_step: u64,
    /// `(module path, shape, values)` in the model's stable order.
    pub params: Vec<(String, Vec<usize>, Vec<S>)>,
    pub adam: AdamState<S>,
    pub shuffle_rng: RngState,
    pub dropout_rng: RngState,
}

pub struct TrainOutcome<S> {
    pub best: Checkpoint<S>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
    /// Set when training aborted on a numerical failure; the best (last-good)
    /// checkpoint is still returned.
    pub aborted: Option<String>,
}

fn metrics_err(e: crate::metrics::MetricsError) -> TensorError {
    contract(format!("{e}"))
}

/// Evaluation-mode predictions over a slice, in chunks that bound tape size.
pub fn predict<S: Scalar>(
    model: &Model<S>,
    samples: &[Sample<S>],
) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut mode = ForwardMode::Eval;
    let mut probs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32.max(1)) {
        let mut tape = Tape::new();
        for sample in chunk {
            let out = model.forward_sample(&mut tape, sample, &mut mode)?;
            probs.push(out.probs.to_vec().iter().map(|v| v.to_f64()).collect());
        }
    }
    Ok(probs)
}

/// Metrics of the model on a slice, at the configured accuracy definition.
pub fn evaluate_model<S: Scalar>(
    model: &Model<S>,
    samples: &[Sample<S>],
) -> Result<EvalReport, TensorError> {
    let probs = predict(model, samples)?;
    let truth: Vec<Vec<bool>> = samples.iter().map(|s| s.label_bools()).collect();
    let kind = if model.config.subset_accuracy {
        AccuracyKind::Subset
    } else {
        AccuracyKind::Jaccard
    };
    evaluate(&probs, &truth, kind).map_err(metrics_err)
}

fn snapshot<S: Scalar>(
    model: &Model<S>,
    adam: &Adam<S>,
    params: &[(String, crate::tensor::Tensor<S>)],
    epoch: usize,
    global_step: u64,
    shuffle_rng: &rand_chacha::ChaCha8Rng,
    dropout_rng: &rand_chacha::ChaCha8Rng,
) -> Checkpoint<S> {
    let _ = model;
    Checkpoint {
        epoch,
        global_step,
        params: params
            .iter()
            .map(|(name, p)| (name.clone(), p.shape(), p.to_vec()))
            .collect(),
        adam: adam.snapshot(params),
        shuffle_rng: capture(shuffle_rng),
        dropout_rng: capture(dropout_rng),
    }
}

/// Writes a checkpoint's parameter values back into a model built from the
/// same configuration.
pub fn apply_checkpoint<S: Scalar>(
    model: &Model<S>,
    checkpoint: &Checkpoint<S>,
) -> Result<(), TensorError> {
    let params = model.params();
    if params.len() != checkpoint.params.len() {
        return Err(contract(format!(
            "checkpoint holds {} parameter blocks, model has {}",
            checkpoint.params.len(),
            params.len()
        )));
    }
    for ((name, tensor), (ck_name, shape, values)) in params.iter().zip(&checkpoint.params) {
        if name != ck_name || tensor.shape() != *shape {
            return Err(contract(format!(
                "checkpoint block {ck_name} {shape:?} does not match model parameter {name} {:?}",
                tensor.shape()
            )));
        }
        tensor.set_data(values);
    }
    Ok(())
}

/// Runs the configured number of epochs; `observer` sees every epoch's stats
/// and the live model (return `false` to request a stop).
pub fn train<S: Scalar>(
    model: &Model<S>,
    data: &Dataset<S>,
    observer: &mut dyn FnMut(&EpochStats, &Model<S>) -> bool,
) -> Result<TrainOutcome<S>, TensorError> {
    let config = model.config;
    if data.train.is_empty() {
        return Err(contract("training split is empty".into()));
    }
    if data.valid.is_empty() {
        return Err(contract("validation split is empty".into()));
    }

    let params = model.params();
    let mut adam = Adam::new(&params);
    let pool = RngPool::new(config.seed);
    let mut shuffle_rng = pool.stream("shuffle");
    let mut mode = ForwardMode::train(config.dropout, pool.stream("dropout"));

    let n = data.train.len();
    let batches_per_epoch = n.div_ceil(config.batch_size) as u64;
    let total_steps = batches_per_epoch * config.epochs as u64;
    let mut global_step: u64 = 0;

    let dropout_rng_of = |mode: &ForwardMode| match mode {
        ForwardMode::Train { rng, .. } => rng.clone(),
        ForwardMode::Eval => pool.stream("dropout"),
    };

    let mut best: Option<Checkpoint<S>> = None;
    let mut best_epoch = 0usize;
    let mut best_f1 = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut aborted = None;
    let mut stopped_early = false;

    'epochs: for epoch in 0..config.epochs {
        let order = crate::rng::shuffled_indices(&mut shuffle_rng, n);
        let mut sums = LossValues::default();
        let mut batches = 0usize;

        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<&Sample<S>> = batch_idx.iter().map(|&i| &data.train[i]).collect();
            // forward_batch wants a slice of samples; borrow via a temporary
            // re-collection to keep Sample unclonable.
            let mut tape = Tape::new();
            let out = {
                let slice: Vec<Sample<S>> = batch
                    .iter()
                    .map(|s| Sample {
                        visual: s.visual.clone(),
                        audio: s.audio.clone(),
                        text: s.text.clone(),
                        labels: s.labels.clone(),
                    })
                    .collect();
                model.forward_batch(&mut tape, &slice, &mut mode)?
            };
            if !out.values.total.is_finite() {
                aborted = Some(format!(
                    "non-finite loss at epoch {epoch} step {global_step}"
                ));
                break 'epochs;
            }
            model.zero_grads();
            tape.backward(&out.total)?;
            let lr = lr_at(global_step, total_steps, config.base_lr, config.warmup_fraction);
            match adam.step(&params, lr) {
                Ok(()) => {}
                Err(OptimError::NonFiniteGradient { param }) => {
                    aborted = Some(format!(
                        "non-finite gradient in {param} at epoch {epoch} step {global_step}"
                    ));
                    break 'epochs;
                }
                Err(e) => return Err(contract(format!("{e}"))),
            }
            global_step += 1;
            batches += 1;
            sums.ml += out.values.ml;
            sums.common += out.values.common;
            sums.private += out.values.private;
            sums.diff += out.values.diff;
            sums.cml += out.values.cml;
            sums.total += out.values.total;
        }

        let inv = 1.0 / batches.max(1) as f64;
        let losses = LossValues {
            ml: sums.ml * inv,
            common: sums.common * inv,
            private: sums.private * inv,
            diff: sums.diff * inv,
            cml: sums.cml * inv,
            total: sums.total * inv,
        };
        let val = evaluate_model(model, &data.valid)?;
        let stats = EpochStats { epoch, losses, val };
        history.push(stats);

        if val.micro_f1 > best_f1 {
            best_f1 = val.micro_f1;
            best_epoch = epoch;
            let dropout_rng = dropout_rng_of(&mode);
            best = Some(snapshot(
                model,
                &adam,
                &params,
                epoch,
                global_step,
                &shuffle_rng,
                &dropout_rng,
            ));
        }

        if !observer(&stats, model) {
            stopped_early = true;
            break;
        }
        if epoch - best_epoch >= config.patience {
            stopped_early = true;
            break;
        }
    }

    let best = match best {
        Some(ck) => ck,
        None => {
            // aborted before the first epoch finished: the initial weights
            // are the last-good state
            let dropout_rng = dropout_rng_of(&mode);
            snapshot(
                model,
                &adam,
                &params,
                0,
                global_step,
                &shuffle_rng,
                &dropout_rng,
            )
        }
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_f1: if best_f1.is_finite() { best_f1 } else { 0.0 },
        history,
        stopped_early,
        aborted,
    })
}

/// Rebuilds the RNG streams held in a checkpoint (resume support).
pub fn checkpoint_rngs(ck: &Checkpoint<impl Clone>) -> (rand_chacha::ChaCha8Rng, rand_chacha::ChaCha8Rng) {
    (restore(&ck.shuffle_rng), restore(&ck.dropout_rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DataDims, Model, ModelConfig};
    use crate::tensor::Tensor;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::Rng;

    fn dims() -> DataDims {
        DataDims {
            visual_dim: 3,
            audio_dim: 3,
            text_dim: 4,
            visual_len: 4,
            audio_len: 4,
            text_len: 4,
            label_count: 2,
        }
    }

    fn config() -> ModelConfig {
        ModelConfig {
            model_dim: 8,
            label_attn_heads: 2,
            decoder_heads: 2,
            encoder_heads: 2,
            visual_layers: 1,
            audio_layers: 1,
            text_layers: 1,
            fusion_layers: 1,
            ffn_multiplier: 2,
            batch_size: 4,
            base_lr: 1e-3,
            epochs: 3,
            patience: 10,
            dropout: 0.1,
            seed: 77,
            ..ModelConfig::default()
        }
    }

    fn synthetic_dataset(seed: u64, n_train: usize, n_valid: usize) -> Dataset<f64> {
        let d = dims();
        let mut rng = crate::rng::RngPool::new(seed).stream("toy-data");
        let mut make = |_: usize| {
            let y0 = rng.gen::<bool>();
            let y1 = rng.gen::<bool>();
            let mut mat = |rows: usize, cols: usize, boost: f64| {
                Tensor::matrix(
                    rows,
                    cols,
                    (0..rows * cols)
                        .map(|_| rng.gen_range(-1.0..1.0) + boost)
                        .collect(),
                )
                .unwrap()
            };
            let visual = mat(d.visual_dim, d.visual_len, if y0 { 0.8 } else { 0.0 });
            let audio = mat(d.audio_dim, d.audio_len, if y1 { 0.8 } else { 0.0 });
            let text = mat(d.text_dim, d.text_len, 0.0);
            Sample {
                visual,
                audio,
                text,
                labels: vec![u8::from(y0), u8::from(y1)],
            }
        };
        Dataset {
            label_names: vec!["l0".to_string(), "l1".to_string()],
            train: (0..n_train).map(&mut make).collect(),
            valid: (0..n_valid).map(&mut make).collect(),
            test: vec![],
        }
    }

    #[test]
    fn one_small_step_decreases_the_objective_on_a_frozen_batch() {
        let model = Model::<f64>::new(
            ModelConfig {
                dropout: 0.0,
                ..config()
            },
            dims(),
        )
        .unwrap();
        let data = synthetic_dataset(5, 8, 4);
        let batch: Vec<Sample<f64>> = data
            .train
            .iter()
            .take(4)
            .map(|s| Sample {
                visual: s.visual.clone(),
                audio: s.audio.clone(),
                text: s.text.clone(),
                labels: s.labels.clone(),
            })
            .collect();

        let loss_of = |model: &Model<f64>| {
            let mut tape = Tape::new();
            model
                .forward_batch(&mut tape, &batch, &mut ForwardMode::Eval)
                .unwrap()
                .values
                .total
        };

        let before = loss_of(&model);
        let params = model.params();
        let mut adam = Adam::new(&params);
        let mut tape = Tape::new();
        let out = model
            .forward_batch(&mut tape, &batch, &mut ForwardMode::Eval)
            .unwrap();
        model.zero_grads();
        tape.backward(&out.total).unwrap();
        adam.step(&params, 1e-4).unwrap();
        let after = loss_of(&model);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn training_runs_and_reports_history() {
        let model = Model::<f64>::new(config(), dims()).unwrap();
        let data = synthetic_dataset(6, 12, 6);
        let mut epochs_seen = 0;
        let outcome = train(&model, &data, &mut |_, _| {
            epochs_seen += 1;
            true
        })
        .unwrap();
        assert_eq!(epochs_seen, 3);
        assert_eq!(outcome.history.len(), 3);
        assert!(outcome.aborted.is_none());
        assert!(!outcome.best.params.is_empty());
        assert!(outcome.best_val_f1 >= 0.0);
        for stats in &outcome.history {
            assert!(stats.losses.total.is_finite());
            assert!((0.0..=1.0).contains(&stats.val.micro_f1));
        }
    }

    #[test]
    fn identical_seeds_reproduce_identical_training_traces() {
        let run = || {
            let model = Model::<f64>::new(config(), dims()).unwrap();
            let data = synthetic_dataset(7, 10, 5);
            let outcome = train(&model, &data, &mut |_, _| true).unwrap();
            let loss_bits: Vec<u64> = outcome
                .history
                .iter()
                .map(|s| s.losses.total.to_bits())
                .collect();
            let param_bits: Vec<Vec<u64>> = outcome
                .best
                .params
                .iter()
                .map(|(_, _, v)| v.iter().map(|x| x.to_bits()).collect())
                .collect();
            (loss_bits, param_bits)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrips_into_a_fresh_model() {
        let model = Model::<f64>::new(config(), dims()).unwrap();
        let data = synthetic_dataset(8, 10, 5);
        let outcome = train(&model, &data, &mut |_, _| true).unwrap();

        let fresh = Model::<f64>::new(config(), dims()).unwrap();
        apply_checkpoint(&fresh, &outcome.best).unwrap();
        for ((_, a), (_, b)) in fresh.params().iter().zip(model.params().iter()) {
            // model holds final weights, fresh holds best; both finite
            assert!(a.all_finite() && b.all_finite());
        }
        // restoring into a mismatched architecture fails
        let mut other_cfg = config();
        other_cfg.ablation.identical_head = true;
        let other = Model::<f64>::new(other_cfg, dims()).unwrap();
        assert!(apply_checkpoint(&other, &outcome.best).is_err());
    }

    #[test]
    fn observer_can_stop_training() {
        let model = Model::<f64>::new(config(), dims()).unwrap();
        let data = synthetic_dataset(9, 10, 5);
        let outcome = train(&model, &data, &mut |stats, _| stats.epoch < 1).unwrap();
        assert_eq!(outcome.history.len(), 2);
        assert!(outcome.stopped_early);
    }

    #[test]
    fn empty_validation_split_is_rejected() {
        let model = Model::<f64>::new(config(), dims()).unwrap();
        let mut data = synthetic_dataset(10, 4, 2);
        data.valid.clear();
        assert!(train(&model, &data, &mut |_, _| true).is_err());
    }
}
