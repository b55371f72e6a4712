//! Training loop: per-window Adam steps on the MAE loss, per-epoch
//! validation, best-checkpoint tracking, and early stopping.
//!
//! Epoch-level randomness (shuffling, teacher-forcing coin flips) is drawn
//! from a stream seeded by (seed, epoch index), so resuming from a saved
//! state replays exactly the epochs a continuous run would have produced.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{
    forward_bound, mae_loss, target_frame, DecodeMode, ModelError, Seq2SeqModel, Seq2SeqParams,
};
use crate::graphs::AdjacencyMatrix;
use crate::ingest::WindowSample;
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor};

/// A window with its fused, row-normalized adjacency, ready for the model.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub sample: WindowSample,
    pub gamma: AdjacencyMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            patience: 25,
            adam: AdamConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

/// Resumable training state as of the best validation epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainProgress {
    pub adam: AdamState,
    pub next_epoch: usize,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub stale_epochs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// One entry per epoch executed in this call.
    pub history: Vec<EpochStats>,
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Optimizer state and counters snapshotted at the best epoch; feed it
    /// back in to resume.
    pub progress: TrainProgress,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha20Rng {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    ChaCha20Rng::seed_from_u64(z ^ (z >> 31))
}

/// Validation MAE of the current parameters, inference-mode decoding.
pub fn validation_mae(
    model: &Seq2SeqModel,
    val_set: &[PreparedWindow],
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for window in val_set {
        let preds = model.predict_window(&window.sample, &window.gamma)?;
        for (t, pred) in preds.iter().enumerate() {
            let target = target_frame(&window.sample, t);
            for (p, y) in pred.data().iter().zip(target.data()) {
                total += (p - y).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(ModelError::Contract("validation set is empty".into()));
    }
    Ok(total / count as f64)
}

/// Trains in place, minimizing mean |pred - target| with Adam. Keeps the
/// best-validation parameters: when training returns, `model.params` holds
/// the best epoch's snapshot, not the last one.
pub fn train(
    model: &mut Seq2SeqModel,
    train_set: &[PreparedWindow],
    val_set: &[PreparedWindow],
    config: &TrainConfig,
    resume: Option<TrainProgress>,
) -> Result<TrainOutcome, ModelError> {
    if config.epochs > 0 && (train_set.is_empty() || val_set.is_empty()) {
        return Err(ModelError::Contract(
            "training requires non-empty train and validation sets".into(),
        ));
    }

    let mut adam;
    let mut start_epoch;
    let mut best_val_mae;
    let mut best_epoch;
    let mut stale;
    match resume {
        Some(p) => {
            adam = p.adam;
            start_epoch = p.next_epoch;
            best_val_mae = p.best_val_mae;
            best_epoch = p.best_epoch;
            stale = p.stale_epochs;
        }
        None => {
            adam = AdamState::new(config.adam)?;
            start_epoch = 1;
            // f64::MAX, not infinity: the sentinel must survive JSON.
            best_val_mae = f64::MAX;
            best_epoch = 0;
            stale = 0;
        }
    }

    let mut best_params: Seq2SeqParams = model.params.clone();
    let mut best_progress = TrainProgress {
        adam: adam.clone(),
        next_epoch: start_epoch,
        best_val_mae,
        best_epoch,
        stale_epochs: stale,
    };

    let mut history = Vec::new();
    let mut stopped_early = false;
    let end_epoch = start_epoch + config.epochs;

    while start_epoch < end_epoch {
        let epoch = start_epoch;
        start_epoch += 1;
        let mut rng = epoch_rng(config.seed, epoch);

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for &wi in &order {
            let window = &train_set[wi];
            let targets: Vec<Tensor> = (0..window.sample.l_out)
                .map(|t| target_frame(&window.sample, t))
                .collect();

            let step_result = (|| -> Result<f64, ModelError> {
                let mut tape = Tape::new();
                let (bound, ids) = model.params.bind(&mut tape, true);
                let mut mode = DecodeMode::TeacherForcing {
                    targets: &targets,
                    ratio: model.config.teacher_forcing_ratio,
                    rng: &mut rng,
                };
                let outputs = forward_bound(
                    &mut tape,
                    &bound,
                    &model.config,
                    &window.sample,
                    &window.gamma,
                    &mut mode,
                )?;
                let loss = mae_loss(&mut tape, &outputs, &window.sample)?;
                let loss_value = tape.value(loss).data()[0];
                let grads = tape.backward(loss)?;

                let grad_slices: Vec<Option<&[f64]>> =
                    ids.iter().map(|&id| grads.get(id)).collect();
                let mut tensors = model.params.tensors_mut();
                adam.step(&mut tensors, &grad_slices)?;
                Ok(loss_value)
            })();

            epoch_loss += step_result.map_err(|e| ModelError::Training {
                epoch,
                detail: e.to_string(),
            })?;
        }
        let train_loss = epoch_loss / train_set.len().max(1) as f64;

        let val_mae = validation_mae(model, val_set).map_err(|e| ModelError::Training {
            epoch,
            detail: e.to_string(),
        })?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_mae,
        });

        if val_mae < best_val_mae {
            best_val_mae = val_mae;
            best_epoch = epoch;
            stale = 0;
            best_params = model.params.clone();
            best_progress = TrainProgress {
                adam: adam.clone(),
                next_epoch: epoch + 1,
                best_val_mae,
                best_epoch,
                stale_epochs: 0,
            };
        } else {
            stale += 1;
            if stale >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    model.params = best_params;
    Ok(TrainOutcome {
        history,
        best_val_mae,
        best_epoch,
        stopped_early,
        progress: best_progress,
    })
}
