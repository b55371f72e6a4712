//! Durable artifacts: the preprocessed dataset bundle and the trained-model
//! checkpoint, both versioned JSON with content digests.
//!
//! Digests cover everything except the `created_unix` metadata field and
//! the digest itself, so reruns over identical inputs produce identical
//! digests while the timestamp may differ. Loading a checkpoint or bundle
//! re-serializes bit-exactly: floats go through shortest-round-trip JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::corrector::MotionModeModel;
use crate::ingest::{CleanReport, DatasetSplit, NormStats, ResampledSeries, SplitReport};
use crate::model::{
    CellKind, EpochStats, ModelConfig, Seq2SeqModel, Seq2SeqParams, TrainProgress,
};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub const BUNDLE_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sha256_of(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_unix() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── Dataset bundle ──────────────────────────────────────────────────────

/// Everything `preprocess` produces: the model-grid series (raw units),
/// the normalized window split, fitted stats, and bookkeeping reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub format_version: u32,
    /// Metadata only; excluded from the content digest.
    pub created_unix: i64,
    pub content_digest: String,
    pub config_digest: String,
    pub horizon_minutes: u32,
    pub model_step_s: u32,
    pub bus_ids: Vec<String>,
    pub norm_stats: NormStats,
    /// Model-grid series after impute+decimate, in raw degree/km/h units.
    pub series: Vec<ResampledSeries>,
    pub split: DatasetSplit,
    pub clean_report: CleanReport,
    pub split_report: SplitReport,
    pub mean_travel_distance_m: f64,
    /// Observed training-range speeds (km/h) for motion-mode clustering.
    pub train_speed_samples: Vec<f64>,
}

impl DatasetBundle {
    /// Digest over the content with timestamp and digest fields zeroed.
    pub fn compute_digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.created_unix = 0;
        canonical.content_digest = String::new();
        sha256_of(&serde_json::to_vec(&canonical).expect("bundle serializes"))
    }

    pub fn seal(mut self) -> Self {
        self.created_unix = now_unix();
        self.content_digest = self.compute_digest();
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bundle: DatasetBundle = read_json(path)?;
        if bundle.format_version != BUNDLE_VERSION {
            return Err(Error::Compat(format!(
                "bundle {} has format version {}, this build reads {BUNDLE_VERSION}",
                path.display(),
                bundle.format_version
            )));
        }
        let expect = bundle.compute_digest();
        if bundle.content_digest != expect {
            return Err(Error::Compat(format!(
                "bundle {} failed its digest check (stored {}, computed {expect})",
                path.display(),
                bundle.content_digest
            )));
        }
        Ok(bundle)
    }
}

// ── Checkpoint ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// The trained artifact: model parameters with their config, normalization
/// stats, motion-mode model, optimizer state for resuming, and the
/// training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Metadata only; excluded from the content digest and preserved
    /// verbatim across load/save round trips.
    pub created_unix: i64,
    pub content_digest: String,
    pub run_config: RunConfig,
    pub config_digest: String,
    /// Digest of the bundle this model was trained on.
    pub bundle_digest: String,
    pub model_config: ModelConfig,
    pub norm_stats: NormStats,
    pub params: Vec<NamedTensor>,
    pub motion_modes: MotionModeModel,
    pub train_progress: TrainProgress,
    pub history: Vec<EpochStats>,
    pub best_val_mae: f64,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn compute_digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.created_unix = 0;
        canonical.content_digest = String::new();
        sha256_of(&serde_json::to_vec(&canonical).expect("checkpoint serializes"))
    }

    pub fn seal(mut self) -> Self {
        self.created_unix = now_unix();
        self.content_digest = self.compute_digest();
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Loads and verifies. Version or digest mismatches are compatibility
    /// errors unless `force` is set.
    pub fn load(path: &Path, force: bool) -> Result<Self> {
        let ckpt: Checkpoint = read_json(path)?;
        if ckpt.format_version != CHECKPOINT_VERSION && !force {
            return Err(Error::Compat(format!(
                "checkpoint {} has format version {}, this build reads {CHECKPOINT_VERSION} \
                 (pass --force to load anyway)",
                path.display(),
                ckpt.format_version
            )));
        }
        let expect = ckpt.compute_digest();
        if ckpt.content_digest != expect && !force {
            return Err(Error::Compat(format!(
                "checkpoint {} failed its digest check (stored {}, computed {expect})",
                path.display(),
                ckpt.content_digest
            )));
        }
        Ok(ckpt)
    }

    /// Named tensors in canonical visit order.
    pub fn tensors_of(params: &Seq2SeqParams) -> Vec<NamedTensor> {
        params
            .flatten()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }

    /// Rebuilds the model, checking every parameter's name and shape
    /// against the canonical order for the stored config.
    pub fn instantiate_model(&self) -> Result<Seq2SeqModel> {
        let mut model = Seq2SeqModel::new(self.model_config)
            .map_err(|e| Error::Compat(format!("checkpoint config is unusable: {e}")))?;
        let expected: Vec<String> = model.params.flatten().into_iter().map(|(n, _)| n).collect();
        if expected.len() != self.params.len() {
            return Err(Error::Compat(format!(
                "checkpoint has {} tensors, model wants {}",
                self.params.len(),
                expected.len()
            )));
        }
        let mut tensors = model.params.tensors_mut();
        for ((slot, stored), name) in tensors.iter_mut().zip(&self.params).zip(&expected) {
            if &stored.name != name {
                return Err(Error::Compat(format!(
                    "checkpoint tensor `{}` where `{name}` was expected",
                    stored.name
                )));
            }
            if stored.shape != slot.shape() {
                return Err(Error::Compat(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model wants {:?}",
                    stored.shape,
                    slot.shape()
                )));
            }
            **slot = Tensor::new(stored.shape.clone(), stored.data.clone())
                .map_err(|e| Error::Compat(format!("checkpoint tensor `{name}`: {e}")))?;
        }
        Ok(model)
    }

    pub fn cell_kind(&self) -> CellKind {
        self.model_config.cell
    }
}
