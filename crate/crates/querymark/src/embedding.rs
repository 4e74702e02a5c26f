//! Signature embedding: fine-tunes a trained model on its own data plus the
//! candidate keys, adding a cluster-mass penalty that pulls each key's
//! predicted class into the cluster carrying its bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{subset_fraction, Dataset};
use crate::encoding::{decode, EncodingScheme};
use crate::error::{Error, Result};
use crate::keygen::WMKeySet;
use crate::rng::derive_seed;
use crate::tensor::{
    accuracy, cluster_mass_row, forward, KeyMix, ModelCheckpoint, OptimizerConfig, Tensor,
};

pub const DEFAULT_LAMBDA: f32 = 0.5;

/// Embedding hyper-parameters. The learning rate is the caller's choice; the
/// pipeline passes a tenth of the base training rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    /// Weight of the cluster-mass penalty in the combined loss.
    #[serde(default = "defaults::lambda")]
    pub lambda: f32,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    pub learning_rate: f32,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Fraction of the training set used for fine-tuning; 1.0 keeps the set
    /// as-is (same order, so a zero-key run reduces to plain training).
    #[serde(default = "defaults::train_subset")]
    pub train_subset: f64,
    /// Clean samples per mixed-in key within each batch.
    #[serde(default = "defaults::clean_per_key")]
    pub clean_per_key: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn lambda() -> f32 {
        super::DEFAULT_LAMBDA
    }
    pub fn epochs() -> usize {
        15
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn train_subset() -> f64 {
        1.0
    }
    pub fn clean_per_key() -> usize {
        10
    }
}

impl EmbedConfig {
    pub fn new(learning_rate: f32, seed: u64) -> Self {
        EmbedConfig {
            lambda: defaults::lambda(),
            epochs: defaults::epochs(),
            learning_rate,
            batch_size: defaults::batch_size(),
            train_subset: defaults::train_subset(),
            clean_per_key: defaults::clean_per_key(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Argument(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Argument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if !(self.train_subset > 0.0 && self.train_subset <= 1.0) {
            return Err(Error::Argument(format!(
                "train_subset must lie in (0,1], got {}",
                self.train_subset
            )));
        }
        if self.clean_per_key == 0 {
            return Err(Error::Argument("clean_per_key must be at least 1".into()));
        }
        Ok(())
    }

    /// The optimizer the fine-tuning loop runs with.
    pub fn optimizer(&self) -> OptimizerConfig {
        let mut cfg = OptimizerConfig::sgd(self.learning_rate, self.epochs, self.seed);
        cfg.batch_size = self.batch_size;
        cfg
    }
}

/// Mean cluster-mass cross-entropy over key rows: for each row, the negative
/// log of the total softmax mass on classes whose bit matches the key bit.
/// Zero when every row's correct-cluster mass saturates; an empty batch
/// scores 0.
pub fn wm_loss(logits: &Tensor, key_bits: &[u8], scheme: &EncodingScheme) -> Result<f64> {
    scheme.validate()?;
    if logits.rows() != key_bits.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows against {} bits",
            logits.rows(),
            key_bits.len()
        )));
    }
    if key_bits.is_empty() {
        return Ok(0.0);
    }
    if logits.cols() != scheme.num_classes {
        return Err(Error::Dimension(format!(
            "logits have {} columns, scheme covers {} classes",
            logits.cols(),
            scheme.num_classes
        )));
    }
    if key_bits.iter().any(|&b| b > 1) {
        return Err(Error::Argument("key bits must be 0 or 1".into()));
    }
    let mut total = 0.0f64;
    for (r, &bit) in key_bits.iter().enumerate() {
        let (loss, _) = cluster_mass_row(logits.row(r), bit, &scheme.class_to_bit);
        total += loss;
    }
    Ok(total / key_bits.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub clean_loss: f64,
    pub wm_loss: f64,
    /// Raw count of keys whose decoded bit mismatches, after this epoch.
    pub hamming: usize,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedReport {
    pub epochs: Vec<EpochReport>,
    pub seconds: f64,
    pub num_keys: usize,
    pub config: EmbedConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
}

impl EmbedReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct EmbedOutcome {
    pub model: ModelCheckpoint,
    pub report: EmbedReport,
}

/// Counts keys whose decoded bit disagrees with their signature bit.
fn hamming_on_keys(
    model: &ModelCheckpoint,
    images: &Tensor,
    bits: &[u8],
    scheme: &EncodingScheme,
) -> Result<usize> {
    let logits = forward(model, images)?;
    let decoded = decode(&logits, scheme)?;
    Ok(decoded.iter().zip(bits).filter(|(d, b)| d != b).count())
}

/// Fine-tunes `model` so the candidate keys decode to their signature bits
/// while clean behavior is preserved. With no keys and lambda 0 this is
/// bit-identical to plain training on the same data.
pub fn embed(
    model: &ModelCheckpoint,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    keys: Option<&WMKeySet>,
    scheme: &EncodingScheme,
    cfg: &EmbedConfig,
) -> Result<EmbedOutcome> {
    cfg.validate()?;
    scheme.validate()?;
    if scheme.num_classes != model.topology.num_classes {
        return Err(Error::Dimension(format!(
            "scheme covers {} classes, model emits {}",
            scheme.num_classes,
            model.topology.num_classes
        )));
    }

    let key_parts = match keys {
        Some(ks) if !ks.is_empty() => {
            ks.validate()?;
            if ks.scheme_sha256 != scheme.sha256_hex() {
                return Err(Error::Embedding(
                    "key set was generated under a different encoding scheme".into(),
                ));
            }
            let images = ks.images_tensor()?;
            if images.cols() != model.topology.input_dim {
                return Err(Error::Dimension(format!(
                    "key images have {} features, model expects {}",
                    images.cols(),
                    model.topology.input_dim
                )));
            }
            Some((images, ks.labels(), ks.bits()))
        }
        _ => None,
    };

    let subset_storage;
    let data: &Dataset = if cfg.train_subset < 1.0 {
        subset_storage = subset_fraction(
            train_data,
            cfg.train_subset,
            derive_seed(cfg.seed, "embed-subset"),
        )?;
        &subset_storage
    } else {
        train_data
    };

    let mix = key_parts.as_ref().map(|(images, labels, bits)| KeyMix {
        images,
        labels,
        bits,
        class_to_bit: &scheme.class_to_bit,
        lambda: cfg.lambda,
        clean_per_key: cfg.clean_per_key,
    });

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let outcome = crate::tensor::train_with_mix(
        model,
        data,
        &cfg.optimizer(),
        None,
        mix.as_ref(),
        |epoch, snapshot, stats| {
            let hamming = match &key_parts {
                Some((images, _, bits)) => hamming_on_keys(snapshot, images, bits, scheme)?,
                None => 0,
            };
            let test_accuracy = match test_data {
                Some(t) => Some(accuracy(snapshot, &t.images, &t.labels)?),
                None => None,
            };
            epochs.push(EpochReport {
                epoch,
                clean_loss: stats.task_loss,
                wm_loss: stats.wm_loss,
                hamming,
                test_accuracy,
            });
            Ok(())
        },
    )
    .map_err(|e| match e {
        Error::Training { epoch, batch, msg } => {
            Error::Embedding(format!("diverged at epoch {epoch} batch {batch}: {msg}"))
        }
        other => other,
    })?;

    let num_keys = key_parts.as_ref().map_or(0, |(_, labels, _)| labels.len());
    Ok(EmbedOutcome {
        model: outcome.model,
        report: EmbedReport {
            epochs,
            seconds: outcome.seconds,
            num_keys,
            config: cfg.clone(),
            config_sha256: None,
        },
    })
}
