//! Signature extraction: queries a prediction endpoint with the final keys,
//! decodes the predicted classes to bits, and scores them against the owner's
//! signature. Only predicted labels are consumed, never parameters or logits.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoding::{decode_classes, EncodingScheme, Signature};
use crate::error::{Error, Result};
use crate::keygen::{KeyStage, WMKeySet};
use crate::tensor::{argmax_row, forward, ModelCheckpoint, Tensor};

/// Black-box prediction endpoint: images in, class labels out. Remote APIs
/// and local checkpoints look the same through this trait.
pub trait Predictor {
    fn predict_classes(&self, images: &Tensor) -> Result<Vec<usize>>;
    fn num_classes(&self) -> usize;
}

impl Predictor for ModelCheckpoint {
    fn predict_classes(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = forward(self, images)?;
        Ok((0..logits.rows())
            .map(|r| argmax_row(logits.row(r)))
            .collect())
    }

    fn num_classes(&self) -> usize {
        self.topology.num_classes
    }
}

/// Bit error rate between two equal-length bit strings: the fraction of
/// positions that disagree.
pub fn ber(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "bit strings of length {} and {} are not comparable",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Argument("bit strings must be non-empty".into()));
    }
    if a.iter().chain(b).any(|&v| v > 1) {
        return Err(Error::Argument("bits must be 0 or 1".into()));
    }
    let mismatches = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(mismatches as f64 / a.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ber: f64,
    pub recovered_bits: Vec<u8>,
    /// True exactly when the bit error rate is zero.
    pub detection: bool,
    pub test_accuracy: Option<f64>,
    /// Number of endpoint queries spent on extraction (one per key).
    pub query_count: usize,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Queries `endpoint` with the final keys and scores the decoded bits
/// against `signature`. The key set must match the scheme and signature it
/// was built for; mismatches are verification failures, not zero detections.
pub fn extract(
    endpoint: &dyn Predictor,
    keys: &WMKeySet,
    scheme: &EncodingScheme,
    signature: &Signature,
    test_data: Option<&Dataset>,
) -> Result<EvalReport> {
    scheme.validate()?;
    keys.validate()?;
    if keys.stage != KeyStage::Final {
        return Err(Error::Argument(
            "extraction requires a final (filtered) key set".into(),
        ));
    }
    if keys.scheme_sha256 != scheme.sha256_hex() {
        return Err(Error::Verification(
            "key set was generated under a different encoding scheme".into(),
        ));
    }
    if keys.signature.bits != signature.bits {
        return Err(Error::Verification(
            "key set carries a different signature".into(),
        ));
    }
    if endpoint.num_classes() != scheme.num_classes {
        return Err(Error::Dimension(format!(
            "endpoint emits {} classes, scheme covers {}",
            endpoint.num_classes(),
            scheme.num_classes
        )));
    }

    let start = Instant::now();
    let images = keys.images_tensor()?;
    let classes = endpoint.predict_classes(&images)?;
    if classes.len() != keys.len() {
        return Err(Error::Verification(format!(
            "endpoint returned {} labels for {} queries",
            classes.len(),
            keys.len()
        )));
    }
    let recovered_bits = decode_classes(&classes, scheme)?;
    let rate = ber(&recovered_bits, &signature.bits)?;

    let test_accuracy = match test_data {
        Some(t) => {
            let preds = endpoint.predict_classes(&t.images)?;
            let hits = preds.iter().zip(&t.labels).filter(|(p, l)| p == l).count();
            Some(hits as f64 / t.labels.len() as f64)
        }
        None => None,
    };

    Ok(EvalReport {
        ber: rate,
        recovered_bits,
        detection: rate == 0.0,
        test_accuracy,
        query_count: keys.len(),
        seconds: start.elapsed().as_secs_f64(),
        config_sha256: None,
    })
}
