//! Watermark key generation: targeted momentum-sign attacks craft key images
//! from the signature (stage 1), and post-embedding filtering keeps only keys
//! the marked model classifies correctly while unmarked models do not
//! (stage 2).

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoding::{EncodingScheme, Signature};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{
    forward, grad_input, train, ModelCheckpoint, OptimizerConfig, Tensor,
};

pub const DEFAULT_OVERSAMPLE: usize = 10;

/// Hyper-parameters of the key-crafting attack. These are part of the owner's
/// secret alongside the signature and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L-infinity budget around the base image.
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f32,
    /// Per-iteration step; defaults to epsilon / iterations.
    #[serde(default)]
    pub step_size: Option<f32>,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    /// Momentum decay of the accumulated gradient direction.
    #[serde(default = "defaults::momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn epsilon() -> f32 {
        0.5
    }
    pub fn iterations() -> usize {
        10
    }
    pub fn momentum() -> f32 {
        1.0
    }
}

impl AttackConfig {
    pub fn with_seed(seed: u64) -> Self {
        AttackConfig {
            epsilon: defaults::epsilon(),
            step_size: None,
            iterations: defaults::iterations(),
            momentum: defaults::momentum(),
            seed,
        }
    }

    pub fn step(&self) -> f32 {
        self.step_size
            .unwrap_or(self.epsilon / self.iterations.max(1) as f32)
    }

    /// Strict bounds for pipeline use. `mim_targeted` itself also accepts the
    /// degenerate epsilon = 0 ball and returns the input unchanged.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Argument(format!(
                "epsilon must lie in (0,1], got {}",
                self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Argument("iterations must be at least 1".into()));
        }
        if !(self.step().is_finite() && self.step() > 0.0) {
            return Err(Error::Argument(format!(
                "step size must be positive, got {}",
                self.step()
            )));
        }
        if !(self.momentum.is_finite() && self.momentum >= 0.0) {
            return Err(Error::Argument(format!(
                "momentum must be finite and >= 0, got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Direction of the sign attack: descend toward a target class or ascend away
/// from the true label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Steer {
    Toward(usize),
    Away(usize),
}

/// Momentum iterative sign attack. Accumulates the L1-normalized input
/// gradient with decay `momentum`, steps by sign, and clips every iterate to
/// the epsilon ball around the base image intersected with [0,1].
pub(crate) fn momentum_sign(
    model: &ModelCheckpoint,
    image: &Tensor,
    steer: Steer,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    if image.rows() != 1 && image.shape().len() != 1 {
        return Err(Error::Dimension("attack expects a single image".into()));
    }
    if !(cfg.epsilon.is_finite() && cfg.epsilon >= 0.0) {
        return Err(Error::Argument(format!(
            "epsilon must be finite and >= 0, got {}",
            cfg.epsilon
        )));
    }
    if cfg.iterations == 0 {
        return Err(Error::Argument("iterations must be at least 1".into()));
    }
    let class = match steer {
        Steer::Toward(c) | Steer::Away(c) => c,
    };
    if class >= model.topology.num_classes {
        return Err(Error::Argument(format!(
            "class {class} out of range {}",
            model.topology.num_classes
        )));
    }
    if let Some(bad) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!("image value {bad} outside [0,1]")));
    }

    let dim = image.len();
    let base = image.data().to_vec();
    let mut x = Tensor::new(vec![1, dim], base.clone())?;
    let mut g = vec![0.0f64; dim];
    let alpha = cfg.step() as f64;
    let eps = cfg.epsilon as f64;

    for _ in 0..cfg.iterations {
        let grad = grad_input(model, &x, class)?;
        let l1: f64 = grad.data().iter().map(|v| v.abs() as f64).sum();
        // A vanishing gradient skips normalization for this step.
        let scale = if l1 < 1e-12 { 1.0 } else { 1.0 / l1 };
        for (gi, &d) in g.iter_mut().zip(grad.data()) {
            *gi = cfg.momentum as f64 * *gi + d as f64 * scale;
        }
        let sign = |v: f64| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        for (i, xv) in x.data_mut().iter_mut().enumerate() {
            // Toward a target descends the loss; away from the label ascends.
            let step = match steer {
                Steer::Toward(_) => -alpha * sign(g[i]),
                Steer::Away(_) => alpha * sign(g[i]),
            };
            let lo = (base[i] as f64 - eps).max(0.0);
            let hi = (base[i] as f64 + eps).min(1.0);
            *xv = ((*xv as f64 + step).clamp(lo, hi)) as f32;
        }
    }
    Tensor::new(image.shape().to_vec(), x.data().to_vec())
}

/// Targeted momentum iterative attack toward `target_class`.
pub fn mim_targeted(
    model: &ModelCheckpoint,
    image: &Tensor,
    target_class: usize,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    momentum_sign(model, image, Steer::Toward(target_class), cfg)
}

/// Single-step untargeted sign attack: x + epsilon * sign(grad of the loss at
/// the true label). Shares the momentum routine with one iteration and no
/// momentum.
pub fn fgsm_untargeted(
    model: &ModelCheckpoint,
    image: &Tensor,
    label: usize,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    let one_step = AttackConfig {
        epsilon: cfg.epsilon,
        step_size: Some(cfg.epsilon),
        iterations: 1,
        momentum: 0.0,
        seed: cfg.seed,
    };
    momentum_sign(model, image, Steer::Away(label), &one_step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyStage {
    Candidate,
    Final,
}

/// One watermark key: an adversarial image whose source-class label carries a
/// signature bit.
#[derive(Debug, Clone, PartialEq)]
pub struct WMKey {
    pub image: Tensor,
    /// Source class; doubles as the key label the marked model must predict.
    pub label: usize,
    pub target_class: usize,
    pub bit_index: usize,
    pub bit_value: u8,
    /// Row of the training set the image was crafted from.
    pub base_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WMKeySet {
    pub keys: Vec<WMKey>,
    pub signature: Signature,
    pub stage: KeyStage,
    pub oversample: usize,
    pub scheme_sha256: String,
    pub attack: AttackConfig,
    pub config_sha256: Option<String>,
}

impl WMKeySet {
    pub fn validate(&self) -> Result<()> {
        let k = self.signature.len();
        match self.stage {
            KeyStage::Final => {
                if self.keys.len() != k {
                    return Err(Error::Keygen(format!(
                        "final set holds {} keys for a {k}-bit signature",
                        self.keys.len()
                    )));
                }
                for (i, key) in self.keys.iter().enumerate() {
                    if key.bit_index != i || key.bit_value != self.signature.bits[i] {
                        return Err(Error::Keygen(format!(
                            "final key {i} carries bit_index {} value {}",
                            key.bit_index, key.bit_value
                        )));
                    }
                }
            }
            KeyStage::Candidate => {
                if self.oversample == 0 {
                    return Err(Error::Keygen("oversample must be at least 1".into()));
                }
                if self.keys.len() != k * self.oversample {
                    return Err(Error::Keygen(format!(
                        "candidate set holds {} keys, expected {}",
                        self.keys.len(),
                        k * self.oversample
                    )));
                }
                let mut per_bit = vec![0usize; k];
                for key in &self.keys {
                    if key.bit_index >= k {
                        return Err(Error::Keygen(format!(
                            "bit_index {} outside signature length {k}",
                            key.bit_index
                        )));
                    }
                    per_bit[key.bit_index] += 1;
                }
                if per_bit.iter().any(|&n| n != self.oversample) {
                    return Err(Error::Keygen("uneven candidates per bit".into()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// All key images stacked into an N x D tensor, in key order.
    pub fn images_tensor(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f32>> = self.keys.iter().map(|k| k.image.data().to_vec()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.keys.iter().map(|k| k.label).collect()
    }

    pub fn bits(&self) -> Vec<u8> {
        self.keys.iter().map(|k| k.bit_value).collect()
    }

    /// Writes `keys.json` (metadata) and `keys.bin` (images, little-endian
    /// f32, key order) into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let dim = self.keys.first().map_or(0, |k| k.image.len());
        let file = KeySetFile {
            signature: self.signature.clone(),
            stage: self.stage,
            oversample: self.oversample,
            scheme_sha256: self.scheme_sha256.clone(),
            attack: self.attack.clone(),
            image_dim: dim,
            keys: self
                .keys
                .iter()
                .map(|k| KeyMeta {
                    bit_index: k.bit_index,
                    bit_value: k.bit_value,
                    label: k.label,
                    target_class: k.target_class,
                    base_index: k.base_index,
                })
                .collect(),
            config_sha256: self.config_sha256.clone(),
        };
        fs::write(dir.join("keys.json"), serde_json::to_string_pretty(&file)?)?;
        let mut bytes = Vec::with_capacity(self.keys.len() * dim * 4);
        for key in &self.keys {
            for v in key.image.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(dir.join("keys.bin"), bytes)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let json_path = dir.join("keys.json");
        let text = fs::read_to_string(&json_path)?;
        let file: KeySetFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            file: json_path.display().to_string(),
            msg: e.to_string(),
        })?;
        let bin_path = dir.join("keys.bin");
        let mut bytes = Vec::new();
        fs::File::open(&bin_path)?.read_to_end(&mut bytes)?;
        let expect = file.keys.len() * file.image_dim * 4;
        if bytes.len() != expect {
            return Err(Error::Format {
                file: bin_path.display().to_string(),
                msg: format!("expected {expect} bytes, found {}", bytes.len()),
            });
        }
        let mut keys = Vec::with_capacity(file.keys.len());
        for (i, meta) in file.keys.iter().enumerate() {
            let start = i * file.image_dim * 4;
            let data: Vec<f32> = bytes[start..start + file.image_dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            keys.push(WMKey {
                image: Tensor::new(vec![file.image_dim], data)?,
                label: meta.label,
                target_class: meta.target_class,
                bit_index: meta.bit_index,
                bit_value: meta.bit_value,
                base_index: meta.base_index,
            });
        }
        let set = WMKeySet {
            keys,
            signature: file.signature,
            stage: file.stage,
            oversample: file.oversample,
            scheme_sha256: file.scheme_sha256,
            attack: file.attack,
            config_sha256: file.config_sha256,
        };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct KeyMeta {
    bit_index: usize,
    bit_value: u8,
    label: usize,
    target_class: usize,
    base_index: usize,
}

#[derive(Serialize, Deserialize)]
struct KeySetFile {
    signature: Signature,
    stage: KeyStage,
    oversample: usize,
    scheme_sha256: String,
    attack: AttackConfig,
    image_dim: usize,
    keys: Vec<KeyMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_sha256: Option<String>,
}

/// Key Generation stage 1: craft `oversample` adversarial candidates per
/// signature bit. The source class is drawn from the bit's cluster, the
/// target from the opposite cluster, and the base image from the source
/// class's training images; everything is seed-deterministic per bit.
pub fn generate_candidates(
    model: &ModelCheckpoint,
    scheme: &EncodingScheme,
    signature: &Signature,
    train_data: &Dataset,
    cfg: &AttackConfig,
    oversample: usize,
) -> Result<WMKeySet> {
    scheme.validate()?;
    cfg.validate()?;
    if oversample == 0 {
        return Err(Error::Argument("oversample must be at least 1".into()));
    }
    if scheme.num_classes != model.topology.num_classes {
        return Err(Error::Dimension(format!(
            "scheme covers {} classes, model emits {}",
            scheme.num_classes, model.topology.num_classes
        )));
    }
    if train_data.num_classes != scheme.num_classes {
        return Err(Error::Dimension(format!(
            "dataset has {} classes, scheme covers {}",
            train_data.num_classes, scheme.num_classes
        )));
    }

    let clusters = [scheme.classes_with_bit(0), scheme.classes_with_bit(1)];
    let mut keys = Vec::with_capacity(signature.len() * oversample);
    for (bit_index, &bit) in signature.bits.iter().enumerate() {
        let mut rng = rng_from(derive_seed(cfg.seed, &format!("bit-{bit_index}")));
        let sources = &clusters[bit as usize];
        let targets = &clusters[1 - bit as usize];
        for _ in 0..oversample {
            let label = sources[rng.random_range(0..sources.len())];
            let target_class = targets[rng.random_range(0..targets.len())];
            let members = train_data.class_indices(label);
            if members.is_empty() {
                return Err(Error::Sampling(format!("class {label} has no training samples")));
            }
            let base_index = members[rng.random_range(0..members.len())];
            let base = Tensor::new(
                vec![train_data.feature_dim()],
                train_data.images.row(base_index).to_vec(),
            )?;
            let image = mim_targeted(model, &base, target_class, cfg)?;
            keys.push(WMKey {
                image,
                label,
                target_class,
                bit_index,
                bit_value: bit,
                base_index,
            });
        }
    }
    let set = WMKeySet {
        keys,
        signature: signature.clone(),
        stage: KeyStage::Candidate,
        oversample,
        scheme_sha256: scheme.sha256_hex(),
        attack: cfg.clone(),
        config_sha256: None,
    };
    set.validate()?;
    Ok(set)
}

/// Outcome of Key Generation stage 2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterResult {
    /// Candidate indices the marked model classifies as their key label.
    pub marked_correct: Vec<usize>,
    /// Candidate indices misclassified by the unmarked model and every variant.
    pub commonly_misclassified: Vec<usize>,
    /// Intersection of the two sets.
    pub survivors: Vec<usize>,
}

fn predicted_classes(model: &ModelCheckpoint, images: &Tensor) -> Result<Vec<usize>> {
    let logits = forward(model, images)?;
    Ok((0..logits.rows())
        .map(|r| crate::tensor::argmax_row(logits.row(r)))
        .collect())
}

/// Key Generation stage 2: keep candidates the marked model classifies as
/// their key label while the unmarked model and `num_variants` fine-tuned
/// variants of it all misclassify, then pick one survivor per bit.
pub fn filter_keys(
    candidates: &WMKeySet,
    marked_model: &ModelCheckpoint,
    unmarked_model: &ModelCheckpoint,
    train_data: &Dataset,
    num_variants: usize,
    variant_cfg: &OptimizerConfig,
    seed: u64,
) -> Result<(WMKeySet, FilterResult)> {
    if candidates.stage != KeyStage::Candidate {
        return Err(Error::Keygen("filter_keys needs a candidate-stage set".into()));
    }
    candidates.validate()?;

    let images = candidates.images_tensor()?;
    let labels = candidates.labels();

    let marked_preds = predicted_classes(marked_model, &images)?;
    let mut variant_preds = vec![predicted_classes(unmarked_model, &images)?];
    for t in 0..num_variants {
        let cfg = OptimizerConfig {
            seed: derive_seed(seed, &format!("variant-{t}")),
            ..variant_cfg.clone()
        };
        let variant = train(unmarked_model, train_data, &cfg, None)?;
        variant_preds.push(predicted_classes(&variant.model, &images)?);
    }

    let marked_correct: Vec<usize> = (0..labels.len())
        .filter(|&i| marked_preds[i] == labels[i])
        .collect();
    let commonly_misclassified: Vec<usize> = (0..labels.len())
        .filter(|&i| variant_preds.iter().all(|p| p[i] != labels[i]))
        .collect();
    let survivors: Vec<usize> = marked_correct
        .iter()
        .copied()
        .filter(|i| commonly_misclassified.contains(i))
        .collect();

    let k = candidates.signature.len();
    let mut per_bit: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in &survivors {
        per_bit[candidates.keys[i].bit_index].push(i);
    }
    let starved: Vec<usize> = (0..k).filter(|&b| per_bit[b].is_empty()).collect();
    if !starved.is_empty() {
        return Err(Error::KeygenNoSurvivors {
            bit_indices: starved,
        });
    }

    let mut rng = rng_from(derive_seed(seed, "final-pick"));
    let final_keys: Vec<WMKey> = (0..k)
        .map(|b| {
            let pool = &per_bit[b];
            candidates.keys[pool[rng.random_range(0..pool.len())]].clone()
        })
        .collect();
    let final_set = WMKeySet {
        keys: final_keys,
        signature: candidates.signature.clone(),
        stage: KeyStage::Final,
        oversample: candidates.oversample,
        scheme_sha256: candidates.scheme_sha256.clone(),
        attack: candidates.attack.clone(),
        config_sha256: candidates.config_sha256.clone(),
    };
    final_set.validate()?;
    Ok((
        final_set,
        FilterResult {
            marked_correct,
            commonly_misclassified,
            survivors,
        },
    ))
}
