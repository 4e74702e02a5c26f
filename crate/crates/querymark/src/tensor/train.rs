//! Mini-batch training: SGD with momentum or Adam, optional zero-mask on
//! parameters, and an internal hook for mixing watermark keys into batches.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ops::{backprop, eval_loss, forward_trace, LossSpec};
use super::topology::ModelCheckpoint;
use super::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    /// SGD momentum coefficient.
    #[serde(default = "defaults::momentum")]
    pub momentum: f32,
    #[serde(default = "defaults::beta1")]
    pub beta1: f32,
    #[serde(default = "defaults::beta2")]
    pub beta2: f32,
    #[serde(default = "defaults::adam_epsilon")]
    pub epsilon: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

mod defaults {
    pub fn momentum() -> f32 {
        0.9
    }
    pub fn beta1() -> f32 {
        0.9
    }
    pub fn beta2() -> f32 {
        0.999
    }
    pub fn adam_epsilon() -> f32 {
        1e-8
    }
}

impl OptimizerConfig {
    /// SGD with momentum 0.9, batch size 32.
    pub fn sgd(learning_rate: f32, epochs: usize, seed: u64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum: defaults::momentum(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            epsilon: defaults::adam_epsilon(),
            batch_size: 32,
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Argument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be at least 1".into()));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(v.is_finite() && (0.0..1.0).contains(&v)) {
                return Err(Error::Argument(format!("{name} must lie in [0,1), got {v}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Argument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

enum OptState {
    Sgd { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl OptState {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptState::Sgd {
                velocity: vec![0.0; n],
            },
            OptimizerKind::Adam => OptState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    fn step(&mut self, cfg: &OptimizerConfig, params: &mut [f32], grads: &[f32]) {
        let lr = cfg.learning_rate as f64;
        match self {
            OptState::Sgd { velocity } => {
                let mu = cfg.momentum as f64;
                for i in 0..params.len() {
                    velocity[i] = mu * velocity[i] + grads[i] as f64;
                    params[i] = (params[i] as f64 - lr * velocity[i]) as f32;
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let b1 = cfg.beta1 as f64;
                let b2 = cfg.beta2 as f64;
                let eps = cfg.epsilon as f64;
                let c1 = 1.0 - b1.powi(*t);
                let c2 = 1.0 - b2.powi(*t);
                for i in 0..params.len() {
                    let g = grads[i] as f64;
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    params[i] = (params[i] as f64 - update) as f32;
                }
            }
        }
    }

    /// Clear state for pinned coordinates so momentum cannot push them off zero.
    fn zero_masked(&mut self, mask: &[bool]) {
        let bufs: Vec<&mut Vec<f64>> = match self {
            OptState::Sgd { velocity } => vec![velocity],
            OptState::Adam { m, v, .. } => vec![m, v],
        };
        for buf in bufs {
            for (x, &dead) in buf.iter_mut().zip(mask) {
                if dead {
                    *x = 0.0;
                }
            }
        }
    }
}

/// Watermark keys mixed into every training batch: roughly one key per
/// `clean_per_key` clean samples, cycling through the key set in a shuffled
/// order drawn from a stream independent of the batch shuffle.
pub(crate) struct KeyMix<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
    pub bits: &'a [u8],
    pub class_to_bit: &'a [u8],
    pub lambda: f32,
    pub clean_per_key: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct EpochStats {
    pub task_loss: f64,
    pub wm_loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelCheckpoint,
    pub seconds: f64,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Cross-entropy training. `mask[i] = true` pins parameter i at exactly zero
/// for the whole run (sparse fine-tuning after pruning).
pub fn train(
    model: &ModelCheckpoint,
    data: &Dataset,
    cfg: &OptimizerConfig,
    mask: Option<&[bool]>,
) -> Result<TrainOutcome> {
    train_with_mix(model, data, cfg, mask, None, |_, _, _| Ok(()))
}

pub(crate) fn train_with_mix(
    model: &ModelCheckpoint,
    data: &Dataset,
    cfg: &OptimizerConfig,
    mask: Option<&[bool]>,
    mix: Option<&KeyMix>,
    mut epoch_hook: impl FnMut(usize, &ModelCheckpoint, &EpochStats) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.topology.validate()?;
    if data.len() == 0 {
        return Err(Error::Argument("training dataset is empty".into()));
    }
    if data.feature_dim() != model.topology.input_dim {
        return Err(Error::Dimension(format!(
            "dataset feature dim {} vs model input_dim {}",
            data.feature_dim(),
            model.topology.input_dim
        )));
    }
    if let Some(m) = mask {
        if m.len() != model.params.len() {
            return Err(Error::Dimension(format!(
                "mask of {} entries for {} parameters",
                m.len(),
                model.params.len()
            )));
        }
    }
    if let Some(mix) = mix {
        if mix.images.rows() == 0 {
            return Err(Error::Argument("key mix with no keys".into()));
        }
        if mix.images.cols() != model.topology.input_dim {
            return Err(Error::Dimension("key image width vs model input_dim".into()));
        }
        if mix.labels.len() != mix.images.rows() || mix.bits.len() != mix.images.rows() {
            return Err(Error::Dimension("key labels/bits misaligned with images".into()));
        }
        if mix.clean_per_key == 0 {
            return Err(Error::Argument("clean_per_key must be at least 1".into()));
        }
    }

    let start = Instant::now();
    let mut cur = model.clone();
    if let Some(m) = mask {
        for (w, &dead) in cur.params.iter_mut().zip(m) {
            if dead {
                *w = 0.0;
            }
        }
    }
    let mut state = OptState::new(cfg.kind, cur.params.len());
    let mut rng = rng_from(cfg.seed);

    // Key order cycles through its own stream so enabling the mix never
    // perturbs the batch shuffle.
    let mut key_rng = rng_from(derive_seed(cfg.seed, "key-order"));
    let mut key_order: Vec<usize> = mix.map(|m| (0..m.images.rows()).collect()).unwrap_or_default();
    if let Some(_m) = mix {
        key_order.shuffle(&mut key_rng);
    }
    let mut key_pos = 0usize;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut task_sum = 0.0f64;
        let mut row_count = 0usize;
        let mut wm_sum = 0.0f64;
        let mut key_count = 0usize;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let clean = data.images.gather_rows(chunk)?;
            let mut targets: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();

            let (batch, key_bits) = if let Some(mix) = mix {
                let k = (chunk.len() / mix.clean_per_key).max(1);
                let mut ids = Vec::with_capacity(k);
                for _ in 0..k {
                    if key_pos == key_order.len() {
                        key_order.shuffle(&mut key_rng);
                        key_pos = 0;
                    }
                    ids.push(key_order[key_pos]);
                    key_pos += 1;
                }
                let key_imgs = mix.images.gather_rows(&ids)?;
                targets.extend(ids.iter().map(|&i| mix.labels[i]));
                let bits: Vec<u8> = ids.iter().map(|&i| mix.bits[i]).collect();
                (clean.vstack(&key_imgs)?, bits)
            } else {
                (clean, Vec::new())
            };

            let spec = match mix {
                Some(m) => LossSpec::Regularized {
                    targets: &targets,
                    key_from: chunk.len(),
                    key_bits: &key_bits,
                    class_to_bit: m.class_to_bit,
                    lambda: m.lambda,
                },
                None => LossSpec::CrossEntropy { targets: &targets },
            };

            let step = (|| -> Result<EpochStats> {
                let trace = forward_trace(&cur, &batch)?;
                let eval = eval_loss(trace.logits(), &spec)?;
                let grads = backprop(&cur, &trace, &eval.dlogits)?;
                state.step(cfg, &mut cur.params, &grads.params);
                Ok(EpochStats {
                    task_loss: eval.task_loss,
                    wm_loss: eval.wm_loss,
                })
            })();
            let stats = step.map_err(|e| Error::Training {
                epoch,
                batch: batch_idx,
                msg: e.to_string(),
            })?;

            if let Some(m) = mask {
                for (w, &dead) in cur.params.iter_mut().zip(m) {
                    if dead {
                        *w = 0.0;
                    }
                }
                state.zero_masked(m);
            }

            let rows = batch.rows();
            loss_sum += (stats.task_loss
                + mix.map_or(0.0, |m| m.lambda as f64) * stats.wm_loss)
                * rows as f64;
            task_sum += stats.task_loss * rows as f64;
            row_count += rows;
            wm_sum += stats.wm_loss * key_bits.len() as f64;
            key_count += key_bits.len();
        }

        if let Some(m) = mask {
            if cur.params.iter().zip(m).any(|(&w, &dead)| dead && w != 0.0) {
                return Err(Error::Training {
                    epoch,
                    batch: 0,
                    msg: "masked parameter drifted off zero".into(),
                });
            }
        }

        epoch_losses.push(loss_sum / row_count as f64);
        let stats = EpochStats {
            task_loss: task_sum / row_count as f64,
            wm_loss: if key_count > 0 {
                wm_sum / key_count as f64
            } else {
                0.0
            },
        };
        epoch_hook(epoch, &cur, &stats)?;
    }

    Ok(TrainOutcome {
        model: cur,
        seconds: start.elapsed().as_secs_f64(),
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::data::SplitTag;
    use crate::tensor::{forward, NetworkTopology};

    #[test]
    fn zero_epochs_is_rejected() {
        let mut cfg = OptimizerConfig::sgd(0.1, 1, 0);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sgd_step_minimizes_square_loss_in_one_step() {
        // loss = w^2 at w=1: gradient 2, lr 1 sends w to -1.
        let cfg = OptimizerConfig::sgd(1.0, 1, 0);
        let mut state = OptState::new(OptimizerKind::Sgd, 1);
        let mut params = vec![1.0f32];
        state.step(&cfg, &mut params, &[2.0]);
        assert_eq!(params, vec![-1.0]);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut cfg = OptimizerConfig::sgd(0.01, 1, 0);
        cfg.kind = OptimizerKind::Adam;
        let mut state = OptState::new(OptimizerKind::Adam, 2);
        let mut params = vec![0.0f32, 0.0];
        state.step(&cfg, &mut params, &[3.0, -0.5]);
        // Bias-corrected first step is lr * g/(|g| + eps) = roughly lr * sign(g).
        assert!((params[0] + 0.01).abs() < 1e-6);
        assert!((params[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn blob_training_beats_95_percent_and_nearest_centroid_oracle_agrees() {
        let data = synth_blobs(2, 100, 6, 6.0, 42, SplitTag::Train).unwrap();
        let topo = NetworkTopology::mlp(6, &[16], 2);
        let model = ModelCheckpoint::init_he_uniform(topo, 7).unwrap();
        let cfg = OptimizerConfig::sgd(0.1, 10, 99);
        let out = train(&model, &data, &cfg, None).unwrap();
        let acc = crate::tensor::accuracy(&out.model, &data.images, &data.labels).unwrap();
        assert!(acc > 0.95, "train accuracy {acc}");

        // Independent check that the task itself is separable: classify by
        // nearest class-mean.
        let d = data.feature_dim();
        let mut means = vec![vec![0.0f64; d]; 2];
        let mut counts = [0usize; 2];
        for i in 0..data.len() {
            let c = data.labels[i];
            counts[c] += 1;
            for (j, &v) in data.images.row(i).iter().enumerate() {
                means[c][j] += v as f64;
            }
        }
        for c in 0..2 {
            for v in &mut means[c] {
                *v /= counts[c] as f64;
            }
        }
        let mut hits = 0;
        for i in 0..data.len() {
            let row = data.images.row(i);
            let dist = |m: &[f64]| -> f64 {
                row.iter()
                    .zip(m)
                    .map(|(&x, &mu)| (x as f64 - mu).powi(2))
                    .sum()
            };
            let pred = if dist(&means[0]) <= dist(&means[1]) { 0 } else { 1 };
            if pred == data.labels[i] {
                hits += 1;
            }
        }
        assert!(hits as f64 / data.len() as f64 > 0.95);
    }

    #[test]
    fn same_seed_trains_bit_identically() {
        let data = synth_blobs(3, 40, 5, 4.0, 8, SplitTag::Train).unwrap();
        let topo = NetworkTopology::mlp(5, &[8], 3);
        let model = ModelCheckpoint::init_he_uniform(topo, 1).unwrap();
        let cfg = OptimizerConfig::sgd(0.05, 3, 77);
        let a = train(&model, &data, &cfg, None).unwrap();
        let b = train(&model, &data, &cfg, None).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn masked_parameters_stay_exactly_zero() {
        let data = synth_blobs(2, 50, 4, 5.0, 3, SplitTag::Train).unwrap();
        let topo = NetworkTopology::mlp(4, &[6], 2);
        let model = ModelCheckpoint::init_he_uniform(topo, 2).unwrap();
        let mask: Vec<bool> = (0..model.params.len()).map(|i| i % 3 == 0).collect();
        let cfg = OptimizerConfig::sgd(0.1, 4, 5);
        let out = train(&model, &data, &cfg, Some(&mask)).unwrap();
        for (w, &dead) in out.model.params.iter().zip(&mask) {
            if dead {
                assert_eq!(*w, 0.0);
            }
        }
        // The run must still have learned with the surviving weights.
        assert!(out.model.params.iter().any(|&w| w != 0.0));
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let data = synth_blobs(2, 30, 4, 5.0, 3, SplitTag::Train).unwrap();
        let topo = NetworkTopology::mlp(4, &[6], 2);
        // Saturated weights overflow f32 in the second dense layer on the
        // very first forward pass.
        let mut model = ModelCheckpoint::zeros(topo).unwrap();
        for w in &mut model.params {
            *w = 1e38;
        }
        let cfg = OptimizerConfig::sgd(0.1, 5, 5);
        match train(&model, &data, &cfg, None) {
            Err(Error::Training { epoch, batch, .. }) => {
                assert_eq!((epoch, batch), (0, 0));
            }
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn trained_model_emits_finite_logits() {
        let data = synth_blobs(2, 30, 4, 5.0, 11, SplitTag::Train).unwrap();
        let topo = NetworkTopology::mlp(4, &[6], 2);
        let model = ModelCheckpoint::init_he_uniform(topo, 2).unwrap();
        let cfg = OptimizerConfig::sgd(0.05, 2, 5);
        let out = train(&model, &data, &cfg, None).unwrap();
        let logits = forward(&out.model, &data.images).unwrap();
        assert!(logits.all_finite());
    }
}
