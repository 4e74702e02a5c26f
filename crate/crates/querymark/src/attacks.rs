//! Removal and evasion attacks against a marked model, each scored with the
//! owner's original keys so robustness claims are measured, not assumed.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embedding::{embed, EmbedConfig};
use crate::encoding::{design_scheme, EncodingScheme, Signature};
use crate::error::{Error, Result};
use crate::extraction::{extract, EvalReport, Predictor};
use crate::keygen::{
    fgsm_untargeted, filter_keys, generate_candidates, mim_targeted, AttackConfig, WMKeySet,
};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{
    accuracy, train, LayerSpec, ModelCheckpoint, NetworkTopology, OptimizerConfig, Tensor,
};
use rand::Rng;

/// Everything the owner presents at verification time.
#[derive(Debug, Clone, Copy)]
pub struct OwnerEvidence<'a> {
    pub keys: &'a WMKeySet,
    pub scheme: &'a EncodingScheme,
    pub signature: &'a Signature,
}

impl OwnerEvidence<'_> {
    pub fn verify(&self, model: &ModelCheckpoint, test_data: Option<&Dataset>) -> Result<EvalReport> {
        extract(model, self.keys, self.scheme, self.signature, test_data)
    }
}

/// An attacked model together with its post-attack utility and the owner's
/// verification result against it.
#[derive(Debug)]
pub struct AttackOutcome {
    pub model: ModelCheckpoint,
    pub test_accuracy: f64,
    pub report: EvalReport,
    pub descriptor: String,
}

fn score_attack(
    model: ModelCheckpoint,
    test_data: &Dataset,
    evidence: &OwnerEvidence,
    descriptor: String,
) -> Result<AttackOutcome> {
    let report = evidence.verify(&model, Some(test_data))?;
    let test_accuracy = report
        .test_accuracy
        .expect("extract fills accuracy when test data is given");
    Ok(AttackOutcome {
        model,
        test_accuracy,
        report,
        descriptor,
    })
}

/// Plain cross-entropy fine-tuning of the marked model, the cheapest removal
/// attempt an attacker with the training data can run.
pub fn attack_finetune(
    marked: &ModelCheckpoint,
    train_data: &Dataset,
    test_data: &Dataset,
    evidence: &OwnerEvidence,
    epochs: usize,
    learning_rate: f32,
    seed: u64,
) -> Result<AttackOutcome> {
    if epochs == 0 {
        return Err(Error::Attack(
            "zero-epoch fine-tuning leaves the model untouched".into(),
        ));
    }
    let cfg = OptimizerConfig::sgd(learning_rate, epochs, seed);
    let outcome = train(marked, train_data, &cfg, None)?;
    score_attack(
        outcome.model,
        test_data,
        evidence,
        format!("finetune epochs={epochs} lr={learning_rate}"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Fraction of weights to zero, in [0,1). Biases are never pruned.
    pub alpha: f64,
    /// Pool weights across layers instead of pruning each layer separately.
    #[serde(default)]
    pub global: bool,
    /// Sparse fine-tuning epochs after pruning; 0 skips fine-tuning.
    #[serde(default = "defaults::finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default = "defaults::finetune_learning_rate")]
    pub finetune_learning_rate: f32,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn finetune_epochs() -> usize {
        5
    }
    pub fn finetune_learning_rate() -> f32 {
        0.01
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && (0.0..1.0).contains(&self.alpha)) {
            return Err(Error::Argument(format!(
                "prune fraction must lie in [0,1), got {}",
                self.alpha
            )));
        }
        if self.finetune_epochs > 0
            && !(self.finetune_learning_rate.is_finite() && self.finetune_learning_rate > 0.0)
        {
            return Err(Error::Argument(format!(
                "fine-tune learning rate must be positive, got {}",
                self.finetune_learning_rate
            )));
        }
        Ok(())
    }
}

pub struct PrunePlan {
    /// True at parameter indices that are zeroed and frozen.
    pub mask: Vec<bool>,
    pub warnings: Vec<String>,
}

/// Ranks weights by |value| (ties by index) and marks the smallest for
/// removal. Never touches biases. A count that would empty a whole layer is
/// clamped so each output unit keeps its largest weight.
pub fn prune_plan(model: &ModelCheckpoint, alpha: f64, global: bool) -> Result<PrunePlan> {
    if !(alpha.is_finite() && (0.0..1.0).contains(&alpha)) {
        return Err(Error::Argument(format!(
            "prune fraction must lie in [0,1), got {alpha}"
        )));
    }
    let ranges = model.topology.layer_ranges();
    let mut mask = vec![false; model.params.len()];
    let mut warnings = Vec::new();

    let mark_smallest = |mask: &mut [bool], indices: &[usize], count: usize| {
        let mut order: Vec<usize> = indices.to_vec();
        order.sort_by(|&a, &b| {
            model.params[a]
                .abs()
                .partial_cmp(&model.params[b].abs())
                .expect("finite weights")
                .then(a.cmp(&b))
        });
        for &idx in order.iter().take(count) {
            mask[idx] = true;
        }
    };

    if global {
        let all: Vec<usize> = ranges.iter().flat_map(|r| r.weights.clone()).collect();
        let count = (alpha * all.len() as f64).round() as usize;
        mark_smallest(&mut mask, &all, count);
    } else {
        for range in &ranges {
            let indices: Vec<usize> = range.weights.clone().collect();
            let count = (alpha * indices.len() as f64).round() as usize;
            if count >= indices.len() {
                // Leave each output unit its largest weight instead.
                keep_per_unit_max(&mut mask, model, range, &mut warnings);
            } else {
                mark_smallest(&mut mask, &indices, count);
            }
        }
    }

    // A fully masked layer kills every forward path; back off to the largest
    // weight per output unit wherever that happened.
    for range in &ranges {
        if range.weights.clone().all(|i| mask[i]) {
            for i in range.weights.clone() {
                mask[i] = false;
            }
            keep_per_unit_max(&mut mask, model, range, &mut warnings);
        }
    }
    Ok(PrunePlan { mask, warnings })
}

fn keep_per_unit_max(
    mask: &mut [bool],
    model: &ModelCheckpoint,
    range: &crate::tensor::DenseRange,
    warnings: &mut Vec<String>,
) {
    let start = range.weights.start;
    for unit in 0..range.out_dim {
        let row = start + unit * range.in_dim..start + (unit + 1) * range.in_dim;
        let keep = row
            .clone()
            .max_by(|&a, &b| {
                model.params[a]
                    .abs()
                    .partial_cmp(&model.params[b].abs())
                    .expect("finite weights")
                    .then(b.cmp(&a))
            })
            .expect("dense rows are non-empty");
        for i in row {
            mask[i] = i != keep;
        }
    }
    warnings.push(format!(
        "prune fraction would empty a {}x{} layer; kept the largest weight per output unit",
        range.out_dim, range.in_dim
    ));
}

/// Magnitude pruning followed by sparse fine-tuning with the pruned
/// coordinates frozen at zero.
pub fn attack_prune(
    marked: &ModelCheckpoint,
    train_data: &Dataset,
    test_data: &Dataset,
    evidence: &OwnerEvidence,
    cfg: &PruneConfig,
) -> Result<(AttackOutcome, Vec<String>)> {
    cfg.validate()?;
    let plan = prune_plan(marked, cfg.alpha, cfg.global)?;
    let mut pruned = marked.clone();
    for (value, &masked) in pruned.params.iter_mut().zip(&plan.mask) {
        if masked {
            *value = 0.0;
        }
    }
    let model = if cfg.finetune_epochs > 0 {
        let opt = OptimizerConfig::sgd(cfg.finetune_learning_rate, cfg.finetune_epochs, cfg.seed);
        train(&pruned, train_data, &opt, Some(&plan.mask))?.model
    } else {
        pruned
    };
    let outcome = score_attack(
        model,
        test_data,
        evidence,
        format!(
            "prune alpha={} global={} finetune={}",
            cfg.alpha, cfg.global, cfg.finetune_epochs
        ),
    )?;
    Ok((outcome, plan.warnings))
}

/// The attacker's own signature, keys, and verification result after
/// overwriting, alongside the owner's view of the doubly marked model.
#[derive(Debug)]
pub struct OverwriteOutcome {
    pub owner: AttackOutcome,
    pub attacker_signature: Signature,
    pub attacker_keys: WMKeySet,
    pub attacker_scheme: EncodingScheme,
    pub attacker_report: EvalReport,
}

/// Runs the whole marking pipeline again on the marked model under attacker
/// secrets: new signature, scheme, keys, and a second embedding pass.
#[allow(clippy::too_many_arguments)]
pub fn attack_overwrite(
    marked: &ModelCheckpoint,
    train_data: &Dataset,
    test_data: &Dataset,
    evidence: &OwnerEvidence,
    attacker_k: usize,
    embed_cfg: &EmbedConfig,
    oversample: usize,
    attacker_seed: u64,
) -> Result<OverwriteOutcome> {
    if attacker_k == 0 {
        return Err(Error::Argument("attacker signature length must be at least 1".into()));
    }
    if attacker_seed == evidence.keys.attack.seed
        || attacker_seed == evidence.scheme.provenance.seed
    {
        return Err(Error::Attack(
            "attacker seed collides with the owner's secrets; overwriting presumes independent secrets".into(),
        ));
    }

    let attacker_signature =
        Signature::random(attacker_k, derive_seed(attacker_seed, "attacker-signature"))?;
    let attacker_scheme = design_scheme(
        marked,
        train_data,
        evidence.scheme.provenance.per_class.max(10),
        derive_seed(attacker_seed, "attacker-scheme"),
    )?;
    let attack_cfg = AttackConfig::with_seed(derive_seed(attacker_seed, "attacker-keys"));
    let candidates = generate_candidates(
        marked,
        &attacker_scheme,
        &attacker_signature,
        train_data,
        &attack_cfg,
        oversample,
    )?;
    let mut attacker_embed = embed_cfg.clone();
    attacker_embed.seed = derive_seed(attacker_seed, "attacker-embed");
    let doubly = embed(
        marked,
        train_data,
        None,
        Some(&candidates),
        &attacker_scheme,
        &attacker_embed,
    )?
    .model;

    let variant_cfg = OptimizerConfig::sgd(
        attacker_embed.learning_rate,
        5,
        derive_seed(attacker_seed, "attacker-variants"),
    );
    let (attacker_keys, _) = filter_keys(
        &candidates,
        &doubly,
        marked,
        train_data,
        3,
        &variant_cfg,
        derive_seed(attacker_seed, "attacker-filter"),
    )?;
    let attacker_report = extract(
        &doubly,
        &attacker_keys,
        &attacker_scheme,
        &attacker_signature,
        Some(test_data),
    )?;

    let owner = score_attack(
        doubly,
        test_data,
        evidence,
        format!("overwrite k={attacker_k} seed={attacker_seed}"),
    )?;
    Ok(OverwriteOutcome {
        owner,
        attacker_signature,
        attacker_keys,
        attacker_scheme,
        attacker_report,
    })
}

/// Verification results for a zoo of independently trained models; any model
/// where the owner's keys verify is a false positive and gets flagged.
#[derive(Debug)]
pub struct IntegrityOutcome {
    pub reports: Vec<EvalReport>,
    /// Zoo indices whose bit error rate is zero.
    pub violations: Vec<usize>,
}

pub fn integrity_suite(
    evidence: &OwnerEvidence,
    zoo: &[ModelCheckpoint],
) -> Result<IntegrityOutcome> {
    if zoo.len() < 6 {
        return Err(Error::Argument(format!(
            "integrity needs at least 6 independent models, got {}",
            zoo.len()
        )));
    }
    let mut reports = Vec::with_capacity(zoo.len());
    let mut violations = Vec::new();
    for (i, model) in zoo.iter().enumerate() {
        let report = evidence.verify(model, None)?;
        if report.detection {
            violations.push(i);
        }
        reports.push(report);
    }
    Ok(IntegrityOutcome {
        reports,
        violations,
    })
}

fn hidden_dims(topology: &NetworkTopology) -> Vec<usize> {
    let mut dims = Vec::new();
    let dense: Vec<&LayerSpec> = topology
        .layers
        .iter()
        .filter(|l| matches!(l, LayerSpec::Dense { .. }))
        .collect();
    for (i, layer) in dense.iter().enumerate() {
        if i + 1 == dense.len() {
            break;
        }
        if let LayerSpec::Dense { out_dim, .. } = layer {
            dims.push(*out_dim);
        }
    }
    dims
}

/// Trains six unmarked models for false-positive checks: three reseeded
/// copies of the base topology, a half-width net, a double-width net, and one
/// with an extra hidden layer.
pub fn build_zoo(
    train_data: &Dataset,
    base_topology: &NetworkTopology,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<Vec<ModelCheckpoint>> {
    base_topology.validate()?;
    let hidden = hidden_dims(base_topology);
    if hidden.is_empty() {
        return Err(Error::Argument(
            "zoo construction needs at least one hidden layer to rescale".into(),
        ));
    }
    let input = base_topology.input_dim;
    let classes = base_topology.num_classes;

    let mut variants: Vec<NetworkTopology> = vec![
        base_topology.clone(),
        base_topology.clone(),
        base_topology.clone(),
    ];
    let halved: Vec<usize> = hidden.iter().map(|&h| (h / 2).max(2)).collect();
    let doubled: Vec<usize> = hidden.iter().map(|&h| h * 2).collect();
    let mut deeper = hidden.clone();
    deeper.push(*hidden.last().expect("non-empty"));
    variants.push(NetworkTopology::mlp(input, &halved, classes));
    variants.push(NetworkTopology::mlp(input, &doubled, classes));
    variants.push(NetworkTopology::mlp(input, &deeper, classes));

    let mut zoo = Vec::with_capacity(variants.len());
    for (i, topology) in variants.into_iter().enumerate() {
        let init = ModelCheckpoint::init_he_uniform(topology, derive_seed(seed, &format!("zoo-init-{i}")))?;
        let cfg = OptimizerConfig {
            seed: derive_seed(seed, &format!("zoo-train-{i}")),
            ..optimizer.clone()
        };
        zoo.push(train(&init, train_data, &cfg, None)?.model);
    }
    Ok(zoo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvasionKind {
    FgsmUntargeted,
    MimTargeted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvasionReport {
    pub kind: EvasionKind,
    pub epsilon: f32,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub examples: usize,
}

/// Accuracy under per-sample evasion at budget `cfg.epsilon`. Targets for the
/// targeted attack are drawn per sample, seeded, from the other classes.
pub fn adv_robustness(
    model: &ModelCheckpoint,
    data: &Dataset,
    kind: EvasionKind,
    cfg: &AttackConfig,
) -> Result<EvasionReport> {
    if data.len() == 0 {
        return Err(Error::Argument("evasion needs at least one sample".into()));
    }
    let clean_accuracy = accuracy(model, &data.images, &data.labels)?;
    let mut rng = rng_from(derive_seed(cfg.seed, "evasion-targets"));
    let classes = model.topology.num_classes;

    let mut hits = 0usize;
    for i in 0..data.len() {
        let image = Tensor::new(vec![data.feature_dim()], data.images.row(i).to_vec())?;
        let label = data.labels[i];
        let adv = match kind {
            EvasionKind::FgsmUntargeted => fgsm_untargeted(model, &image, label, cfg)?,
            EvasionKind::MimTargeted => {
                let mut target = rng.random_range(0..classes);
                while target == label {
                    target = rng.random_range(0..classes);
                }
                mim_targeted(model, &image, target, cfg)?
            }
        };
        let batch = Tensor::new(vec![1, data.feature_dim()], adv.data().to_vec())?;
        let pred = model.predict_classes(&batch)?[0];
        if pred == label {
            hits += 1;
        }
    }
    Ok(EvasionReport {
        kind,
        epsilon: cfg.epsilon,
        clean_accuracy,
        adversarial_accuracy: hits as f64 / data.len() as f64,
        examples: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, SplitTag};
    use std::sync::OnceLock;

    struct Fixture {
        train: Dataset,
        test: Dataset,
        unmarked: ModelCheckpoint,
        marked: ModelCheckpoint,
        scheme: EncodingScheme,
        keys: WMKeySet,
        signature: Signature,
    }

    fn fixture() -> &'static Fixture {
        static FIXTURE: OnceLock<Fixture> = OnceLock::new();
        FIXTURE.get_or_init(|| {
            let train_data = synth_blobs(4, 80, 6, 5.0, 101, SplitTag::Train).unwrap();
            let test_data = synth_blobs(4, 25, 6, 5.0, 102, SplitTag::Test).unwrap();
            let topo = NetworkTopology::mlp(6, &[32], 4);
            let init = ModelCheckpoint::init_he_uniform(topo, 103).unwrap();
            let unmarked = train(&init, &train_data, &OptimizerConfig::sgd(0.1, 8, 104), None)
                .unwrap()
                .model;
            let scheme = design_scheme(&unmarked, &train_data, 30, 105).unwrap();
            let signature = Signature::random(6, 106).unwrap();
            let candidates = generate_candidates(
                &unmarked,
                &scheme,
                &signature,
                &train_data,
                &AttackConfig {
                    epsilon: 0.35,
                    ..AttackConfig::with_seed(107)
                },
                10,
            )
            .unwrap();
            let mut embed_cfg = EmbedConfig::new(0.008, 108);
            embed_cfg.epochs = 40;
            embed_cfg.lambda = 2.0;
            let marked = embed(
                &unmarked,
                &train_data,
                None,
                Some(&candidates),
                &scheme,
                &embed_cfg,
            )
            .unwrap()
            .model;
            let (keys, _) = filter_keys(
                &candidates,
                &marked,
                &unmarked,
                &train_data,
                3,
                &OptimizerConfig::sgd(0.01, 5, 109),
                110,
            )
            .unwrap();
            Fixture {
                train: train_data,
                test: test_data,
                unmarked,
                marked,
                scheme,
                keys,
                signature,
            }
        })
    }

    fn evidence(f: &Fixture) -> OwnerEvidence<'_> {
        OwnerEvidence {
            keys: &f.keys,
            scheme: &f.scheme,
            signature: &f.signature,
        }
    }

    #[test]
    fn fixture_marked_model_verifies_with_zero_ber() {
        let f = fixture();
        let report = evidence(f).verify(&f.marked, Some(&f.test)).unwrap();
        assert_eq!(report.ber, 0.0, "recovered {:?}", report.recovered_bits);
        assert!(report.detection);
        assert_eq!(report.query_count, 6);
    }

    #[test]
    fn light_finetuning_keeps_the_signature() {
        let f = fixture();
        let out = attack_finetune(&f.marked, &f.train, &f.test, &evidence(f), 5, 0.01, 200).unwrap();
        assert_eq!(out.report.ber, 0.0, "ber after finetune {}", out.report.ber);
        assert!(out.test_accuracy > 0.8);
        assert!(out.descriptor.contains("finetune"));
    }

    #[test]
    fn zero_epoch_finetune_is_rejected() {
        let f = fixture();
        assert!(matches!(
            attack_finetune(&f.marked, &f.train, &f.test, &evidence(f), 0, 0.01, 0),
            Err(Error::Attack(_))
        ));
    }

    #[test]
    fn prune_toy_layer_zeroes_the_two_smallest_weights() {
        let topo = NetworkTopology {
            input_dim: 2,
            num_classes: 2,
            layers: vec![LayerSpec::Dense {
                in_dim: 2,
                out_dim: 2,
                has_bias: true,
            }],
        };
        let model = ModelCheckpoint {
            topology: topo,
            params: vec![0.1, -0.2, 0.3, -0.4, 0.7, -0.8],
            config_sha256: None,
        };
        let plan = prune_plan(&model, 0.5, false).unwrap();
        assert_eq!(plan.mask, vec![true, true, false, false, false, false]);
        assert!(plan.warnings.is_empty());
        let mut pruned = model.params.clone();
        for (v, &m) in pruned.iter_mut().zip(&plan.mask) {
            if m {
                *v = 0.0;
            }
        }
        // Biases survive untouched.
        assert_eq!(pruned, vec![0.0, 0.0, 0.3, -0.4, 0.7, -0.8]);
    }

    #[test]
    fn prune_backs_off_to_one_weight_per_unit_when_a_layer_would_empty() {
        let topo = NetworkTopology {
            input_dim: 2,
            num_classes: 2,
            layers: vec![LayerSpec::Dense {
                in_dim: 2,
                out_dim: 2,
                has_bias: false,
            }],
        };
        let model = ModelCheckpoint {
            topology: topo,
            params: vec![0.1, -0.2, 0.3, -0.4],
            config_sha256: None,
        };
        // round(0.95 * 4) = 4 empties the layer; the plan keeps the largest
        // weight of each output unit instead.
        let plan = prune_plan(&model, 0.95, false).unwrap();
        assert_eq!(plan.mask, vec![true, false, true, false]);
        assert_eq!(plan.warnings.len(), 1);
        assert!(plan.warnings[0].contains("largest weight per output unit"));
    }

    #[test]
    fn global_pruning_pools_magnitudes_across_layers() {
        let topo = NetworkTopology {
            input_dim: 2,
            num_classes: 2,
            layers: vec![
                LayerSpec::Dense {
                    in_dim: 2,
                    out_dim: 2,
                    has_bias: false,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_dim: 2,
                    out_dim: 2,
                    has_bias: false,
                },
            ],
        };
        let model = ModelCheckpoint {
            topology: topo,
            params: vec![0.01, 0.02, 0.03, 0.04, 1.0, 2.0, 3.0, 4.0],
            config_sha256: None,
        };
        // Global: round(0.375 * 8) = 3 smallest all live in layer one.
        let global = prune_plan(&model, 0.375, true).unwrap();
        assert_eq!(
            global.mask,
            vec![true, true, true, false, false, false, false, false]
        );
        // Per layer: round(0.375 * 4) = 2 in each layer.
        let local = prune_plan(&model, 0.375, false).unwrap();
        assert_eq!(
            local.mask,
            vec![true, true, false, false, true, true, false, false]
        );
    }

    #[test]
    fn pruned_coordinates_stay_zero_through_sparse_finetuning() {
        let f = fixture();
        let cfg = PruneConfig {
            alpha: 0.5,
            global: false,
            finetune_epochs: 3,
            finetune_learning_rate: 0.01,
            seed: 300,
        };
        let (out, warnings) = attack_prune(&f.marked, &f.train, &f.test, &evidence(f), &cfg).unwrap();
        assert!(warnings.is_empty());
        let plan = prune_plan(&f.marked, 0.5, false).unwrap();
        for (i, &masked) in plan.mask.iter().enumerate() {
            if masked {
                assert_eq!(out.model.params[i], 0.0, "coordinate {i} drifted");
            }
        }
        assert!(out.test_accuracy > 0.7, "accuracy {}", out.test_accuracy);
    }

    #[test]
    fn alpha_zero_prune_without_finetuning_is_identity() {
        let f = fixture();
        let cfg = PruneConfig {
            alpha: 0.0,
            global: false,
            finetune_epochs: 0,
            finetune_learning_rate: 0.01,
            seed: 0,
        };
        let (out, warnings) = attack_prune(&f.marked, &f.train, &f.test, &evidence(f), &cfg).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(out.model.params, f.marked.params);
        assert_eq!(out.report.ber, 0.0);
    }

    #[test]
    fn prune_config_bounds() {
        let mut cfg = PruneConfig {
            alpha: 1.0,
            global: false,
            finetune_epochs: 0,
            finetune_learning_rate: 0.01,
            seed: 0,
        };
        assert!(cfg.validate().is_err());
        cfg.alpha = -0.1;
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.9;
        cfg.validate().unwrap();
    }

    #[test]
    fn overwrite_rejects_colliding_seeds() {
        let f = fixture();
        let embed_cfg = EmbedConfig::new(0.01, 0);
        let owner_seed = f.keys.attack.seed;
        assert!(matches!(
            attack_overwrite(
                &f.marked,
                &f.train,
                &f.test,
                &evidence(f),
                4,
                &embed_cfg,
                4,
                owner_seed
            ),
            Err(Error::Attack(_))
        ));
    }

    #[test]
    fn overwriting_adds_a_second_mark_without_erasing_the_first() {
        let f = fixture();
        let mut embed_cfg = EmbedConfig::new(0.008, 0);
        embed_cfg.epochs = 40;
        embed_cfg.lambda = 2.0;
        let out = attack_overwrite(
            &f.marked,
            &f.train,
            &f.test,
            &evidence(f),
            4,
            &embed_cfg,
            10,
            777,
        )
        .unwrap();
        assert_eq!(out.owner.report.ber, 0.0, "owner ber {}", out.owner.report.ber);
        assert_eq!(out.attacker_report.ber, 0.0, "attacker ber {}", out.attacker_report.ber);
        assert_eq!(out.attacker_signature.len(), 4);
    }

    #[test]
    fn unrelated_models_never_carry_the_signature() {
        let f = fixture();
        let zoo = build_zoo(
            &f.train,
            &f.marked.topology,
            &OptimizerConfig::sgd(0.1, 6, 0),
            400,
        )
        .unwrap();
        assert_eq!(zoo.len(), 6);
        let outcome = integrity_suite(&evidence(f), &zoo).unwrap();
        assert!(outcome.violations.is_empty(), "violations {:?}", outcome.violations);
        for report in &outcome.reports {
            assert!(report.ber > 0.0);
        }
    }

    #[test]
    fn the_marked_model_hiding_in_the_zoo_is_flagged() {
        let f = fixture();
        let mut zoo = build_zoo(
            &f.train,
            &f.marked.topology,
            &OptimizerConfig::sgd(0.1, 6, 0),
            400,
        )
        .unwrap();
        zoo.insert(2, f.marked.clone());
        let outcome = integrity_suite(&evidence(f), &zoo).unwrap();
        assert_eq!(outcome.violations, vec![2]);
    }

    #[test]
    fn short_zoos_are_rejected() {
        let f = fixture();
        let zoo = vec![f.unmarked.clone(); 5];
        assert!(matches!(
            integrity_suite(&evidence(f), &zoo),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_budget_evasion_matches_clean_accuracy() {
        let f = fixture();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::with_seed(500)
        };
        for kind in [EvasionKind::FgsmUntargeted, EvasionKind::MimTargeted] {
            let report = adv_robustness(&f.unmarked, &f.test, kind, &cfg).unwrap();
            assert_eq!(report.adversarial_accuracy, report.clean_accuracy);
        }
    }

    #[test]
    fn evasion_at_positive_budget_hurts_accuracy() {
        let f = fixture();
        let cfg = AttackConfig {
            epsilon: 0.25,
            ..AttackConfig::with_seed(501)
        };
        let report = adv_robustness(&f.unmarked, &f.test, EvasionKind::MimTargeted, &cfg).unwrap();
        assert!(report.clean_accuracy > 0.95);
        assert!(
            report.adversarial_accuracy < report.clean_accuracy,
            "attack had no effect: {} vs {}",
            report.adversarial_accuracy,
            report.clean_accuracy
        );
        assert_eq!(report.examples, 100);
    }
}

