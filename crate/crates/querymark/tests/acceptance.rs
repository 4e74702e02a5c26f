//! End-to-end acceptance checks on the digits dataset: one test per
//! criterion, each printing a verdict line. The marked models for K = 20,
//! 30, 50 build once and are shared; attack tests read them without
//! mutating.
//!
//! Two criteria fail at this input scale and the tests say so rather than
//! loosening their assertions; the failure messages carry the measured
//! mechanism.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use querymark::attacks::{
    adv_robustness, attack_finetune, attack_overwrite, attack_prune, build_zoo, integrity_suite,
    EvasionKind, OwnerEvidence, PruneConfig,
};
use querymark::cli::{cmd_overhead, cmd_pipeline, PipelineConfig, RunContext};
use querymark::data::{synth_blobs, SplitTag};
use querymark::embedding::{embed, EmbedConfig};
use querymark::encoding::{
    decode, decode_classes, design_scheme, entropy, kmeans, EncodingScheme, SchemeProvenance,
    Signature,
};
use querymark::extraction::{ber, extract, EvalReport, Predictor};
use querymark::keygen::{generate_candidates, mim_targeted, AttackConfig, KeyStage, WMKey, WMKeySet};
use querymark::rng::rng_from;
use querymark::tensor::{
    accuracy, grad_params, train, LayerSpec, LossSpec, ModelCheckpoint, NetworkTopology,
    OptimizerConfig, Tensor,
};

fn digits_dir() -> PathBuf {
    std::env::var_os("QUERYMARK_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            Path::new(env!("CARGO_MANIFEST_DIR"))
                .join("..")
                .join("..")
                .join("data")
                .join("digits")
        })
}

/// Per-signature-length embedding settings. `clean_per_key` scales inversely
/// with K so each key sees the same share of gradient steps regardless of
/// how many keys share a batch.
const SETTINGS: [(usize, usize, f32); 3] = [(20, 25, 3.0), (30, 16, 2.5), (50, 10, 3.0)];

fn digits_config(k: usize, clean_per_key: usize, lambda: f32, root: &Path) -> PipelineConfig {
    serde_json::from_value(serde_json::json!({
        "name": format!("accept-k{k}"),
        "seed": 11,
        "dataset": {"kind": "idx", "dir": digits_dir()},
        "hidden": [128, 64],
        "optimizer": {
            "kind": "adam",
            "learning_rate": 0.001,
            "epochs": 60,
            "batch_size": 32,
            "seed": 0
        },
        "embed": {
            "learning_rate": 0.0015,
            "epochs": 500,
            "clean_per_key": clean_per_key,
            "lambda": lambda
        },
        "attack": {"epsilon": 0.35, "iterations": 10, "momentum": 1.0, "seed": 0},
        "signature": {"k": k},
        "oversample": 10,
        "artifact_root": root.to_str().unwrap()
    }))
    .expect("acceptance config is well-formed")
}

struct KRun {
    k: usize,
    ctx: RunContext,
    baseline: ModelCheckpoint,
    marked: ModelCheckpoint,
    keys: WMKeySet,
    scheme: EncodingScheme,
    signature: Signature,
    base_acc: f64,
    marked_acc: f64,
    report: EvalReport,
}

impl KRun {
    fn evidence(&self) -> OwnerEvidence<'_> {
        OwnerEvidence {
            keys: &self.keys,
            scheme: &self.scheme,
            signature: &self.signature,
        }
    }
}

struct World {
    _root: tempfile::TempDir,
    runs: Vec<KRun>,
    build_seconds: f64,
}

impl World {
    fn run(&self, k: usize) -> &KRun {
        self.runs.iter().find(|r| r.k == k).expect("known K")
    }
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let root = tempfile::tempdir().expect("tempdir");
        let started = Instant::now();
        let runs = SETTINGS
            .iter()
            .map(|&(k, clean_per_key, lambda)| {
                let ctx = RunContext::load(digits_config(k, clean_per_key, lambda, root.path()))
                    .expect("context");
                let code = cmd_pipeline(&ctx).expect("pipeline");
                assert_eq!(code, 0, "K={k} pipeline did not end in detection");
                let baseline = ctx.load_baseline().unwrap();
                let marked = ctx.load_marked().unwrap();
                let (keys, scheme, signature) = ctx.evidence_parts().unwrap();
                let base_acc =
                    accuracy(&baseline, &ctx.test_data.images, &ctx.test_data.labels).unwrap();
                let marked_acc =
                    accuracy(&marked, &ctx.test_data.images, &ctx.test_data.labels).unwrap();
                let report = extract(&marked, &keys, &scheme, &signature, None).unwrap();
                KRun {
                    k,
                    ctx,
                    baseline,
                    marked,
                    keys,
                    scheme,
                    signature,
                    base_acc,
                    marked_acc,
                    report,
                }
            })
            .collect();
        World {
            _root: root,
            runs,
            build_seconds: started.elapsed().as_secs_f64(),
        }
    })
}

fn verdict(number: u32, name: &str, pass: bool, detail: &str) -> bool {
    println!(
        "criterion {number} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

#[test]
fn criterion_1_marking_preserves_test_accuracy() {
    let w = world();
    let detail: Vec<String> = w
        .runs
        .iter()
        .map(|r| {
            format!(
                "K={} {:.4} vs {:.4} ({:+.2}pt)",
                r.k,
                r.marked_acc,
                r.base_acc,
                (r.marked_acc - r.base_acc) * 100.0
            )
        })
        .collect();
    let within = w
        .runs
        .iter()
        .all(|r| (r.base_acc - r.marked_acc) * 100.0 <= 0.5 + 1e-9);
    let on_budget = w.build_seconds < 1800.0;
    let pass = verdict(
        1,
        "fidelity",
        within && on_budget,
        &format!("{}; built in {:.0}s", detail.join(", "), w.build_seconds),
    );
    assert!(pass, "marked accuracy strayed more than 0.5pt from baseline");
}

#[test]
fn criterion_2_extraction_recovers_every_bit() {
    let w = world();
    let detail: Vec<String> = w
        .runs
        .iter()
        .map(|r| format!("K={} ber {} detection {}", r.k, r.report.ber, r.report.detection))
        .collect();
    let pass = verdict(
        2,
        "credibility",
        w.runs.iter().all(|r| r.report.ber == 0.0 && r.report.detection),
        &detail.join(", "),
    );
    assert!(pass, "extraction must recover the signature exactly");
}

#[test]
fn criterion_3_finetuning_leaves_zero_bit_errors() {
    let w = world();
    let r = w.run(50);
    let mut detail = Vec::new();
    let mut pass = true;
    for epochs in [20usize, 50] {
        let outcome = attack_finetune(
            &r.marked,
            &r.ctx.train_data,
            &r.ctx.test_data,
            &r.evidence(),
            epochs,
            0.01,
            r.ctx.seed(&format!("attack-finetune-{epochs}")),
        )
        .unwrap();
        detail.push(format!(
            "{}ep ber {} (attacker acc {:.4})",
            epochs, outcome.report.ber, outcome.test_accuracy
        ));
        pass &= outcome.report.ber == 0.0;
    }
    let pass = verdict(3, "fine-tuning robustness", pass, &detail.join(", "));
    assert!(pass, "the signature must survive 20 and 50 epochs of retraining");
}

#[test]
fn criterion_4_pruning_cannot_strip_the_mark_cheaply() {
    let w = world();
    let r = w.run(50);
    let mut detail = Vec::new();
    let mut pass = true;
    for tenth in 1..=9usize {
        let alpha = tenth as f64 / 10.0;
        let cfg = PruneConfig {
            alpha,
            global: false,
            finetune_epochs: 5,
            finetune_learning_rate: 0.0001,
            seed: r.ctx.seed(&format!("attack-prune-{alpha}")),
        };
        let (outcome, _) = attack_prune(
            &r.marked,
            &r.ctx.train_data,
            &r.ctx.test_data,
            &r.evidence(),
            &cfg,
        )
        .unwrap();
        let intact = outcome.report.ber == 0.0;
        let crippled = outcome.test_accuracy <= r.base_acc - 0.05;
        if alpha <= 0.8 {
            pass &= intact || crippled;
        }
        if !intact {
            detail.push(format!(
                "alpha {alpha}: ber {} at acc {:.4}",
                outcome.report.ber, outcome.test_accuracy
            ));
        }
    }
    if detail.is_empty() {
        detail.push("ber 0 at every alpha".into());
    }
    let pass = verdict(4, "pruning robustness", pass, &detail.join(", "));
    assert!(
        pass,
        "pruning up to 0.8 must not remove the mark while accuracy stays comparable"
    );
}

#[test]
fn criterion_5_overwriting_preserves_both_signatures() {
    let w = world();
    let mut detail = Vec::new();
    let mut pass = true;
    for k in [20usize, 50] {
        let r = w.run(k);
        let outcome = attack_overwrite(
            &r.marked,
            &r.ctx.train_data,
            &r.ctx.test_data,
            &r.evidence(),
            k,
            &r.ctx.embed_config(),
            r.ctx.config.oversample,
            r.ctx.seed("attacker"),
        )
        .unwrap();
        detail.push(format!(
            "K={k} owner ber {} / attacker ber {}",
            outcome.owner.report.ber, outcome.attacker_report.ber
        ));
        pass &= outcome.owner.report.ber == 0.0 && outcome.attacker_report.ber == 0.0;
    }
    let pass = verdict(5, "overwriting robustness", pass, &detail.join(", "));
    assert!(
        pass,
        "known shortfall at 8x8 scale: any attacker embedding strong enough to implant \
         its own keys (attacker ber 0) also reverts the owner's keys to their crafted \
         target labels, because every key perturbation spans the same 64 input pixels \
         and the restored labels are memorized exceptions that the second embedding \
         pass forgets; budgets below the implant threshold starve the attacker's \
         filter instead, so no budget satisfies both legs"
    );
}

#[test]
fn criterion_6_unrelated_models_never_verify() {
    let w = world();
    let r50 = w.run(50);
    let zoo = build_zoo(
        &r50.ctx.train_data,
        &r50.baseline.topology,
        &r50.ctx.baseline_optimizer(),
        r50.ctx.seed("zoo"),
    )
    .unwrap();
    let mut detail = Vec::new();
    let mut pass = true;
    for r in &w.runs {
        let outcome = integrity_suite(&r.evidence(), &zoo).unwrap();
        let min = outcome
            .reports
            .iter()
            .map(|rep| rep.ber)
            .fold(f64::INFINITY, f64::min);
        detail.push(format!("K={} min ber {:.4}", r.k, min));
        pass &= outcome.violations.is_empty() && min > 0.0;
    }
    let pass = verdict(
        6,
        "integrity",
        pass,
        &format!("{} across {} independent models", detail.join(", "), zoo.len()),
    );
    assert!(pass, "no unmarked model may carry the signature");
}

#[test]
fn criterion_7_marking_does_not_weaken_evasion_resistance() {
    let w = world();
    let r = w.run(50);
    let cfg = AttackConfig {
        epsilon: 0.1,
        ..AttackConfig::with_seed(r.ctx.seed("evasion"))
    };
    let base = adv_robustness(&r.baseline, &r.ctx.test_data, EvasionKind::MimTargeted, &cfg).unwrap();
    let marked =
        adv_robustness(&r.marked, &r.ctx.test_data, EvasionKind::MimTargeted, &cfg).unwrap();
    let pass = verdict(
        7,
        "evasion side effect",
        marked.adversarial_accuracy >= base.adversarial_accuracy,
        &format!(
            "marked {:.4} vs baseline {:.4} under targeted momentum evasion at eps 0.1",
            marked.adversarial_accuracy, base.adversarial_accuracy
        ),
    );
    assert!(
        pass,
        "known shortfall at 8x8 scale: the long embedding needed to survive \
         fine-tuning erodes test-point margins, so the marked model measures \
         slightly weaker under input evasion; gentle embeddings measure equal \
         but do not survive criterion 3's retraining"
    );
}

// ---------------------------------------------------------------------------
// Criterion 8 reruns the numeric cross-checks under a stopwatch. The oracles
// are written here, independent of the library internals.

fn oracle_logits(model: &ModelCheckpoint, x: &[f64]) -> Vec<f64> {
    let mut cur: Vec<f64> = x.to_vec();
    let mut off = 0usize;
    for layer in &model.topology.layers {
        match layer {
            LayerSpec::Dense {
                in_dim,
                out_dim,
                has_bias,
            } => {
                let w = &model.params[off..off + out_dim * in_dim];
                off += out_dim * in_dim;
                let mut next = vec![0.0f64; *out_dim];
                if *has_bias {
                    for (o, v) in next.iter_mut().enumerate() {
                        *v = model.params[off + o] as f64;
                    }
                    off += out_dim;
                }
                for o in 0..*out_dim {
                    for i in 0..*in_dim {
                        next[o] += w[o * in_dim + i] as f64 * cur[i];
                    }
                }
                cur = next;
            }
            LayerSpec::Relu => {
                for v in &mut cur {
                    *v = v.max(0.0);
                }
            }
        }
    }
    cur
}

fn oracle_ce(model: &ModelCheckpoint, batch: &Tensor, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for r in 0..batch.rows() {
        let x: Vec<f64> = batch.row(r).iter().map(|&v| v as f64).collect();
        let z = oracle_logits(model, &x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[targets[r]];
    }
    total / batch.rows() as f64
}

fn exhaustive_two_cluster_min(points: &[Vec<f32>]) -> f64 {
    let cost = |members: &[usize]| {
        let dim = points[0].len();
        let mut mean = vec![0.0f64; dim];
        for &i in members {
            for d in 0..dim {
                mean[d] += points[i][d] as f64;
            }
        }
        for v in &mut mean {
            *v /= members.len() as f64;
        }
        members
            .iter()
            .map(|&i| {
                (0..dim)
                    .map(|d| (points[i][d] as f64 - mean[d]).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
    };
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1u32 << (n - 1)) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for i in 0..n {
            if mask & (1 << i) != 0 {
                a.push(i);
            } else {
                b.push(i);
            }
        }
        best = best.min(cost(&a) + cost(&b));
    }
    best
}

struct ReplayOracle {
    answers: Vec<usize>,
    classes: usize,
}

impl Predictor for ReplayOracle {
    fn predict_classes(&self, images: &Tensor) -> querymark::Result<Vec<usize>> {
        assert_eq!(images.rows(), self.answers.len());
        Ok(self.answers.clone())
    }

    fn num_classes(&self) -> usize {
        self.classes
    }
}

#[test]
fn criterion_8_property_suites_pass_inside_two_minutes() {
    let started = Instant::now();
    let mut rng = rng_from(0x5eed);

    // Analytic gradients against central differences.
    let topo = NetworkTopology::mlp(3, &[5], 3);
    let model = ModelCheckpoint::init_he_uniform(topo, 7).unwrap();
    let batch = Tensor::from_rows(&[
        vec![0.2f32, 0.8, 0.5],
        vec![0.9, 0.1, 0.4],
        vec![0.3, 0.3, 0.7],
    ])
    .unwrap();
    let targets = vec![0usize, 2, 1];
    let analytic = grad_params(&model, &batch, &LossSpec::CrossEntropy { targets: &targets }).unwrap();
    let h = 1e-3f32;
    for _ in 0..40 {
        let idx = rng.random_range(0..model.params.len());
        let mut plus = model.clone();
        plus.params[idx] += h;
        let mut minus = model.clone();
        minus.params[idx] -= h;
        let fd = (oracle_ce(&plus, &batch, &targets) - oracle_ce(&minus, &batch, &targets))
            / (2.0 * h as f64);
        let a = analytic[idx] as f64;
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1.0);
        assert!(rel < 1e-3, "gradient {idx}: analytic {a} vs central difference {fd}");
    }

    // Two-cluster Lloyd against exhaustive partition search.
    for round in 0..20u64 {
        let n = 2 + (round as usize % 7);
        let dim = 1 + (round as usize % 3);
        let points: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let outcome = kmeans(&points, 2, round, 100, 1e-12).unwrap();
        let oracle = exhaustive_two_cluster_min(&points);
        assert!(
            (outcome.inertia - oracle).abs() <= 1e-7 * oracle.max(1.0),
            "lloyd {} vs exhaustive {oracle}",
            outcome.inertia
        );
    }

    // Bit error rate metric axioms.
    fn draw(rng: &mut impl Rng, n: usize) -> Vec<u8> {
        (0..n).map(|_| rng.random_range(0..2u8)).collect()
    }
    for _ in 0..200 {
        let n = rng.random_range(1..64usize);
        let (a, b, c) = (draw(&mut rng, n), draw(&mut rng, n), draw(&mut rng, n));
        let ab = ber(&a, &b).unwrap();
        assert_eq!(ber(&a, &a).unwrap(), 0.0);
        assert_eq!(ab, ber(&b, &a).unwrap());
        assert!((0.0..=1.0).contains(&ab));
        assert!(ab <= ber(&a, &c).unwrap() + ber(&c, &b).unwrap() + 1e-12);
        assert_eq!(ab == 0.0, a == b);
    }

    // Decoding against a scalar argmax plus table lookup.
    let class_to_bit = vec![0u8, 1, 1, 0, 1];
    let scheme = EncodingScheme {
        num_classes: 5,
        base: 2,
        class_to_bit: class_to_bit.clone(),
        centroids: vec![vec![0.0; 5], vec![1.0; 5]],
        provenance: SchemeProvenance {
            model_sha256: "oracle".into(),
            per_class: 0,
            seed: 0,
        },
        config_sha256: None,
    };
    scheme.validate().unwrap();
    let rows: Vec<Vec<f32>> = (0..50)
        .map(|_| (0..5).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let decoded = decode(&Tensor::from_rows(&rows).unwrap(), &scheme).unwrap();
    for (row, bit) in rows.iter().zip(&decoded) {
        let mut arg = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        assert_eq!(*bit, class_to_bit[arg]);
    }
    let classes: Vec<usize> = (0..40).map(|_| rng.random_range(0..5)).collect();
    let via_classes = decode_classes(&classes, &scheme).unwrap();
    for (cls, bit) in classes.iter().zip(&via_classes) {
        assert_eq!(*bit, class_to_bit[*cls]);
    }

    // Crafted keys stay inside the perturbation ball and the pixel box.
    let craft_model =
        ModelCheckpoint::init_he_uniform(NetworkTopology::mlp(4, &[8], 3), 11).unwrap();
    for round in 0..20u64 {
        let epsilon = 0.01 + 0.59 * (round as f32 / 19.0);
        let base: Vec<f32> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let image = Tensor::from_rows(&[base.clone()]).unwrap();
        let cfg = AttackConfig {
            epsilon,
            iterations: 1 + (round as usize % 10),
            ..AttackConfig::with_seed(round)
        };
        let key = mim_targeted(&craft_model, &image, round as usize % 3, &cfg).unwrap();
        for (k, b) in key.data().iter().zip(&base) {
            assert!((0.0..=1.0).contains(k), "pixel {k} left the box");
            assert!((k - b).abs() <= epsilon + 1e-6, "moved {} at budget {epsilon}", (k - b).abs());
        }
    }

    // Keyless embedding reduces to plain training bit for bit.
    let blob_train = synth_blobs(3, 30, 4, 5.0, 501, SplitTag::Train).unwrap();
    let seed_model =
        ModelCheckpoint::init_he_uniform(NetworkTopology::mlp(4, &[8], 3), 77).unwrap();
    let blob_base = train(&seed_model, &blob_train, &OptimizerConfig::sgd(0.1, 4, 3), None)
        .unwrap()
        .model;
    let blob_scheme = design_scheme(&blob_base, &blob_train, 20, 9).unwrap();
    let mut reduce_cfg = EmbedConfig::new(0.05, 909);
    reduce_cfg.epochs = 3;
    let embedded = embed(&blob_base, &blob_train, None, None, &blob_scheme, &reduce_cfg)
        .unwrap()
        .model;
    let retrained = train(&blob_base, &blob_train, &reduce_cfg.optimizer(), None)
        .unwrap()
        .model;
    assert_eq!(embedded.params, retrained.params);

    // One seed, one result: scheme, keys, and weights reproduce exactly.
    let signature = Signature::random(4, 31).unwrap();
    let craft_cfg = AttackConfig {
        epsilon: 0.35,
        ..AttackConfig::with_seed(41)
    };
    let c1 = generate_candidates(&blob_base, &blob_scheme, &signature, &blob_train, &craft_cfg, 5)
        .unwrap();
    let c2 = generate_candidates(&blob_base, &blob_scheme, &signature, &blob_train, &craft_cfg, 5)
        .unwrap();
    assert_eq!(c1, c2);
    assert_eq!(
        design_scheme(&blob_base, &blob_train, 20, 9).unwrap(),
        blob_scheme
    );
    let t1 = train(&seed_model, &blob_train, &OptimizerConfig::sgd(0.1, 4, 3), None)
        .unwrap()
        .model;
    assert_eq!(t1.params, blob_base.params);

    // Extraction sees nothing but predicted labels: one key per bit drawn
    // from the candidates, scored live and against a recorded transcript.
    let mut chosen: Vec<Option<WMKey>> = vec![None; signature.len()];
    for key in &c1.keys {
        if chosen[key.bit_index].is_none() {
            chosen[key.bit_index] = Some(key.clone());
        }
    }
    let finals = WMKeySet {
        keys: chosen.into_iter().map(|k| k.unwrap()).collect(),
        signature: signature.clone(),
        stage: KeyStage::Final,
        oversample: c1.oversample,
        scheme_sha256: c1.scheme_sha256.clone(),
        attack: c1.attack.clone(),
        config_sha256: c1.config_sha256.clone(),
    };
    let images = finals.images_tensor().unwrap();
    let replay = ReplayOracle {
        answers: blob_base.predict_classes(&images).unwrap(),
        classes: blob_train.num_classes,
    };
    let live = extract(&blob_base, &finals, &blob_scheme, &signature, None).unwrap();
    let replayed = extract(&replay, &finals, &blob_scheme, &signature, None).unwrap();
    assert_eq!(live.recovered_bits, replayed.recovered_bits);
    assert_eq!(live.ber, replayed.ber);

    let elapsed = started.elapsed().as_secs_f64();
    let pass = verdict(
        8,
        "property suites",
        elapsed < 120.0,
        &format!("gradients, clustering, ber, decoding, bounds, reduction, determinism, purity in {elapsed:.1}s"),
    );
    assert!(pass, "property suites exceeded the two-minute budget");
}

#[test]
fn criterion_9_capacity_table_is_exact() {
    for (k, base, expected) in [
        (1usize, 2usize, 1.0f64),
        (8, 2, 8.0),
        (20, 2, 20.0),
        (30, 2, 30.0),
        (50, 2, 50.0),
        (20, 4, 40.0),
        (7, 8, 21.0),
        (10, 16, 40.0),
    ] {
        assert_eq!(entropy(k, base).unwrap(), expected, "entropy({k},{base})");
    }
    assert!(entropy(0, 2).is_err());
    assert!(entropy(5, 1).is_err());
    let pass = verdict(9, "capacity", true, "K*log2(B) exact on the pinned table");
    assert!(pass);
}

#[test]
fn criterion_10_overhead_ratio_stays_small() {
    let root = tempfile::tempdir().unwrap();
    let config: PipelineConfig = serde_json::from_value(serde_json::json!({
        "name": "overhead",
        "seed": 17,
        "dataset": {
            "kind": "blobs",
            "classes": 4,
            "per_class": 200,
            "dim": 8,
            "separation": 5.0,
            "test_per_class": 40
        },
        "hidden": [32],
        "optimizer": {"kind": "sgd", "learning_rate": 0.1, "epochs": 30, "batch_size": 32, "seed": 0},
        "signature": {"k": 6},
        "artifact_root": root.path().to_str().unwrap()
    }))
    .unwrap();
    let ctx = RunContext::load(config).unwrap();
    let report = cmd_overhead(&ctx, Some(200)).unwrap();
    assert_eq!(report.embed_epochs, 15);
    assert_eq!(report.scratch_epochs, 200);
    assert!(ctx.dir.join("overhead.json").is_file());
    let pass = verdict(
        10,
        "embedding overhead",
        report.ratio.is_finite() && report.ratio > 0.0 && report.ratio < 0.25,
        &format!(
            "embed {:.2}s vs scratch {:.2}s, ratio {:.4}",
            report.embed_seconds, report.scratch_train_seconds, report.ratio
        ),
    );
    assert!(pass, "embedding 15 epochs must cost well under training 200 from scratch");
}
