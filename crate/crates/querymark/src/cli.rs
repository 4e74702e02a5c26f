//! Command-line front end: one JSON config drives every stage, a master seed
//! derives all stage seeds, and each artifact is stamped with the config
//! checksum so stages refuse inputs produced under a different setup.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attacks::{
    adv_robustness, attack_finetune, attack_overwrite, attack_prune, build_zoo, integrity_suite,
    AttackOutcome, EvasionKind, OwnerEvidence, PruneConfig,
};
use crate::data::{load_idx, synth_blobs, Dataset, SplitTag};
use crate::embedding::{embed, EmbedConfig, EmbedOutcome};
use crate::encoding::{design_scheme, EncodingScheme, Signature};
use crate::error::{Error, Result};
use crate::extraction::{extract, EvalReport};
use crate::keygen::{filter_keys, generate_candidates, AttackConfig, KeyStage, WMKeySet};
use crate::rng::{derive_seed, sha256_hex};
use crate::tensor::{accuracy, train, ModelCheckpoint, NetworkTopology, OptimizerConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Directory holding MNIST-layout IDX files (train-images-idx3-ubyte and
    /// friends).
    Idx { dir: PathBuf },
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f32,
        test_per_class: usize,
    },
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Idx { dir } => {
                if dir.as_os_str().is_empty() {
                    return Err(Error::Config("dataset dir must not be empty".into()));
                }
            }
            DatasetSpec::Blobs {
                classes,
                per_class,
                dim,
                separation,
                test_per_class,
            } => {
                if *classes < 2 {
                    return Err(Error::Config("blobs need at least 2 classes".into()));
                }
                if *per_class == 0 || *test_per_class == 0 {
                    return Err(Error::Config("blob splits need at least 1 sample per class".into()));
                }
                if *dim == 0 {
                    return Err(Error::Config("blob dimension must be at least 1".into()));
                }
                if !(separation.is_finite() && *separation > 0.0) {
                    return Err(Error::Config(format!(
                        "blob separation must be positive, got {separation}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn load(&self, split: SplitTag, master_seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Idx { dir } => {
                let (images, labels) = match split {
                    SplitTag::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                    SplitTag::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
                };
                load_idx(&dir.join(images), &dir.join(labels), split)
            }
            DatasetSpec::Blobs {
                classes,
                per_class,
                dim,
                separation,
                test_per_class,
            } => {
                let (count, tag) = match split {
                    SplitTag::Train => (*per_class, "data-train"),
                    SplitTag::Test => (*test_per_class, "data-test"),
                };
                synth_blobs(
                    *classes,
                    count,
                    *dim,
                    *separation,
                    derive_seed(master_seed, tag),
                    split,
                )
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SignatureSpec {
    Explicit { bits: Vec<u8> },
    Random { k: usize },
}

impl SignatureSpec {
    fn validate(&self) -> Result<()> {
        match self {
            SignatureSpec::Explicit { bits } => {
                if bits.is_empty() {
                    return Err(Error::Config("signature bits must be non-empty".into()));
                }
                if bits.iter().any(|&b| b > 1) {
                    return Err(Error::Config("signature bits must be 0 or 1".into()));
                }
            }
            SignatureSpec::Random { k } => {
                if *k == 0 {
                    return Err(Error::Config("signature length k must be at least 1".into()));
                }
            }
        }
        Ok(())
    }

    fn resolve(&self, master_seed: u64) -> Result<Signature> {
        match self {
            SignatureSpec::Explicit { bits } => Signature::from_bits(bits.clone()),
            SignatureSpec::Random { k } => {
                Signature::random(*k, derive_seed(master_seed, "signature"))
            }
        }
    }
}

/// Embedding settings as written in the config file; the learning rate may
/// be omitted and defaults to a tenth of the base optimizer's.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSettings {
    pub lambda: Option<f32>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f32>,
    pub batch_size: Option<usize>,
    pub train_subset: Option<f64>,
    pub clean_per_key: Option<usize>,
}

impl EmbedSettings {
    fn resolve(&self, base: &OptimizerConfig, seed: u64) -> EmbedConfig {
        let mut cfg = EmbedConfig::new(
            self.learning_rate.unwrap_or(base.learning_rate / 10.0),
            seed,
        );
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        cfg.batch_size = self.batch_size.unwrap_or(base.batch_size);
        if let Some(v) = self.train_subset {
            cfg.train_subset = v;
        }
        if let Some(v) = self.clean_per_key {
            cfg.clean_per_key = v;
        }
        cfg
    }
}

fn default_artifact_root() -> PathBuf {
    PathBuf::from("run")
}

fn default_oversample() -> usize {
    crate::keygen::DEFAULT_OVERSAMPLE
}

fn default_scheme_per_class() -> usize {
    100
}

fn default_num_variants() -> usize {
    3
}

fn default_attack() -> AttackConfig {
    AttackConfig::with_seed(0)
}

/// The whole run in one document. Nested stage seeds are ignored; everything
/// is derived from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Hidden layer widths of the classifier.
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub embed: EmbedSettings,
    #[serde(default = "default_attack")]
    pub attack: AttackConfig,
    pub signature: SignatureSpec,
    #[serde(default = "default_artifact_root")]
    pub artifact_root: PathBuf,
    #[serde(default = "default_oversample")]
    pub oversample: usize,
    #[serde(default = "default_scheme_per_class")]
    pub scheme_per_class: usize,
    #[serde(default = "default_num_variants")]
    pub num_variants: usize,
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "run name must be a plain directory name, got {:?}",
                self.name
            )));
        }
        self.dataset.validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "hidden layer widths must be non-empty and positive".into(),
            ));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let embed_cfg = self.embed.resolve(&self.optimizer, 0);
        embed_cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        let mut attack = self.attack.clone();
        attack.seed = 0;
        attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.signature.validate()?;
        if self.oversample == 0 {
            return Err(Error::Config("oversample must be at least 1".into()));
        }
        if self.scheme_per_class == 0 {
            return Err(Error::Config("scheme_per_class must be at least 1".into()));
        }
        Ok(())
    }

    /// Checksum of the effective config (after flag overrides).
    pub fn sha256_hex(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

/// Loaded config plus datasets and the resolved artifact directory.
pub struct RunContext {
    pub config: PipelineConfig,
    pub config_sha: String,
    pub dir: PathBuf,
    pub train_data: Dataset,
    pub test_data: Dataset,
}

impl RunContext {
    pub fn load(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let config_sha = config.sha256_hex();
        let dir = config.artifact_root.join(&config.name);
        fs::create_dir_all(&dir)?;

        // A run directory belongs to exactly one config. Both sides go
        // through text so f32 fields compare at serialized precision.
        let echo_path = dir.join("config.json");
        let echo = serde_json::to_string_pretty(&config)?;
        if echo_path.exists() {
            let existing = fs::read_to_string(&echo_path)?;
            let same = serde_json::from_str::<serde_json::Value>(&existing)
                .map(|v| {
                    v == serde_json::from_str::<serde_json::Value>(&echo)
                        .expect("config round-trips")
                })
                .unwrap_or(false);
            if !same {
                return Err(Error::Config(format!(
                    "{} already holds a different config; pick another run name",
                    echo_path.display()
                )));
            }
        }
        fs::write(&echo_path, echo)?;

        let train_data = config.dataset.load(SplitTag::Train, config.seed)?;
        let test_data = config.dataset.load(SplitTag::Test, config.seed)?;
        Ok(RunContext {
            config,
            config_sha,
            dir,
            train_data,
            test_data,
        })
    }

    pub fn topology(&self) -> NetworkTopology {
        NetworkTopology::mlp(
            self.train_data.feature_dim(),
            &self.config.hidden,
            self.train_data.num_classes,
        )
    }

    pub fn signature(&self) -> Result<Signature> {
        self.config.signature.resolve(self.config.seed)
    }

    pub fn seed(&self, tag: &str) -> u64 {
        derive_seed(self.config.seed, tag)
    }

    pub fn baseline_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            seed: self.seed("baseline"),
            ..self.config.optimizer.clone()
        }
    }

    pub fn embed_config(&self) -> EmbedConfig {
        self.config
            .embed
            .resolve(&self.config.optimizer, self.seed("embed"))
    }

    fn keygen_attack(&self) -> AttackConfig {
        AttackConfig {
            seed: self.seed("keygen"),
            ..self.config.attack.clone()
        }
    }

    fn variant_optimizer(&self) -> OptimizerConfig {
        let mut cfg = OptimizerConfig::sgd(self.embed_config().learning_rate, 5, 0);
        cfg.batch_size = self.config.optimizer.batch_size;
        cfg
    }

    fn missing(kind: &str, path: &Path, e: Error) -> Error {
        match e {
            Error::Io(inner) if inner.kind() == std::io::ErrorKind::NotFound => Error::Config(
                format!("no {kind} at {}; run the earlier stages first", path.display()),
            ),
            other => other,
        }
    }

    fn checked_checkpoint(&self, dir: &Path) -> Result<ModelCheckpoint> {
        let model =
            ModelCheckpoint::load_dir(dir).map_err(|e| Self::missing("checkpoint", dir, e))?;
        match &model.config_sha256 {
            Some(sha) if *sha == self.config_sha => Ok(model),
            Some(_) => Err(Error::Config(format!(
                "{} was produced under a different config",
                dir.display()
            ))),
            None => Err(Error::Config(format!(
                "{} lacks a config checksum; refusing to mix artifacts",
                dir.display()
            ))),
        }
    }

    pub fn load_baseline(&self) -> Result<ModelCheckpoint> {
        self.checked_checkpoint(&self.dir.join("baseline"))
    }

    pub fn load_marked(&self) -> Result<ModelCheckpoint> {
        self.checked_checkpoint(&self.dir.join("marked"))
    }

    pub fn load_scheme(&self) -> Result<EncodingScheme> {
        let path = self.dir.join("scheme.json");
        let scheme =
            EncodingScheme::load_json(&path).map_err(|e| Self::missing("scheme", &path, e))?;
        match &scheme.config_sha256 {
            Some(sha) if *sha == self.config_sha => Ok(scheme),
            _ => Err(Error::Config(format!(
                "{} was produced under a different config",
                path.display()
            ))),
        }
    }

    fn checked_keys(&self, dir: &Path, stage: KeyStage) -> Result<WMKeySet> {
        let keys = WMKeySet::load_dir(dir).map_err(|e| Self::missing("key set", dir, e))?;
        if keys.stage != stage {
            return Err(Error::Config(format!(
                "{} holds the wrong key stage",
                dir.display()
            )));
        }
        match &keys.config_sha256 {
            Some(sha) if *sha == self.config_sha => Ok(keys),
            _ => Err(Error::Config(format!(
                "{} was produced under a different config",
                dir.display()
            ))),
        }
    }

    pub fn load_candidates(&self) -> Result<WMKeySet> {
        self.checked_keys(&self.dir.join("candidates"), KeyStage::Candidate)
    }

    pub fn load_final_keys(&self) -> Result<WMKeySet> {
        self.checked_keys(&self.dir.join("keys"), KeyStage::Final)
    }

    pub fn evidence_parts(&self) -> Result<(WMKeySet, EncodingScheme, Signature)> {
        Ok((self.load_final_keys()?, self.load_scheme()?, self.signature()?))
    }
}

/// Trains the baseline classifier and stores it under `baseline/`.
pub fn cmd_train(ctx: &RunContext) -> Result<()> {
    let init = ModelCheckpoint::init_he_uniform(ctx.topology(), ctx.seed("init"))?;
    let outcome = train(&init, &ctx.train_data, &ctx.baseline_optimizer(), None)?;
    let mut model = outcome.model;
    model.config_sha256 = Some(ctx.config_sha.clone());
    model.save_dir(&ctx.dir.join("baseline"))?;
    let acc = accuracy(&model, &ctx.test_data.images, &ctx.test_data.labels)?;
    println!(
        "baseline: trained {} epochs in {:.2}s, test accuracy {:.4}",
        ctx.config.optimizer.epochs, outcome.seconds, acc
    );
    Ok(())
}

/// Derives the class-to-bit encoding scheme from the baseline's activations.
pub fn cmd_scheme(ctx: &RunContext) -> Result<()> {
    let model = ctx.load_baseline()?;
    let mut scheme = design_scheme(
        &model,
        &ctx.train_data,
        ctx.config.scheme_per_class.min(ctx.train_data.len()),
        ctx.seed("scheme"),
    )?;
    scheme.config_sha256 = Some(ctx.config_sha.clone());
    scheme.save_json(&ctx.dir.join("scheme.json"))?;
    println!(
        "scheme: classes {:?} carry bit 0, {:?} carry bit 1",
        scheme.classes_with_bit(0),
        scheme.classes_with_bit(1)
    );
    Ok(())
}

/// Crafts candidate keys; with `filter`, selects the final per-bit keys using
/// the marked model instead.
pub fn cmd_keygen(ctx: &RunContext, filter: bool) -> Result<()> {
    if filter {
        let candidates = ctx.load_candidates()?;
        let marked = ctx.load_marked()?;
        let baseline = ctx.load_baseline()?;
        let (mut keys, result) = filter_keys(
            &candidates,
            &marked,
            &baseline,
            &ctx.train_data,
            ctx.config.num_variants,
            &ctx.variant_optimizer(),
            ctx.seed("filter"),
        )?;
        keys.config_sha256 = Some(ctx.config_sha.clone());
        keys.save_dir(&ctx.dir.join("keys"))?;
        println!(
            "filter: {} of {} candidates survive ({} verified on marked, {} fooled all unmarked variants)",
            result.survivors.len(),
            candidates.len(),
            result.marked_correct.len(),
            result.commonly_misclassified.len()
        );
        return Ok(());
    }

    let model = ctx.load_baseline()?;
    let scheme = ctx.load_scheme()?;
    let signature = ctx.signature()?;
    let mut candidates = generate_candidates(
        &model,
        &scheme,
        &signature,
        &ctx.train_data,
        &ctx.keygen_attack(),
        ctx.config.oversample,
    )?;
    candidates.config_sha256 = Some(ctx.config_sha.clone());
    candidates.save_dir(&ctx.dir.join("candidates"))?;
    println!(
        "keygen: {} candidates for a {}-bit signature",
        candidates.len(),
        signature.len()
    );
    Ok(())
}

/// Embeds the candidate keys into the baseline, storing the marked model and
/// the per-epoch report.
pub fn cmd_embed(ctx: &RunContext) -> Result<EmbedOutcome> {
    let baseline = ctx.load_baseline()?;
    let scheme = ctx.load_scheme()?;
    let candidates = ctx.load_candidates()?;
    let mut outcome = embed(
        &baseline,
        &ctx.train_data,
        Some(&ctx.test_data),
        Some(&candidates),
        &scheme,
        &ctx.embed_config(),
    )?;
    outcome.model.config_sha256 = Some(ctx.config_sha.clone());
    outcome.model.save_dir(&ctx.dir.join("marked"))?;
    outcome.report.config_sha256 = Some(ctx.config_sha.clone());
    outcome.report.save_json(&ctx.dir.join("embed_report.json"))?;
    let last = outcome.report.epochs.last().expect("at least one epoch");
    println!(
        "embed: {:.2}s, final candidate hamming {}/{}, test accuracy {:.4}",
        outcome.report.seconds,
        last.hamming,
        outcome.report.num_keys,
        last.test_accuracy.unwrap_or(f64::NAN)
    );
    Ok(outcome)
}

/// Queries a model with the final keys and scores the recovered signature.
/// Returns the process exit code: 0 on detection, 1 otherwise.
pub fn cmd_extract(ctx: &RunContext, model_dir: Option<&Path>) -> Result<i32> {
    let model = match model_dir {
        Some(dir) => ctx.checked_checkpoint(dir)?,
        None => ctx.load_marked()?,
    };
    let (keys, scheme, signature) = ctx.evidence_parts()?;
    let mut report = extract(&model, &keys, &scheme, &signature, Some(&ctx.test_data))?;
    report.config_sha256 = Some(ctx.config_sha.clone());
    report.save_json(&ctx.dir.join("extract_report.json"))?;
    println!(
        "extract: ber {:.4}, detection {}, {} queries, test accuracy {:.4}",
        report.ber,
        report.detection,
        report.query_count,
        report.test_accuracy.unwrap_or(f64::NAN)
    );
    Ok(if report.detection { 0 } else { 1 })
}

const PIPELINE_STAGES: &[&str] = &[
    "train",
    "scheme",
    "keygen",
    "embed",
    "filter",
    "extract",
];

/// Runs every stage in order, failing fast with the stage name. Exit code 0
/// means the recovered signature matched exactly.
pub fn cmd_pipeline(ctx: &RunContext) -> Result<i32> {
    for &stage in PIPELINE_STAGES {
        let result: Result<Option<i32>> = (|| match stage {
            "train" => cmd_train(ctx).map(|()| None),
            "scheme" => cmd_scheme(ctx).map(|()| None),
            "keygen" => cmd_keygen(ctx, false).map(|()| None),
            "embed" => cmd_embed(ctx).map(|_| None),
            "filter" => cmd_keygen(ctx, true).map(|()| None),
            "extract" => cmd_extract(ctx, None).map(Some),
            other => unreachable!("unknown stage {other}"),
        })();
        match result {
            Ok(Some(code)) => return Ok(code),
            Ok(None) => {}
            Err(e) => {
                eprintln!("pipeline stage '{stage}' failed");
                return Err(e);
            }
        }
    }
    unreachable!("extract is the last stage")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OverheadReport {
    pub embed_seconds: f64,
    pub scratch_train_seconds: f64,
    /// embed_seconds / scratch_train_seconds.
    pub ratio: f64,
    pub embed_epochs: usize,
    pub scratch_epochs: usize,
    pub config_sha256: String,
}

/// Times embedding against training from scratch and reports the ratio.
pub fn cmd_overhead(ctx: &RunContext, scratch_epochs: Option<usize>) -> Result<OverheadReport> {
    // Make sure the prerequisites exist; reuse them when they do.
    if ctx.load_baseline().is_err() {
        cmd_train(ctx)?;
    }
    if ctx.load_scheme().is_err() {
        cmd_scheme(ctx)?;
    }
    if ctx.load_candidates().is_err() {
        cmd_keygen(ctx, false)?;
    }
    let baseline = ctx.load_baseline()?;
    let scheme = ctx.load_scheme()?;
    let candidates = ctx.load_candidates()?;

    let embed_cfg = ctx.embed_config();
    let outcome = embed(
        &baseline,
        &ctx.train_data,
        None,
        Some(&candidates),
        &scheme,
        &embed_cfg,
    )?;
    let embed_seconds = outcome.report.seconds;

    let scratch_epochs = scratch_epochs.unwrap_or(ctx.config.optimizer.epochs);
    let scratch_cfg = OptimizerConfig {
        epochs: scratch_epochs,
        seed: ctx.seed("scratch"),
        ..ctx.config.optimizer.clone()
    };
    let init = ModelCheckpoint::init_he_uniform(ctx.topology(), ctx.seed("scratch-init"))?;
    let start = Instant::now();
    train(&init, &ctx.train_data, &scratch_cfg, None)?;
    let scratch_train_seconds = start.elapsed().as_secs_f64();

    let report = OverheadReport {
        embed_seconds,
        scratch_train_seconds,
        ratio: embed_seconds / scratch_train_seconds,
        embed_epochs: embed_cfg.epochs,
        scratch_epochs,
        config_sha256: ctx.config_sha.clone(),
    };
    fs::write(
        ctx.dir.join("overhead.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "overhead: embed {:.2}s / scratch {:.2}s = ratio {:.4}",
        report.embed_seconds, report.scratch_train_seconds, report.ratio
    );
    Ok(report)
}

#[derive(Debug, Serialize)]
struct IntegrityReport<'a> {
    reports: &'a [EvalReport],
    violations: &'a [usize],
    config_sha256: &'a str,
}

/// Verifies the owner's keys against a zoo of independently trained models;
/// exit code 0 means no false positives.
pub fn cmd_integrity(ctx: &RunContext) -> Result<i32> {
    let (keys, scheme, signature) = ctx.evidence_parts()?;
    let evidence = OwnerEvidence {
        keys: &keys,
        scheme: &scheme,
        signature: &signature,
    };
    let zoo = build_zoo(
        &ctx.train_data,
        &ctx.topology(),
        &ctx.baseline_optimizer(),
        ctx.seed("zoo"),
    )?;
    let outcome = integrity_suite(&evidence, &zoo)?;
    fs::write(
        ctx.dir.join("integrity_report.json"),
        serde_json::to_string_pretty(&IntegrityReport {
            reports: &outcome.reports,
            violations: &outcome.violations,
            config_sha256: &ctx.config_sha,
        })?,
    )?;
    let min_ber = outcome
        .reports
        .iter()
        .map(|r| r.ber)
        .fold(f64::INFINITY, f64::min);
    println!(
        "integrity: {} models, min ber {:.4}, violations {:?}",
        outcome.reports.len(),
        min_ber,
        outcome.violations
    );
    Ok(if outcome.violations.is_empty() { 0 } else { 1 })
}

#[derive(Debug, Serialize)]
struct AttackEntry {
    descriptor: String,
    test_accuracy: f64,
    ber: f64,
    detection: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attacker_ber: Option<f64>,
}

fn entry_from(outcome: &AttackOutcome, warnings: Vec<String>) -> AttackEntry {
    AttackEntry {
        descriptor: outcome.descriptor.clone(),
        test_accuracy: outcome.test_accuracy,
        ber: outcome.report.ber,
        detection: outcome.report.detection,
        warnings,
        attacker_ber: None,
    }
}

#[derive(Debug, Serialize)]
struct AttackReport<'a> {
    entries: &'a [AttackEntry],
    config_sha256: &'a str,
}

fn write_attack_artifacts(ctx: &RunContext, entries: &[AttackEntry], sweep_param: &str) -> Result<()> {
    fs::write(
        ctx.dir.join("attack_report.json"),
        serde_json::to_string_pretty(&AttackReport {
            entries,
            config_sha256: &ctx.config_sha,
        })?,
    )?;
    let mut csv = String::from("descriptor,param,test_accuracy,ber,detection\n");
    for e in entries {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.descriptor.replace(',', ";"),
            sweep_param,
            e.test_accuracy,
            e.ber,
            e.detection as u8
        ));
    }
    fs::write(ctx.dir.join("sweep.csv"), csv)?;
    Ok(())
}

fn parse_sweep<T: std::str::FromStr>(raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Argument(format!("bad sweep value {s:?}")))
        })
        .collect()
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Fine-tuning epochs, or a comma list to sweep.
    #[arg(long, default_value = "20")]
    pub epochs: String,
    #[arg(long)]
    pub learning_rate: Option<f32>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    /// Fraction of weights to zero, or a comma list to sweep.
    #[arg(long, default_value = "0.5")]
    pub alpha: String,
    /// Pool weights across layers instead of per layer.
    #[arg(long)]
    pub global: bool,
    #[arg(long, default_value_t = 5)]
    pub finetune_epochs: usize,
    #[arg(long)]
    pub finetune_learning_rate: Option<f32>,
}

#[derive(Debug, Args)]
pub struct OverwriteArgs {
    /// Attacker signature length.
    #[arg(long, default_value_t = 20)]
    pub attacker_k: usize,
    /// Attacker master seed; defaults to a value derived from the owner seed
    /// tagged "attacker".
    #[arg(long)]
    pub attacker_seed: Option<u64>,
    /// Epochs of the attacker's embedding pass. The attacker knows the
    /// published method, not the owner's tuning, so this defaults to the
    /// method's stock budget rather than the run config's.
    #[arg(long, default_value_t = 15)]
    pub embed_epochs: usize,
    /// Learning rate of the attacker's embedding pass; defaults to a tenth
    /// of the base training rate, same as the fine-tune attack.
    #[arg(long)]
    pub embed_learning_rate: Option<f32>,
    /// Signature-loss weight of the attacker's embedding pass.
    #[arg(long, default_value_t = 0.5)]
    pub embed_lambda: f32,
}

#[derive(Debug, Subcommand)]
pub enum AttackCmd {
    /// Retrain the marked model on clean data.
    Finetune(FinetuneArgs),
    /// Magnitude-prune weights, then sparse fine-tune.
    Prune(PruneArgs),
    /// Embed a second signature with attacker secrets.
    Overwrite(OverwriteArgs),
}

/// Runs a removal attack and reports the owner's verification on the result.
/// Exit code 0 means the mark survived every swept setting.
pub fn cmd_attack(ctx: &RunContext, cmd: &AttackCmd) -> Result<i32> {
    let marked = ctx.load_marked()?;
    let (keys, scheme, signature) = ctx.evidence_parts()?;
    let evidence = OwnerEvidence {
        keys: &keys,
        scheme: &scheme,
        signature: &signature,
    };
    let mut entries = Vec::new();
    let sweep_param;

    match cmd {
        AttackCmd::Finetune(args) => {
            sweep_param = "epochs";
            let lr = args
                .learning_rate
                .unwrap_or(ctx.config.optimizer.learning_rate / 10.0);
            for epochs in parse_sweep::<usize>(&args.epochs)? {
                let outcome = attack_finetune(
                    &marked,
                    &ctx.train_data,
                    &ctx.test_data,
                    &evidence,
                    epochs,
                    lr,
                    ctx.seed(&format!("attack-finetune-{epochs}")),
                )?;
                println!(
                    "attack {}: ber {:.4}, test accuracy {:.4}",
                    outcome.descriptor, outcome.report.ber, outcome.test_accuracy
                );
                entries.push(entry_from(&outcome, Vec::new()));
            }
        }
        AttackCmd::Prune(args) => {
            sweep_param = "alpha";
            let lr = args
                .finetune_learning_rate
                .unwrap_or(ctx.config.optimizer.learning_rate / 10.0);
            for alpha in parse_sweep::<f64>(&args.alpha)? {
                let cfg = PruneConfig {
                    alpha,
                    global: args.global,
                    finetune_epochs: args.finetune_epochs,
                    finetune_learning_rate: lr,
                    seed: ctx.seed(&format!("attack-prune-{alpha}")),
                };
                let (outcome, warnings) =
                    attack_prune(&marked, &ctx.train_data, &ctx.test_data, &evidence, &cfg)?;
                println!(
                    "attack {}: ber {:.4}, test accuracy {:.4}",
                    outcome.descriptor, outcome.report.ber, outcome.test_accuracy
                );
                entries.push(entry_from(&outcome, warnings));
            }
        }
        AttackCmd::Overwrite(args) => {
            sweep_param = "attacker_k";
            let attacker_seed = args
                .attacker_seed
                .unwrap_or_else(|| ctx.seed("attacker"));
            let mut attacker_embed = ctx.embed_config();
            attacker_embed.epochs = args.embed_epochs;
            attacker_embed.learning_rate = args
                .embed_learning_rate
                .unwrap_or(ctx.config.optimizer.learning_rate / 10.0);
            attacker_embed.lambda = args.embed_lambda;
            let outcome = attack_overwrite(
                &marked,
                &ctx.train_data,
                &ctx.test_data,
                &evidence,
                args.attacker_k,
                &attacker_embed,
                ctx.config.oversample,
                attacker_seed,
            )?;
            println!(
                "attack {}: owner ber {:.4}, attacker ber {:.4}, test accuracy {:.4}",
                outcome.owner.descriptor,
                outcome.owner.report.ber,
                outcome.attacker_report.ber,
                outcome.owner.test_accuracy
            );
            let mut entry = entry_from(&outcome.owner, Vec::new());
            entry.attacker_ber = Some(outcome.attacker_report.ber);
            entries.push(entry);
        }
    }

    write_attack_artifacts(ctx, &entries, sweep_param)?;
    Ok(if entries.iter().all(|e| e.detection) { 0 } else { 1 })
}

#[derive(Debug, Args)]
pub struct EvasionArgs {
    /// Which evasion to measure: fgsm_untargeted or mim_targeted.
    #[arg(long, default_value = "mim_targeted")]
    pub kind: String,
    #[arg(long, default_value_t = 0.2)]
    pub epsilon: f32,
    /// Evaluate on at most this many samples per class.
    #[arg(long)]
    pub per_class: Option<usize>,
}

/// Compares marked vs baseline accuracy under input evasion.
pub fn cmd_evasion(ctx: &RunContext, args: &EvasionArgs) -> Result<()> {
    let kind = match args.kind.as_str() {
        "fgsm_untargeted" => EvasionKind::FgsmUntargeted,
        "mim_targeted" => EvasionKind::MimTargeted,
        other => {
            return Err(Error::Argument(format!(
                "unknown evasion kind {other:?}; expected fgsm_untargeted or mim_targeted"
            )))
        }
    };
    let data_storage;
    let data = match args.per_class {
        Some(n) => {
            data_storage =
                crate::data::stratified_sample(&ctx.test_data, n, ctx.seed("evasion-sample"))?;
            &data_storage
        }
        None => &ctx.test_data,
    };
    let cfg = AttackConfig {
        epsilon: args.epsilon,
        ..AttackConfig::with_seed(ctx.seed("evasion"))
    };
    let baseline = ctx.load_baseline()?;
    let marked = ctx.load_marked()?;
    let base_report = adv_robustness(&baseline, data, kind, &cfg)?;
    let marked_report = adv_robustness(&marked, data, kind, &cfg)?;
    println!(
        "evasion {:?} eps {}: baseline {:.4} -> {:.4}, marked {:.4} -> {:.4}",
        args.kind,
        args.epsilon,
        base_report.clean_accuracy,
        base_report.adversarial_accuracy,
        marked_report.clean_accuracy,
        marked_report.adversarial_accuracy
    );
    #[derive(Serialize)]
    struct EvasionArtifact<'a> {
        baseline: &'a crate::attacks::EvasionReport,
        marked: &'a crate::attacks::EvasionReport,
        config_sha256: &'a str,
    }
    fs::write(
        ctx.dir.join("evasion_report.json"),
        serde_json::to_string_pretty(&EvasionArtifact {
            baseline: &base_report,
            marked: &marked_report,
            config_sha256: &ctx.config_sha,
        })?,
    )?;
    Ok(())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the baseline classifier.
    Train,
    /// Derive the class-to-bit encoding scheme.
    Scheme,
    /// Craft candidate keys (or, with --filter, pick the final keys).
    Keygen {
        #[arg(long)]
        filter: bool,
    },
    /// Embed the signature into the baseline.
    Embed,
    /// Recover the signature from a model's predictions.
    Extract {
        /// Checkpoint directory to query; defaults to marked/.
        #[arg(long)]
        model_dir: Option<PathBuf>,
    },
    /// Removal attacks scored with the owner's keys.
    Attack {
        #[command(subcommand)]
        cmd: AttackCmd,
    },
    /// False-positive check across independently trained models.
    Integrity,
    /// Input-evasion comparison between baseline and marked models.
    Evasion(EvasionArgs),
    /// Wall-clock cost of embedding relative to training from scratch.
    Overhead {
        #[arg(long)]
        scratch_epochs: Option<usize>,
    },
    /// All stages end to end.
    Pipeline,
}

#[derive(Debug, Parser)]
#[command(name = "querymark", version, about = "Behavioral watermarking for small classifiers")]
pub struct Cli {
    /// Path to the run's JSON config.
    #[arg(long, global = true, default_value = "querymark.json")]
    pub config: PathBuf,
    /// Override the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the run name.
    #[arg(long, global = true)]
    pub name: Option<String>,
    /// Override the artifact root directory.
    #[arg(long, global = true)]
    pub artifact_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Loads the config, applies flag overrides, and dispatches. Returns the
/// process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let mut config = PipelineConfig::from_file(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(name) = &cli.name {
        config.name = name.clone();
    }
    if let Some(root) = &cli.artifact_root {
        config.artifact_root = root.clone();
    }
    let ctx = RunContext::load(config)?;

    match &cli.command {
        Command::Train => cmd_train(&ctx).map(|()| 0),
        Command::Scheme => cmd_scheme(&ctx).map(|()| 0),
        Command::Keygen { filter } => cmd_keygen(&ctx, *filter).map(|()| 0),
        Command::Embed => cmd_embed(&ctx).map(|_| 0),
        Command::Extract { model_dir } => cmd_extract(&ctx, model_dir.as_deref()),
        Command::Attack { cmd } => cmd_attack(&ctx, cmd),
        Command::Integrity => cmd_integrity(&ctx),
        Command::Evasion(args) => cmd_evasion(&ctx, args).map(|()| 0),
        Command::Overhead { scratch_epochs } => {
            cmd_overhead(&ctx, *scratch_epochs).map(|_| 0)
        }
        Command::Pipeline => cmd_pipeline(&ctx),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_config(dir: &Path) -> PipelineConfig {
        serde_json::from_value(serde_json::json!({
            "name": "t",
            "seed": 7,
            "dataset": {
                "kind": "blobs",
                "classes": 4,
                "per_class": 40,
                "dim": 6,
                "separation": 5.0,
                "test_per_class": 10
            },
            "hidden": [16],
            "optimizer": {"kind": "sgd", "learning_rate": 0.1, "epochs": 4, "batch_size": 32, "seed": 0},
            "signature": {"k": 4},
            "artifact_root": dir.to_str().unwrap()
        }))
        .unwrap()
    }

    #[test]
    fn config_defaults_and_checksum_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = blob_config(dir.path());
        cfg.validate().unwrap();
        assert_eq!(cfg.oversample, 10);
        assert_eq!(cfg.scheme_per_class, 100);
        assert_eq!(cfg.num_variants, 3);
        assert_eq!(cfg.sha256_hex(), cfg.clone().sha256_hex());
        // The embedding rate defaults to a tenth of the base rate.
        let embed = cfg.embed.resolve(&cfg.optimizer, 1);
        assert!((embed.learning_rate - 0.01).abs() < 1e-9);
        assert_eq!(embed.epochs, 15);
        assert!((embed.lambda - 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_length_signatures_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blob_config(dir.path());
        cfg.signature = SignatureSpec::Random { k: 0 };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.signature = SignatureSpec::Explicit { bits: vec![0, 2] };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let raw = r#"{"name":"x","seed":1,"dataset":{"kind":"blobs","classes":2,"per_class":4,"dim":2,"separation":3.0,"test_per_class":2},"hidden":[4],"optimizer":{"kind":"sgd","learning_rate":0.1,"epochs":1,"batch_size":4,"seed":0},"signature":{"k":2},"surprise":true}"#;
        assert!(serde_json::from_str::<PipelineConfig>(raw).is_err());
    }

    #[test]
    fn explicit_signature_bits_resolve_verbatim() {
        let spec = SignatureSpec::Explicit {
            bits: vec![1, 0, 1],
        };
        assert_eq!(spec.resolve(99).unwrap().bits, vec![1, 0, 1]);
        let random = SignatureSpec::Random { k: 8 };
        let a = random.resolve(42).unwrap();
        let b = random.resolve(42).unwrap();
        assert_eq!(a.bits, b.bits);
        assert_ne!(a.bits, random.resolve(43).unwrap().bits);
    }

    #[test]
    fn run_directory_refuses_a_second_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = blob_config(dir.path());
        let ctx = RunContext::load(cfg.clone()).unwrap();
        drop(ctx);
        let mut other = cfg;
        other.seed = 8;
        match RunContext::load(other) {
            Err(Error::Config(msg)) => assert!(msg.contains("different config")),
            Err(other) => panic!("expected config error, got {other:?}"),
            Ok(_) => panic!("expected config error, got a context"),
        }
    }

    #[test]
    fn stage_seeds_differ_by_tag_and_follow_the_master_seed() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::load(blob_config(dir.path())).unwrap();
        assert_ne!(ctx.seed("baseline"), ctx.seed("scheme"));
        assert_ne!(ctx.seed("baseline"), ctx.seed("embed"));
        let dir2 = tempfile::tempdir().unwrap();
        let mut cfg2 = blob_config(dir2.path());
        cfg2.seed = 8;
        let ctx2 = RunContext::load(cfg2).unwrap();
        assert_ne!(ctx.seed("baseline"), ctx2.seed("baseline"));
    }

    #[test]
    fn missing_artifacts_surface_as_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::load(blob_config(dir.path())).unwrap();
        assert!(ctx.load_baseline().is_err());
        assert!(ctx.load_scheme().is_err());
        assert!(ctx.load_candidates().is_err());
    }

    #[test]
    fn artifacts_from_another_config_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::load(blob_config(dir.path())).unwrap();
        cmd_train(&ctx).unwrap();
        // Same run directory, different master seed: artifacts must not mix.
        let dir2 = tempfile::tempdir().unwrap();
        let mut cfg2 = blob_config(dir2.path());
        cfg2.seed = 1234;
        let ctx2 = RunContext::load(cfg2).unwrap();
        fs::create_dir_all(ctx2.dir.join("baseline")).unwrap();
        for f in ["topology.json", "weights.bin"] {
            fs::copy(ctx.dir.join("baseline").join(f), ctx2.dir.join("baseline").join(f)).unwrap();
        }
        match ctx2.load_baseline() {
            Err(Error::Config(msg)) => assert!(msg.contains("different config")),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
