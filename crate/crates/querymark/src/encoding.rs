//! Encoding scheme: the class-to-bit table built by 2-means clustering of
//! per-class mean output activations, plus signature plumbing and capacity.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stratified_sample, Dataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, sha256_hex};
use crate::tensor::{argmax_row, forward, ModelCheckpoint, Tensor};

/// Signatures are binary throughout the pipeline.
pub const SCHEME_BASE: usize = 2;

/// Restarts per kmeans call; the best inertia wins. Enough that tiny inputs
/// (the per-class mean points) reliably reach the global optimum.
const KMEANS_RESTARTS: usize = 16;

const SCHEME_RETRIES: usize = 10;

/// The owner's K-bit signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub bits: Vec<u8>,
    /// Seed it was drawn from, when auto-generated.
    pub seed: Option<u64>,
}

impl Signature {
    pub fn random(k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Argument("signature length must be at least 1".into()));
        }
        let mut rng = rng_from(seed);
        let bits = (0..k).map(|_| rng.random_range(0..2u8)).collect();
        Ok(Signature {
            bits,
            seed: Some(seed),
        })
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Argument("signature must be non-empty".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Argument("signature bits must be 0 or 1".into()));
        }
        Ok(Signature { bits, seed: None })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeProvenance {
    pub model_sha256: String,
    pub per_class: usize,
    pub seed: u64,
}

/// Class-to-bit mapping derived from a specific model's activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingScheme {
    pub num_classes: usize,
    pub base: usize,
    pub class_to_bit: Vec<u8>,
    /// Cluster centers in activation space, indexed by bit.
    pub centroids: Vec<Vec<f32>>,
    pub provenance: SchemeProvenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
}

impl EncodingScheme {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Scheme("num_classes must be at least 2".into()));
        }
        if self.base < 2 {
            return Err(Error::Scheme("base must be at least 2".into()));
        }
        if self.class_to_bit.len() != self.num_classes {
            return Err(Error::Scheme(format!(
                "class_to_bit covers {} classes, expected {}",
                self.class_to_bit.len(),
                self.num_classes
            )));
        }
        if self.centroids.len() != self.base {
            return Err(Error::Scheme(format!(
                "{} centroids for base {}",
                self.centroids.len(),
                self.base
            )));
        }
        for c in &self.centroids {
            if c.len() != self.num_classes || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Scheme("centroids must be finite C-vectors".into()));
            }
        }
        for bit in 0..self.base as u8 {
            if !self.class_to_bit.contains(&bit) {
                return Err(Error::Scheme(format!("cluster {bit} is empty")));
            }
        }
        if self.class_to_bit.iter().any(|&b| b as usize >= self.base) {
            return Err(Error::Scheme("class_to_bit value outside base".into()));
        }
        Ok(())
    }

    pub fn classes_with_bit(&self, bit: u8) -> Vec<usize> {
        self.class_to_bit
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == bit)
            .map(|(c, _)| c)
            .collect()
    }

    /// Content hash of the scheme itself (config hash excluded).
    pub fn sha256_hex(&self) -> String {
        let mut stripped = self.clone();
        stripped.config_sha256 = None;
        sha256_hex(&serde_json::to_vec(&stripped).expect("scheme serializes"))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let scheme: EncodingScheme = serde_json::from_str(&text).map_err(|e| Error::Format {
            file: path.display().to_string(),
            msg: e.to_string(),
        })?;
        scheme.validate()?;
        Ok(scheme)
    }
}

#[derive(Debug, Clone)]
pub struct KmeansOutcome {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f32>>,
    pub inertia: f64,
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step; never increases.
    pub inertia_trace: Vec<f64>,
}

fn dist2(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &c)| (x as f64 - c) * (x as f64 - c))
        .sum()
}

fn assign(points: &[Vec<f32>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut assignments = Vec::with_capacity(points.len());
    let mut inertia = 0.0f64;
    for p in points {
        let mut best = 0usize;
        let mut best_d = dist2(p, &centroids[0]);
        for (j, c) in centroids.iter().enumerate().skip(1) {
            let d = dist2(p, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        assignments.push(best);
        inertia += best_d;
    }
    (assignments, inertia)
}

fn kmeanspp_init(points: &[Vec<f32>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..points.len());
    centroids.push(points[first].iter().map(|&v| v as f64).collect());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| dist2(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            // All points already covered by a centroid; any pick is as good.
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].iter().map(|&v| v as f64).collect());
    }
    centroids
}

fn lloyd_once(
    points: &[Vec<f32>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> KmeansOutcome {
    let dim = points[0].len();
    let mut rng = rng_from(seed);
    let mut centroids = kmeanspp_init(points, k, &mut rng);
    let mut trace = Vec::new();
    let mut iterations = 0usize;
    for _ in 0..max_iter {
        iterations += 1;
        let (assignments, inertia) = assign(points, &centroids);
        trace.push(inertia);
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p) {
                *s += v as f64;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                // Empty cluster keeps its previous position.
                continue;
            }
            let mut moved = 0.0f64;
            for (c, s) in centroids[j].iter_mut().zip(&sums[j]) {
                let next = s / counts[j] as f64;
                moved += (next - *c) * (next - *c);
                *c = next;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < tol {
            break;
        }
    }
    // Final assignments are consistent with the final centroids.
    let (assignments, inertia) = assign(points, &centroids);
    trace.push(inertia);
    KmeansOutcome {
        assignments,
        centroids: centroids
            .into_iter()
            .map(|c| c.into_iter().map(|v| v as f32).collect())
            .collect(),
        inertia,
        iterations,
        inertia_trace: trace,
    }
}

/// Lloyd's algorithm with k-means++ seeding, restarted internally; the run
/// with the lowest inertia wins. Assignment ties go to the lowest cluster
/// index.
pub fn kmeans(
    points: &[Vec<f32>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KmeansOutcome> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if k > points.len() {
        return Err(Error::Argument(format!(
            "k={k} exceeds {} points",
            points.len()
        )));
    }
    if max_iter == 0 {
        return Err(Error::Argument("max_iter must be at least 1".into()));
    }
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Error::Argument(format!("tol must be finite and >= 0, got {tol}")));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimension("points must share a positive dimension".into()));
    }
    if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric {
            layer: 0,
            msg: "non-finite clustering input".into(),
        });
    }
    let mut best: Option<KmeansOutcome> = None;
    for restart in 0..KMEANS_RESTARTS {
        let out = lloyd_once(
            points,
            k,
            derive_seed(seed, &format!("restart-{restart}")),
            max_iter,
            tol,
        );
        if best.as_ref().is_none_or(|b| out.inertia < b.inertia) {
            best = Some(out);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Mean pre-softmax activation per class over a stratified subset.
fn class_mean_activations(
    model: &ModelCheckpoint,
    train_data: &Dataset,
    per_class: usize,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    let subset = stratified_sample(train_data, per_class, derive_seed(seed, "scheme-subset"))?;
    let logits = forward(model, &subset.images)?;
    let c = train_data.num_classes;
    let mut sums = vec![vec![0.0f64; logits.cols()]; c];
    let mut counts = vec![0usize; c];
    for (r, &label) in subset.labels.iter().enumerate() {
        counts[label] += 1;
        for (s, &v) in sums[label].iter_mut().zip(logits.row(r)) {
            *s += v as f64;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| s.into_iter().map(|v| (v / n as f64) as f32).collect())
        .collect())
}

/// Build the encoding scheme for a model: 2-means over per-class mean output
/// activations. The cluster containing class 0 is labeled bit 0.
pub fn design_scheme(
    model: &ModelCheckpoint,
    train_data: &Dataset,
    per_class: usize,
    seed: u64,
) -> Result<EncodingScheme> {
    if train_data.num_classes != model.topology.num_classes {
        return Err(Error::Dimension(format!(
            "dataset has {} classes, model emits {}",
            train_data.num_classes, model.topology.num_classes
        )));
    }
    let points = class_mean_activations(model, train_data, per_class, seed)?;
    for attempt in 0..SCHEME_RETRIES {
        let out = kmeans(
            &points,
            SCHEME_BASE,
            derive_seed(seed, &format!("kmeans-attempt-{attempt}")),
            100,
            1e-6,
        )?;
        let occupied = (0..SCHEME_BASE).all(|j| out.assignments.contains(&j));
        if !occupied {
            continue;
        }
        let zero_cluster = out.assignments[0];
        let class_to_bit: Vec<u8> = out
            .assignments
            .iter()
            .map(|&a| u8::from(a != zero_cluster))
            .collect();
        let centroids = vec![
            out.centroids[zero_cluster].clone(),
            out.centroids[1 - zero_cluster].clone(),
        ];
        let scheme = EncodingScheme {
            num_classes: train_data.num_classes,
            base: SCHEME_BASE,
            class_to_bit,
            centroids,
            provenance: SchemeProvenance {
                model_sha256: model.sha256_hex(),
                per_class,
                seed,
            },
            config_sha256: None,
        };
        scheme.validate()?;
        return Ok(scheme);
    }
    Err(Error::Scheme(format!(
        "clustering produced an empty cluster in all {SCHEME_RETRIES} seeded attempts"
    )))
}

/// Decode a logits batch to bits: argmax class, then the scheme's table.
pub fn decode(logits: &Tensor, scheme: &EncodingScheme) -> Result<Vec<u8>> {
    if logits.cols() != scheme.num_classes {
        return Err(Error::Dimension(format!(
            "logits width {} vs scheme classes {}",
            logits.cols(),
            scheme.num_classes
        )));
    }
    Ok((0..logits.rows())
        .map(|r| scheme.class_to_bit[argmax_row(logits.row(r))])
        .collect())
}

/// Decode already-predicted classes (the black-box path).
pub fn decode_classes(classes: &[usize], scheme: &EncodingScheme) -> Result<Vec<u8>> {
    if let Some(&c) = classes.iter().find(|&&c| c >= scheme.num_classes) {
        return Err(Error::Dimension(format!(
            "class {c} outside scheme range {}",
            scheme.num_classes
        )));
    }
    Ok(classes.iter().map(|&c| scheme.class_to_bit[c]).collect())
}

/// Capacity of a K-symbol signature over base B, in bits: K * log2(B).
pub fn entropy(k: usize, base: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    if base < 2 {
        return Err(Error::Argument("base must be at least 2".into()));
    }
    Ok(k as f64 * (base as f64).log2())
}
