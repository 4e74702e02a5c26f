//! Datasets: IDX-format loading, synthetic Gaussian blobs, and the
//! class-stratified sampling the scheme and key stages rely on.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Spread of each synthetic blob; `separation` is measured in these units.
pub const BLOB_SIGMA: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

/// Immutable labeled image set. Pixels live in [0,1]; a train split must
/// contain every class at least once.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: SplitTag) -> Result<Self> {
        if images.shape().len() != 2 {
            return Err(Error::Dimension("dataset images must be rank 2".into()));
        }
        if images.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images vs {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Argument("a dataset needs at least 2 classes".into()));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format {
                file: "<images>".into(),
                msg: format!("pixel value {v} outside [0,1]"),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format {
                file: "<labels>".into(),
                msg: format!("label {l} outside [0,{num_classes})"),
            });
        }
        if split == SplitTag::Train {
            let mut seen = vec![false; num_classes];
            for &l in &labels {
                seen[l] = true;
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::Format {
                    file: "<labels>".into(),
                    msg: format!("train split is missing class {missing}"),
                });
            }
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.images.cols()
    }

    /// Indices of all samples with the given label.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub(crate) fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(images, labels, self.num_classes, self.split)
    }
}

fn be_u32(bytes: &[u8], offset: usize, file: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            file: file.display().to_string(),
            msg: "truncated header".into(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().expect("4 bytes")))
}

/// Load an IDX image/label pair (the MNIST container format). Pixel bytes are
/// scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: SplitTag) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let magic = be_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            file: images_path.display().to_string(),
            msg: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = be_u32(&img_bytes, 4, images_path)? as usize;
    let rows = be_u32(&img_bytes, 8, images_path)? as usize;
    let cols = be_u32(&img_bytes, 12, images_path)? as usize;
    let dim = rows * cols;
    let payload = &img_bytes[16..];
    if payload.len() != count * dim {
        return Err(Error::Format {
            file: images_path.display().to_string(),
            msg: format!(
                "payload of {} bytes for {count} images of {dim} pixels",
                payload.len()
            ),
        });
    }
    let data: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(vec![count, dim], data)?;

    let lbl_bytes = fs::read(labels_path)?;
    let magic = be_u32(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            file: labels_path.display().to_string(),
            msg: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let lbl_count = be_u32(&lbl_bytes, 4, labels_path)? as usize;
    let labels_payload = &lbl_bytes[8..];
    if labels_payload.len() != lbl_count {
        return Err(Error::Format {
            file: labels_path.display().to_string(),
            msg: format!("payload of {} bytes for {lbl_count} labels", labels_payload.len()),
        });
    }
    if lbl_count != count {
        return Err(Error::Format {
            file: labels_path.display().to_string(),
            msg: format!("{lbl_count} labels for {count} images in {}", images_path.display()),
        });
    }
    let labels: Vec<usize> = labels_payload.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(images, labels, num_classes, split)
}

/// Center of a synthetic class: 0.5 everywhere, offset along one axis.
/// Classes cycle through axes and flip direction once each is used, so all
/// centers are distinct whenever separation > 0.
fn blob_center(class: usize, dim: usize, separation: f32) -> Vec<f32> {
    let axis = class % dim;
    let wave = class / dim;
    let dir = if wave % 2 == 0 { 1.0 } else { -1.0 };
    let magnitude = separation * BLOB_SIGMA * (1.0 + (wave / 2) as f32);
    let mut center = vec![0.5f32; dim];
    center[axis] += dir * magnitude;
    center
}

/// Isotropic Gaussian blobs, one center per class, samples clipped to [0,1].
pub fn synth_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f32,
    seed: u64,
    split: SplitTag,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::Argument("blobs need at least 2 classes".into()));
    }
    if per_class == 0 {
        return Err(Error::Argument("per_class must be at least 1".into()));
    }
    if dim == 0 {
        return Err(Error::Argument("dim must be at least 1".into()));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::Argument(format!(
            "separation must be finite and >= 0, got {separation}"
        )));
    }
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let center = blob_center(class, dim, separation);
        for _ in 0..per_class {
            for &c in &center {
                let n: f32 = StandardNormal.sample(&mut rng);
                data.push((c + BLOB_SIGMA * n).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![num_classes * per_class, dim], data)?;
    Dataset::new(images, labels, num_classes, split)
}

/// Exactly `per_class` samples of every class, drawn without replacement.
pub fn stratified_sample(dataset: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::Argument("per_class must be at least 1".into()));
    }
    let mut rng = rng_from(seed);
    let mut picked = Vec::with_capacity(per_class * dataset.num_classes);
    for class in 0..dataset.num_classes {
        let members = dataset.class_indices(class);
        if members.len() < per_class {
            return Err(Error::Sampling(format!(
                "class {class} has {} samples, need {per_class}",
                members.len()
            )));
        }
        for i in index::sample(&mut rng, members.len(), per_class) {
            picked.push(members[i]);
        }
    }
    dataset.subset(&picked)
}

/// Per-class fraction of a dataset (at least one sample each), used to thin
/// the clean data mixed into embedding. Keeps every class represented.
pub fn subset_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction.is_finite() && fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "fraction must lie in (0,1], got {fraction}"
        )));
    }
    let mut rng = rng_from(seed);
    let mut picked = Vec::new();
    for class in 0..dataset.num_classes {
        let members = dataset.class_indices(class);
        let take = ((members.len() as f64 * fraction).round() as usize)
            .clamp(1, members.len());
        for i in index::sample(&mut rng, members.len(), take) {
            picked.push(members[i]);
        }
    }
    dataset.subset(&picked)
}
