//! Network shape description and on-disk checkpoints.
//!
//! A checkpoint directory holds `topology.json` plus `weights.bin`: little-endian
//! f32, dense layers in order, each layer's weights (row-major, out x in) followed
//! by its bias. Rewriting the same model produces byte-identical files.

use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, sha256_hex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        has_bias: bool,
    },
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkTopology {
    /// Classifier MLP: dense + relu per hidden width, then a dense head.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut cur = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                in_dim: cur,
                out_dim: h,
                has_bias: true,
            });
            layers.push(LayerSpec::Relu);
            cur = h;
        }
        layers.push(LayerSpec::Dense {
            in_dim: cur,
            out_dim: num_classes,
            has_bias: true,
        });
        NetworkTopology {
            input_dim,
            num_classes,
            layers,
        }
    }

    /// Checks that layer dimensions compose and the model ends in a dense
    /// head of width `num_classes` (the logits the rest of the crate reads).
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Dimension("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Dimension(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        let mut cur = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Dense {
                in_dim, out_dim, ..
            } = layer
            {
                if *in_dim == 0 || *out_dim == 0 {
                    return Err(Error::Dimension(format!("layer {i}: zero-width dense")));
                }
                if *in_dim != cur {
                    return Err(Error::Dimension(format!(
                        "layer {i}: expects {in_dim} inputs but previous layer emits {cur}"
                    )));
                }
                cur = *out_dim;
            }
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { out_dim, .. }) if *out_dim == self.num_classes => Ok(()),
            Some(LayerSpec::Dense { out_dim, .. }) => Err(Error::Dimension(format!(
                "final dense emits {out_dim} logits but num_classes is {}",
                self.num_classes
            ))),
            _ => Err(Error::Dimension(
                "topology must end in a dense layer producing the logits".into(),
            )),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_ranges().last().map_or(0, |r| {
            r.bias.as_ref().map_or(r.weights.end, |b| b.end)
        })
    }

    /// Offsets of each dense layer's blocks inside the flat parameter vector.
    pub(crate) fn layer_ranges(&self) -> Vec<DenseRange> {
        let mut out = Vec::new();
        let mut off = 0usize;
        for layer in &self.layers {
            if let LayerSpec::Dense {
                in_dim,
                out_dim,
                has_bias,
            } = layer
            {
                let weights = off..off + in_dim * out_dim;
                off = weights.end;
                let bias = has_bias.then(|| {
                    let b = off..off + out_dim;
                    off = b.end;
                    b
                });
                out.push(DenseRange {
                    in_dim: *in_dim,
                    out_dim: *out_dim,
                    weights,
                    bias,
                });
            }
        }
        out
    }
}

/// Parameter block locations for one dense layer.
#[derive(Debug, Clone)]
pub(crate) struct DenseRange {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Range<usize>,
    pub bias: Option<Range<usize>>,
}

/// A topology plus its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub topology: NetworkTopology,
    pub params: Vec<f32>,
    /// Hash of the pipeline config that produced this model, if any.
    pub config_sha256: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TopologyFile {
    #[serde(flatten)]
    topology: NetworkTopology,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_sha256: Option<String>,
}

impl ModelCheckpoint {
    /// He-uniform weights (U(-sqrt(6/fan_in), sqrt(6/fan_in))), zero biases.
    pub fn init_he_uniform(topology: NetworkTopology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let mut rng = rng_from(seed);
        let mut params = vec![0.0f32; topology.param_count()];
        for range in topology.layer_ranges() {
            let limit = (6.0 / range.in_dim as f64).sqrt() as f32;
            for w in &mut params[range.weights] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(ModelCheckpoint {
            topology,
            params,
            config_sha256: None,
        })
    }

    pub fn zeros(topology: NetworkTopology) -> Result<Self> {
        topology.validate()?;
        let params = vec![0.0f32; topology.param_count()];
        Ok(ModelCheckpoint {
            topology,
            params,
            config_sha256: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let file = TopologyFile {
            topology: self.topology.clone(),
            config_sha256: self.config_sha256.clone(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        fs::write(dir.join("topology.json"), json)?;
        let mut bytes = Vec::with_capacity(self.params.len() * 4);
        for w in &self.params {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        let mut f = fs::File::create(dir.join("weights.bin"))?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let topo_path = dir.join("topology.json");
        let text = fs::read_to_string(&topo_path)?;
        let file: TopologyFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            file: topo_path.display().to_string(),
            msg: e.to_string(),
        })?;
        file.topology.validate()?;

        let weights_path = dir.join("weights.bin");
        let mut bytes = Vec::new();
        fs::File::open(&weights_path)?.read_to_end(&mut bytes)?;
        let expect = file.topology.param_count() * 4;
        if bytes.len() != expect {
            return Err(Error::Format {
                file: weights_path.display().to_string(),
                msg: format!("expected {expect} bytes, found {}", bytes.len()),
            });
        }
        let params = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok(ModelCheckpoint {
            topology: file.topology,
            params,
            config_sha256: file.config_sha256,
        })
    }

    /// Content hash over the topology and raw little-endian weight bytes.
    pub fn sha256_hex(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.topology).expect("topology serializes");
        for w in &self.params {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_shape_and_param_count() {
        let t = NetworkTopology::mlp(4, &[3], 2);
        t.validate().unwrap();
        // 4*3 + 3 + 3*2 + 2
        assert_eq!(t.param_count(), 23);
        assert_eq!(t.layers.len(), 3);
    }

    #[test]
    fn validate_rejects_bad_compositions() {
        let mut t = NetworkTopology::mlp(4, &[3], 2);
        t.num_classes = 5;
        assert!(t.validate().is_err());

        let t = NetworkTopology {
            input_dim: 4,
            num_classes: 2,
            layers: vec![
                LayerSpec::Dense {
                    in_dim: 4,
                    out_dim: 3,
                    has_bias: true,
                },
                LayerSpec::Dense {
                    in_dim: 2,
                    out_dim: 2,
                    has_bias: true,
                },
            ],
        };
        assert!(t.validate().is_err());

        let t = NetworkTopology {
            input_dim: 4,
            num_classes: 2,
            layers: vec![LayerSpec::Relu],
        };
        assert!(t.validate().is_err());

        let t = NetworkTopology::mlp(4, &[], 1);
        assert!(t.validate().is_err());
    }

    #[test]
    fn he_init_bounds_and_zero_bias() {
        let topo = NetworkTopology::mlp(6, &[5], 3);
        let model = ModelCheckpoint::init_he_uniform(topo.clone(), 11).unwrap();
        let ranges = topo.layer_ranges();
        for r in &ranges {
            let limit = (6.0f64 / r.in_dim as f64).sqrt() as f32;
            for &w in &model.params[r.weights.clone()] {
                assert!(w.abs() <= limit, "weight {w} outside he bound {limit}");
            }
            let bias = r.bias.clone().unwrap();
            assert!(model.params[bias].iter().all(|&b| b == 0.0));
        }
        // Same seed, same weights.
        let again = ModelCheckpoint::init_he_uniform(topo, 11).unwrap();
        assert_eq!(model.params, again.params);
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let topo = NetworkTopology::mlp(4, &[3], 2);
        let mut model = ModelCheckpoint::init_he_uniform(topo, 5).unwrap();
        model.config_sha256 = Some("deadbeef".into());
        model.save_dir(dir.path()).unwrap();
        let loaded = ModelCheckpoint::load_dir(dir.path()).unwrap();
        assert_eq!(model, loaded);
        assert_eq!(model.sha256_hex(), loaded.sha256_hex());

        let first = fs::read(dir.path().join("weights.bin")).unwrap();
        loaded.save_dir(dir.path()).unwrap();
        let second = fs::read(dir.path().join("weights.bin")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn load_rejects_truncated_weights() {
        let dir = tempfile::tempdir().unwrap();
        let topo = NetworkTopology::mlp(4, &[3], 2);
        let model = ModelCheckpoint::init_he_uniform(topo, 5).unwrap();
        model.save_dir(dir.path()).unwrap();
        let path = dir.path().join("weights.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match ModelCheckpoint::load_dir(dir.path()) {
            Err(Error::Format { file, .. }) => assert!(file.contains("weights.bin")),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
