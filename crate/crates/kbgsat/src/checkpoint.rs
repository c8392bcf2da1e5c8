//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `KBGSATCK`, one version byte, a little-endian
//! `u32` manifest length, the JSON manifest, then every parameter array as
//! little-endian `f32` in manifest order. Parameters are trained in `f64`;
//! [`quantize`] rounds a model to the stored precision so that an in-memory
//! model and its reloaded copy score identically.

use std::path::Path;

use kbgsat_core::data::Triple;
use kbgsat_core::decoder::{ConvEConfig, DecoderKind};
use kbgsat_core::encoder::{Activation, AttentionMode, EncoderConfig};
use kbgsat_core::model::{Model, ModelConfig};
use kbgsat_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::write_file;

pub const MAGIC: &[u8; 8] = b"KBGSATCK";
pub const VERSION: u8 = 1;
const HEADER: usize = MAGIC.len() + 1 + 4;

/// A trained model plus the provenance recorded next to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Hash of the semantic configuration keys that produced the model.
    pub config_hash: String,
    /// Epoch whose parameters were kept.
    pub epoch: usize,
    pub best_valid_mrr: f64,
    /// Triples added to the training split by self-training. The encoder's
    /// adjacency is built from `train ∪ extra_train`, so scoring must use it too.
    pub extra_train: Vec<Triple>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
struct DecoderManifest {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reshape: Option<[usize; 2]>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
struct ArrayManifest {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
struct Manifest {
    num_entities: usize,
    num_relations: usize,
    dim: usize,
    layers: usize,
    attention: String,
    activation: String,
    dropout: f64,
    decoder: DecoderManifest,
    config_hash: String,
    epoch: usize,
    best_valid_mrr: f64,
    extra_train: Vec<[usize; 3]>,
    arrays: Vec<ArrayManifest>,
}

/// Rounds every parameter to the nearest `f32`, the precision checkpoints store.
pub fn quantize(model: &mut Model) {
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn decoder_manifest(kind: &DecoderKind) -> DecoderManifest {
    let conve = match kind {
        DecoderKind::ConvE(c) => Some(c),
        _ => None,
    };
    DecoderManifest {
        kind: kind.name().to_string(),
        channels: conve.map(|c| c.channels),
        kernel: conve.map(|c| [c.kernel_h, c.kernel_w]),
        reshape: conve.map(|c| [c.rows, c.cols]),
    }
}

fn decoder_kind(m: &DecoderManifest) -> Result<DecoderKind> {
    let plain = m.channels.is_none() && m.kernel.is_none() && m.reshape.is_none();
    match (m.kind.as_str(), plain) {
        ("transe", true) => Ok(DecoderKind::TransE),
        ("distmult", true) => Ok(DecoderKind::DistMult),
        ("conve", false) => match (m.channels, m.kernel, m.reshape) {
            (Some(channels), Some([kernel_h, kernel_w]), Some([rows, cols])) => Ok(DecoderKind::ConvE(ConvEConfig {
                channels,
                kernel_h,
                kernel_w,
                rows,
                cols,
            })),
            _ => Err(CliError::Corrupt("incomplete ConvE decoder parameters".into())),
        },
        (k, _) => Err(CliError::Corrupt(format!("unexpected decoder description `{k}`"))),
    }
}

impl Checkpoint {
    /// Serialises the checkpoint. Parameters are written as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.model.config;
        let manifest = Manifest {
            num_entities: c.num_entities,
            num_relations: c.num_relations,
            dim: c.encoder.dim,
            layers: c.encoder.layers,
            attention: c.encoder.attention.name().to_string(),
            activation: c.encoder.activation.name().to_string(),
            dropout: c.encoder.dropout,
            decoder: decoder_manifest(&c.decoder),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            best_valid_mrr: self.best_valid_mrr,
            extra_train: self.extra_train.iter().map(|t| [t.head, t.relation, t.tail]).collect(),
            arrays: self
                .model
                .params
                .iter()
                .map(|(name, t)| ArrayManifest {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
        let len = u32::try_from(text.len()).expect("manifest shorter than 4 GiB");
        let mut out = Vec::with_capacity(HEADER + text.len() + 4 * self.model.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&text);
        for (_, t) in self.model.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. Bad magic or version is a format error; anything
    /// that disagrees with the manifest is a corruption error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CliError::Format("not a kbgsat checkpoint (bad magic)".into()));
        }
        let Some(&version) = bytes.get(MAGIC.len()) else {
            return Err(CliError::Corrupt("file ends after the magic".into()));
        };
        if version != VERSION {
            return Err(CliError::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        if bytes.len() < HEADER {
            return Err(CliError::Corrupt("truncated header".into()));
        }
        let len = u32::from_le_bytes(bytes[MAGIC.len() + 1..HEADER].try_into().expect("4 bytes")) as usize;
        let body = &bytes[HEADER..];
        if body.len() < len {
            return Err(CliError::Corrupt(format!(
                "manifest declares {len} bytes but only {} remain",
                body.len()
            )));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| CliError::Corrupt(format!("manifest: {e}")))?;
        let payload = &body[len..];

        let expected: usize = manifest.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if payload.len() != 4 * expected {
            return Err(CliError::Corrupt(format!(
                "manifest lists {expected} values ({} bytes) but the payload has {} bytes",
                4 * expected,
                payload.len()
            )));
        }

        let attention = AttentionMode::parse(&manifest.attention)
            .ok_or_else(|| CliError::Corrupt(format!("unknown attention `{}`", manifest.attention)))?;
        let activation = Activation::parse(&manifest.activation)
            .ok_or_else(|| CliError::Corrupt(format!("unknown activation `{}`", manifest.activation)))?;
        let config = ModelConfig {
            num_entities: manifest.num_entities,
            num_relations: manifest.num_relations,
            encoder: EncoderConfig {
                dim: manifest.dim,
                layers: manifest.layers,
                attention,
                activation,
                dropout: manifest.dropout,
            },
            decoder: decoder_kind(&manifest.decoder)?,
        };
        // The layout is rebuilt from the architecture, then filled from the payload.
        let mut model = Model::new(config, 0).map_err(|e| CliError::Corrupt(format!("manifest architecture: {e}")))?;
        let layout: Vec<(String, Vec<usize>)> =
            model.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        let listed: Vec<(String, Vec<usize>)> =
            manifest.arrays.iter().map(|a| (a.name.clone(), a.shape.clone())).collect();
        if layout != listed {
            return Err(CliError::Corrupt(
                "array names or shapes do not match the declared architecture".into(),
            ));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
        for ((_, t), (_, shape)) in model.params.iter_mut().zip(&layout) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = floats.by_ref().take(n).collect();
            *t = Tensor::new(shape.clone(), data)?;
        }
        let ne = manifest.num_entities;
        let nr = manifest.num_relations;
        let mut extra_train = Vec::with_capacity(manifest.extra_train.len());
        for [h, r, t] in manifest.extra_train {
            if h >= ne || t >= ne || r >= nr {
                return Err(CliError::Corrupt(format!("extra triple ({h}, {r}, {t}) out of range")));
            }
            extra_train.push(Triple::new(h, r, t));
        }
        Ok(Checkpoint {
            model,
            config_hash: manifest.config_hash,
            epoch: manifest.epoch,
            best_valid_mrr: manifest.best_valid_mrr,
            extra_train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Fails with a data error unless the checkpoint was trained on a store
    /// with `num_entities` entities and `num_relations` relations.
    pub fn check_counts(&self, num_entities: usize, num_relations: usize) -> Result<()> {
        let c = &self.model.config;
        if (c.num_entities, c.num_relations) != (num_entities, num_relations) {
            return Err(CliError::Data(format!(
                "checkpoint expects {} entities / {} relations but the dataset has {num_entities} / {num_relations}",
                c.num_entities, c.num_relations
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kbgsat_core::data::{augment, TripleStore};
    use kbgsat_core::model::Scorer;

    fn checkpoint(decoder: DecoderKind) -> Checkpoint {
        let config = ModelConfig {
            num_entities: 5,
            num_relations: 2,
            encoder: EncoderConfig {
                dim: 4,
                layers: 2,
                attention: AttentionMode::SelfAttention,
                activation: Activation::Tanh,
                dropout: 0.1,
            },
            decoder,
        };
        let mut model = Model::new(config, 11).unwrap();
        quantize(&mut model);
        Checkpoint {
            model,
            config_hash: "abc".into(),
            epoch: 7,
            best_valid_mrr: 0.123456789,
            extra_train: vec![Triple::new(0, 1, 4)],
        }
    }

    fn conve() -> DecoderKind {
        DecoderKind::ConvE(ConvEConfig {
            channels: 2,
            kernel_h: 2,
            kernel_w: 2,
            rows: 2,
            cols: 2,
        })
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for d in [DecoderKind::TransE, DecoderKind::DistMult, conve()] {
            let ck = checkpoint(d);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn probe_scores_survive_reload() {
        let ck = checkpoint(conve());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let store = TripleStore::from_ids(5, 2, vec![Triple::new(0, 0, 1), Triple::new(2, 1, 3)], vec![], vec![]).unwrap();
        let g = augment(&store);
        let probe = [(0, 0), (3, 3), (4, 4)];
        let a = ck.model.embed(&g).unwrap().score_batch(&probe).unwrap();
        let b = back.model.embed(&g).unwrap().score_batch(&probe).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let mut bytes = checkpoint(DecoderKind::DistMult).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CliError::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"KB"), Err(CliError::Format(_))));
        bytes[0] = b'K';
        bytes[MAGIC.len()] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CliError::Format(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_corruption() {
        let bytes = checkpoint(DecoderKind::TransE).to_bytes();
        for cut in [MAGIC.len() + 1, HEADER + 3, HEADER + 40, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CliError::Corrupt(_))),
                "cut at {cut}"
            );
        }
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(CliError::Corrupt(_))));
    }

    #[test]
    fn manifest_shape_mismatch_is_corruption() {
        let bytes = checkpoint(DecoderKind::DistMult).to_bytes();
        let len = u32::from_le_bytes(bytes[MAGIC.len() + 1..HEADER].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[HEADER..HEADER + len].to_vec()).unwrap();
        // Same byte length, different architecture: 5 entities become 6.
        let edited = text.replacen("\"num_entities\": 5", "\"num_entities\": 6", 1);
        assert_ne!(edited, text);
        let mut out = bytes[..HEADER].to_vec();
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[HEADER + len..]);
        assert!(matches!(Checkpoint::from_bytes(&out), Err(CliError::Corrupt(_))));
    }

    #[test]
    fn count_check() {
        let ck = checkpoint(DecoderKind::TransE);
        assert!(ck.check_counts(5, 2).is_ok());
        assert!(matches!(ck.check_counts(6, 2), Err(CliError::Data(_))));
    }
}
