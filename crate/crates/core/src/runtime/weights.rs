//! On-disk weight format: `manifest.json` + `weights.bin` + `vocab.json`.
//!
//! `weights.bin` holds raw little-endian f32 tensors concatenated in manifest
//! order. Every manifest entry carries the tensor's byte offset and a sha256
//! checksum of its bytes, so truncation and corruption are reported against
//! the tensor that owns the damaged range.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, NormKind, PositionalKind};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const VOCAB_FILE: &str = "vocab.json";

const FORMAT_NAME: &str = "headlens-weights";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bos: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unk: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    #[serde(default)]
    pub special_tokens: SpecialTokens,
    pub tensors: Vec<TensorEntry>,
}

/// Scale and shift of one normalization site. Empty for [`NormKind::Identity`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub weight: Option<Array1<f32>>,
    pub bias: Option<Array1<f32>>,
}

impl NormParams {
    pub fn for_kind(kind: NormKind, d_model: usize) -> Self {
        match kind {
            NormKind::LayerNorm => Self {
                weight: Some(Array1::ones(d_model)),
                bias: Some(Array1::zeros(d_model)),
            },
            NormKind::RmsNorm => Self {
                weight: Some(Array1::ones(d_model)),
                bias: None,
            },
            NormKind::Identity => Self {
                weight: None,
                bias: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: NormParams,
    /// `[d_model, n_heads * d_head]`; head `j` owns columns `j*d_head..(j+1)*d_head`.
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    /// `[n_heads * d_head, d_model]`; head `j` owns rows `j*d_head..(j+1)*d_head`.
    pub wo: Array2<f32>,
    pub ln2: NormParams,
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

impl LayerWeights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            ln1: NormParams::for_kind(config.norm, d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2: NormParams::for_kind(config.norm, d),
            w_in: Array2::zeros((d, config.d_mlp)),
            b_in: Array1::zeros(config.d_mlp),
            w_out: Array2::zeros((config.d_mlp, d)),
            b_out: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub tok_embed: Array2<f32>,
    pub pos_embed: Option<Array2<f32>>,
    pub layers: Vec<LayerWeights>,
    pub ln_f: NormParams,
    /// `[d_model, vocab_size]`.
    pub unembed: Array2<f32>,
}

impl ModelWeights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            tok_embed: Array2::zeros((config.vocab_size, d)),
            pos_embed: match config.positional {
                PositionalKind::Learned => Some(Array2::zeros((config.max_seq_len, d))),
                PositionalKind::None => None,
            },
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros(config)).collect(),
            ln_f: NormParams::for_kind(config.norm, d),
            unembed: Array2::zeros((d, config.vocab_size)),
        }
    }

    /// Tensor names and shapes in canonical file order.
    pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let mut out = vec![("embed.tok".to_string(), vec![config.vocab_size, d])];
        if config.positional == PositionalKind::Learned {
            out.push(("embed.pos".into(), vec![config.max_seq_len, d]));
        }
        let norm = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| match config.norm {
            NormKind::LayerNorm => {
                out.push((format!("{prefix}.weight"), vec![d]));
                out.push((format!("{prefix}.bias"), vec![d]));
            }
            NormKind::RmsNorm => out.push((format!("{prefix}.weight"), vec![d])),
            NormKind::Identity => {}
        };
        for l in 0..config.n_layers {
            norm(&format!("blocks.{l}.ln1"), &mut out);
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("blocks.{l}.attn.{w}"), vec![d, d]));
            }
            norm(&format!("blocks.{l}.ln2"), &mut out);
            out.push((format!("blocks.{l}.mlp.w_in"), vec![d, config.d_mlp]));
            out.push((format!("blocks.{l}.mlp.b_in"), vec![config.d_mlp]));
            out.push((format!("blocks.{l}.mlp.w_out"), vec![config.d_mlp, d]));
            out.push((format!("blocks.{l}.mlp.b_out"), vec![d]));
        }
        norm("ln_f", &mut out);
        out.push(("unembed".into(), vec![d, config.vocab_size]));
        out
    }

    fn tensor_data(&self, name: &str) -> Option<&[f32]> {
        fn norm<'a>(p: &'a NormParams, field: &str) -> Option<&'a [f32]> {
            match field {
                "weight" => p.weight.as_ref().and_then(|w| w.as_slice()),
                "bias" => p.bias.as_ref().and_then(|b| b.as_slice()),
                _ => None,
            }
        }
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["embed", "tok"] => self.tok_embed.as_slice(),
            ["embed", "pos"] => self.pos_embed.as_ref().and_then(|p| p.as_slice()),
            ["unembed"] => self.unembed.as_slice(),
            ["ln_f", field] => norm(&self.ln_f, field),
            ["blocks", l, rest @ ..] => {
                let layer = self.layers.get(l.parse::<usize>().ok()?)?;
                match rest {
                    ["ln1", field] => norm(&layer.ln1, field),
                    ["ln2", field] => norm(&layer.ln2, field),
                    ["attn", "wq"] => layer.wq.as_slice(),
                    ["attn", "wk"] => layer.wk.as_slice(),
                    ["attn", "wv"] => layer.wv.as_slice(),
                    ["attn", "wo"] => layer.wo.as_slice(),
                    ["mlp", "w_in"] => layer.w_in.as_slice(),
                    ["mlp", "b_in"] => layer.b_in.as_slice(),
                    ["mlp", "w_out"] => layer.w_out.as_slice(),
                    ["mlp", "b_out"] => layer.b_out.as_slice(),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    fn assign(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        fn arr2(shape: &[usize], data: Vec<f32>) -> Array2<f32> {
            Array2::from_shape_vec((shape[0], shape[1]), data).expect("shape checked against layout")
        }
        let parts: Vec<&str> = name.split('.').collect();
        let set_norm = |p: &mut NormParams, field: &str, data: Vec<f32>| match field {
            "weight" => p.weight = Some(Array1::from(data)),
            _ => p.bias = Some(Array1::from(data)),
        };
        match parts.as_slice() {
            ["embed", "tok"] => self.tok_embed = arr2(shape, data),
            ["embed", "pos"] => self.pos_embed = Some(arr2(shape, data)),
            ["unembed"] => self.unembed = arr2(shape, data),
            ["ln_f", field] => set_norm(&mut self.ln_f, field, data),
            ["blocks", l, rest @ ..] => {
                let layer = &mut self.layers[l.parse::<usize>().expect("layout name")];
                match rest {
                    ["ln1", field] => set_norm(&mut layer.ln1, field, data),
                    ["ln2", field] => set_norm(&mut layer.ln2, field, data),
                    ["attn", "wq"] => layer.wq = arr2(shape, data),
                    ["attn", "wk"] => layer.wk = arr2(shape, data),
                    ["attn", "wv"] => layer.wv = arr2(shape, data),
                    ["attn", "wo"] => layer.wo = arr2(shape, data),
                    ["mlp", "w_in"] => layer.w_in = arr2(shape, data),
                    ["mlp", "b_in"] => layer.b_in = Array1::from(data),
                    ["mlp", "w_out"] => layer.w_out = arr2(shape, data),
                    ["mlp", "b_out"] => layer.b_out = Array1::from(data),
                    _ => unreachable!("unknown layout name {name}"),
                }
            }
            _ => unreachable!("unknown layout name {name}"),
        }
    }
}

fn checksum(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

/// Write `manifest.json` and `weights.bin` into `dir`.
pub fn save_weights(
    dir: &Path,
    config: &ModelConfig,
    special_tokens: &SpecialTokens,
    weights: &ModelWeights,
) -> Result<()> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in ModelWeights::tensor_layout(config) {
        let data = weights
            .tensor_data(&name)
            .ok_or_else(|| Error::MissingTensor { name: name.clone() })?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                found: vec![data.len()],
            });
        }
        let start = blob.len();
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            checksum: checksum(&blob[start..]),
            name,
            shape,
            dtype: "f32".into(),
            offset: start as u64,
        });
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        config: config.clone(),
        special_tokens: special_tokens.clone(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    fs::write(&weights_path, blob).map_err(|e| Error::io(&weights_path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
        return Err(Error::InvalidConfig(format!(
            "unsupported weight format {} v{}",
            manifest.format, manifest.version
        )));
    }
    manifest.config.validate()?;
    Ok(manifest)
}

/// Load and verify every tensor the config requires.
pub fn load_weights(dir: &Path) -> Result<(Manifest, ModelWeights)> {
    let manifest = read_manifest(dir)?;
    let config = &manifest.config;
    let path = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let by_name: BTreeMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();

    let mut weights = ModelWeights::zeros(config);
    for (name, shape) in ModelWeights::tensor_layout(config) {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::MissingTensor { name: name.clone() })?;
        if entry.dtype != "f32" {
            return Err(Error::Checksum {
                name,
                reason: format!("unsupported dtype {}", entry.dtype),
            });
        }
        if entry.shape != shape {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                found: entry.shape.clone(),
            });
        }
        let n_bytes = shape.iter().product::<usize>() * 4;
        let start = entry.offset as usize;
        let end = start.checked_add(n_bytes).filter(|&e| e <= blob.len());
        let Some(end) = end else {
            return Err(Error::Checksum {
                name,
                reason: format!(
                    "byte range {}..{} exceeds weights.bin length {}",
                    start,
                    start + n_bytes,
                    blob.len()
                ),
            });
        };
        let bytes = &blob[start..end];
        if checksum(bytes) != entry.checksum {
            return Err(Error::Checksum {
                name,
                reason: "sha256 mismatch".into(),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        weights.assign(&name, &shape, data);
    }
    Ok((manifest, weights))
}
