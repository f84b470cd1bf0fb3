//! `.kpz` container I/O.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..4         | magic `KPRZ`                              |
//! | 4..8         | version `u32` (= 1)                       |
//! | 8..16        | manifest length `u64`                     |
//! | 16..16+m     | manifest, UTF-8 JSON                      |
//! | pad to 64    | zero bytes                                |
//! | payload      | f32 tensors, row-major, each 64-aligned   |
//!
//! Tensor `offset`s in the manifest are relative to the start of the
//! payload, which begins at the first 64-byte boundary after the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Attention, AttentionHead, ClassifierHead, EncoderLayer, EncoderModel, FeedForward,
    LayerNormParams, ModelConfig,
};
use crate::error::{ContainerError, Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"KPRZ";
pub const VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ManifestConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Model configuration plus the actual per-layer unit counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_neurons: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub layernorm_eps: f64,
    pub avg_seq_len: usize,
    pub layer_heads: Vec<usize>,
    pub layer_neurons: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

impl ManifestConfig {
    fn from_model(model: &EncoderModel) -> Self {
        let c = &model.config;
        Self {
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            head_dim: c.head_dim,
            ffn_neurons: c.ffn_neurons,
            embed_dim: c.embed_dim,
            vocab_size: c.vocab_size,
            max_seq_len: c.max_seq_len,
            num_classes: c.num_classes,
            layernorm_eps: c.layernorm_eps,
            avg_seq_len: c.avg_seq_len,
            layer_heads: model.heads_per_layer(),
            layer_neurons: model.neurons_per_layer(),
        }
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            ffn_neurons: self.ffn_neurons,
            embed_dim: self.embed_dim,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            num_classes: self.num_classes,
            layernorm_eps: self.layernorm_eps,
            avg_seq_len: self.avg_seq_len,
        }
    }
}

enum TensorRef<'a> {
    Matrix(&'a Matrix),
    Vector(&'a [f64]),
}

impl TensorRef<'_> {
    fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Matrix(m) => vec![m.rows(), m.cols()],
            TensorRef::Vector(v) => vec![v.len()],
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            TensorRef::Matrix(m) => m.as_slice(),
            TensorRef::Vector(v) => v,
        }
    }
}

/// Every tensor of the model under its canonical name, in file order.
fn named_tensors(model: &EncoderModel) -> Vec<(String, TensorRef<'_>)> {
    use TensorRef::{Matrix as M, Vector as V};
    let mut out = vec![
        ("embed.token".to_string(), M(&model.token_embeddings)),
        ("embed.pos".to_string(), M(&model.position_embeddings)),
        ("embed.ln.gain".to_string(), V(&model.embedding_norm.gain)),
        ("embed.ln.shift".to_string(), V(&model.embedding_norm.shift)),
    ];
    for (l, layer) in model.layers.iter().enumerate() {
        let att = &layer.attention;
        for (i, h) in att.heads.iter().enumerate() {
            for (kind, w, b) in [
                ("q", &h.query, &h.query_bias),
                ("k", &h.key, &h.key_bias),
                ("v", &h.value, &h.value_bias),
            ] {
                out.push((format!("layer.{l}.attn.{kind}.head.{i}.weight"), M(w)));
                out.push((format!("layer.{l}.attn.{kind}.head.{i}.bias"), V(b)));
            }
            out.push((format!("layer.{l}.attn.out.head.{i}.weight"), M(&h.output)));
        }
        out.push((format!("layer.{l}.attn.out.bias"), V(&att.output_bias)));
        out.push((format!("layer.{l}.attn.ln.gain"), V(&att.norm.gain)));
        out.push((format!("layer.{l}.attn.ln.shift"), V(&att.norm.shift)));
        let ffn = &layer.ffn;
        out.push((format!("layer.{l}.ffn.in.weight"), M(&ffn.input)));
        out.push((format!("layer.{l}.ffn.in.bias"), V(&ffn.input_bias)));
        out.push((format!("layer.{l}.ffn.out.weight"), M(&ffn.output)));
        out.push((format!("layer.{l}.ffn.out.bias"), V(&ffn.output_bias)));
        out.push((format!("layer.{l}.ffn.ln.gain"), V(&ffn.norm.gain)));
        out.push((format!("layer.{l}.ffn.ln.shift"), V(&ffn.norm.shift)));
    }
    out.push(("head.pool.weight".to_string(), M(&model.head.pool)));
    out.push(("head.pool.bias".to_string(), V(&model.head.pool_bias)));
    out.push(("head.cls.weight".to_string(), M(&model.head.classifier)));
    out.push(("head.cls.bias".to_string(), V(&model.head.classifier_bias)));
    out
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Serialize a model. The output depends only on the model's values.
pub fn to_bytes(model: &EncoderModel) -> Result<Vec<u8>> {
    model.validate()?;
    let tensors = named_tensors(model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in &tensors {
        let nbytes = t.values().len() * 4;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape(),
            dtype: "f32".into(),
            offset: offset as u64,
            nbytes: nbytes as u64,
        });
        offset = align(offset + nbytes);
    }
    let manifest = Manifest {
        config: ManifestConfig::from_model(model),
        tensors: entries,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| ContainerError::Manifest(e.to_string()))?;

    let payload_start = align(HEADER_LEN + manifest_bytes.len());
    let mut buf = Vec::with_capacity(payload_start + offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);
    buf.resize(payload_start, 0);
    for ((_, t), entry) in tensors.iter().zip(&manifest.tensors) {
        buf.resize(payload_start + entry.offset as usize, 0);
        for &v in t.values() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf.resize(payload_start + offset, 0);
    Ok(buf)
}

pub fn save_container(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<EncoderModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

fn require(bytes: &[u8], start: usize, end: usize) -> Result<&[u8]> {
    bytes.get(start..end).ok_or_else(|| {
        ContainerError::Truncated {
            start: start.max(bytes.len()) as u64,
            end: end as u64,
            len: bytes.len() as u64,
        }
        .into()
    })
}

/// Parse the header and manifest without decoding tensors.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    let header = require(bytes, 0, HEADER_LEN)?;
    let magic: [u8; 4] = header[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic { found: magic }.into());
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version).into());
    }
    let manifest_len = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let manifest_end =
        HEADER_LEN.saturating_add(usize::try_from(manifest_len).unwrap_or(usize::MAX));
    let manifest_bytes = require(bytes, HEADER_LEN, manifest_end)?;
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| ContainerError::Manifest(e.to_string()))?;
    Ok((manifest, align(manifest_end)))
}

pub fn from_bytes(bytes: &[u8]) -> Result<EncoderModel> {
    let (manifest, payload_start) = read_manifest(bytes)?;
    let mut decoded: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(ContainerError::Manifest(format!(
                "tensor `{}` has unsupported dtype {}",
                entry.name, entry.dtype
            ))
            .into());
        }
        let count: usize = entry.shape.iter().product();
        if entry.nbytes != (count * 4) as u64 {
            return Err(ContainerError::ShapeMismatch {
                name: entry.name.clone(),
                detail: format!(
                    "manifest shape {:?} needs {} bytes, payload has {}",
                    entry.shape,
                    count * 4,
                    entry.nbytes
                ),
            }
            .into());
        }
        let start = payload_start + entry.offset as usize;
        let raw = require(bytes, start, start + entry.nbytes as usize)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ContainerError::NonFinite(entry.name.clone()).into());
        }
        if decoded
            .insert(entry.name.clone(), (entry.shape.clone(), values))
            .is_some()
        {
            return Err(
                ContainerError::Manifest(format!("duplicate tensor `{}`", entry.name)).into(),
            );
        }
    }
    let model = assemble(&manifest.config, &mut decoded)?;
    if let Some(extra) = decoded.keys().next() {
        return Err(ContainerError::Manifest(format!("unexpected tensor `{extra}`")).into());
    }
    model.validate()?;
    Ok(model)
}

struct Take<'a> {
    tensors: &'a mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Take<'_> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> Result<Matrix> {
        let (shape, values) = self
            .tensors
            .remove(&name)
            .ok_or_else(|| ContainerError::MissingTensor(name.clone()))?;
        if shape != [rows, cols] {
            return Err(ContainerError::ShapeMismatch {
                name,
                detail: format!("expected [{rows}, {cols}], manifest has {shape:?}"),
            }
            .into());
        }
        Matrix::from_vec(rows, cols, values)
    }

    fn vector(&mut self, name: String, len: usize) -> Result<Vec<f64>> {
        let (shape, values) = self
            .tensors
            .remove(&name)
            .ok_or_else(|| ContainerError::MissingTensor(name.clone()))?;
        if shape != [len] {
            return Err(ContainerError::ShapeMismatch {
                name,
                detail: format!("expected [{len}], manifest has {shape:?}"),
            }
            .into());
        }
        Ok(values)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.vector(format!("{prefix}.gain"), d)?,
            shift: self.vector(format!("{prefix}.shift"), d)?,
        })
    }
}

fn assemble(
    mc: &ManifestConfig,
    tensors: &mut BTreeMap<String, (Vec<usize>, Vec<f64>)>,
) -> Result<EncoderModel> {
    let config = mc.model_config();
    config.validate()?;
    if mc.layer_heads.len() != config.num_layers || mc.layer_neurons.len() != config.num_layers {
        return Err(ContainerError::Validation(format!(
            "per-layer unit counts cover {}/{} layers, config declares {}",
            mc.layer_heads.len(),
            mc.layer_neurons.len(),
            config.num_layers
        ))
        .into());
    }
    let (d, dh) = (config.embed_dim, config.head_dim);
    let mut t = Take { tensors };
    let token_embeddings = t.matrix("embed.token".into(), config.vocab_size, d)?;
    let position_embeddings = t.matrix("embed.pos".into(), config.max_seq_len, d)?;
    let embedding_norm = t.norm("embed.ln", d)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let mut heads = Vec::with_capacity(mc.layer_heads[l]);
        for i in 0..mc.layer_heads[l] {
            let p = format!("layer.{l}.attn");
            heads.push(AttentionHead {
                query: t.matrix(format!("{p}.q.head.{i}.weight"), dh, d)?,
                query_bias: t.vector(format!("{p}.q.head.{i}.bias"), dh)?,
                key: t.matrix(format!("{p}.k.head.{i}.weight"), dh, d)?,
                key_bias: t.vector(format!("{p}.k.head.{i}.bias"), dh)?,
                value: t.matrix(format!("{p}.v.head.{i}.weight"), dh, d)?,
                value_bias: t.vector(format!("{p}.v.head.{i}.bias"), dh)?,
                output: t.matrix(format!("{p}.out.head.{i}.weight"), d, dh)?,
            });
        }
        let attention = Attention {
            heads,
            output_bias: t.vector(format!("layer.{l}.attn.out.bias"), d)?,
            norm: t.norm(&format!("layer.{l}.attn.ln"), d)?,
        };
        let n = mc.layer_neurons[l];
        let ffn = FeedForward {
            input: t.matrix(format!("layer.{l}.ffn.in.weight"), n, d)?,
            input_bias: t.vector(format!("layer.{l}.ffn.in.bias"), n)?,
            output: t.matrix(format!("layer.{l}.ffn.out.weight"), d, n)?,
            output_bias: t.vector(format!("layer.{l}.ffn.out.bias"), d)?,
            norm: t.norm(&format!("layer.{l}.ffn.ln"), d)?,
        };
        layers.push(EncoderLayer { attention, ffn });
    }
    let head = ClassifierHead {
        pool: t.matrix("head.pool.weight".into(), d, d)?,
        pool_bias: t.vector("head.pool.bias".into(), d)?,
        classifier: t.matrix("head.cls.weight".into(), config.num_classes, d)?,
        classifier_bias: t.vector("head.cls.bias".into(), config.num_classes)?,
    };
    Ok(EncoderModel {
        config,
        token_embeddings,
        position_embeddings,
        embedding_norm,
        layers,
        head,
    })
}
