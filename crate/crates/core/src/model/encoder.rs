use super::{MaskState, ModelConfig, SublayerKind};
use crate::error::{ContainerError, Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }
}

/// One attention head. Projections map a token row `x ∈ R^d` to
/// `W·x + b ∈ R^{d_h}`, so the weights are `d_h × d`; the output
/// projection maps the head feature back to `R^d` and is `d × d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub query: Matrix,
    pub query_bias: Vec<f64>,
    pub key: Matrix,
    pub key_bias: Vec<f64>,
    pub value: Matrix,
    pub value_bias: Vec<f64>,
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: Vec<AttentionHead>,
    pub output_bias: Vec<f64>,
    pub norm: LayerNormParams,
}

/// Feed-forward block. Row `i` of `input` (with `input_bias[i]`) produces the
/// neuron feature `g_i`; column `i` of `output` is its output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    /// `N × d`
    pub input: Matrix,
    pub input_bias: Vec<f64>,
    /// `d × N`
    pub output: Matrix,
    pub output_bias: Vec<f64>,
    pub norm: LayerNormParams,
}

impl FeedForward {
    pub fn num_neurons(&self) -> usize {
        self.input.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attention: Attention,
    pub ffn: FeedForward,
}

/// First-token pooling → `d×d` projection → tanh → `C×d` classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub pool: Matrix,
    pub pool_bias: Vec<f64>,
    pub classifier: Matrix,
    pub classifier_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    /// `vocab × d`
    pub token_embeddings: Matrix,
    /// `max_seq_len × d`
    pub position_embeddings: Matrix,
    pub embedding_norm: LayerNormParams,
    pub layers: Vec<EncoderLayer>,
    pub head: ClassifierHead,
}

fn shape_err(name: &str, detail: String) -> Error {
    ContainerError::ShapeMismatch {
        name: name.to_string(),
        detail,
    }
    .into()
}

fn check_matrix(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(shape_err(
            name,
            format!("expected {rows}x{cols}, found {}x{}", m.rows(), m.cols()),
        ));
    }
    if !m.is_finite() {
        return Err(ContainerError::NonFinite(name.to_string()).into());
    }
    Ok(())
}

fn check_vector(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(shape_err(
            name,
            format!("expected length {len}, found {}", v.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ContainerError::NonFinite(name.to_string()).into());
    }
    Ok(())
}

impl EncoderModel {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn heads_per_layer(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.attention.heads.len())
            .collect()
    }

    pub fn neurons_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.ffn.num_neurons()).collect()
    }

    /// Number of units (heads or neurons) in a sub-layer.
    pub fn units_in(&self, layer: usize, kind: SublayerKind) -> usize {
        match kind {
            SublayerKind::Attention => self.layers[layer].attention.heads.len(),
            SublayerKind::FeedForward => self.layers[layer].ffn.num_neurons(),
        }
    }

    /// Check every tensor against the configuration; all tensors must be finite.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.num_layers {
            return Err(ContainerError::Validation(format!(
                "config declares {} layers, model has {}",
                c.num_layers,
                self.layers.len()
            ))
            .into());
        }
        let (d, dh) = (c.embed_dim, c.head_dim);
        check_matrix("embed.token", &self.token_embeddings, c.vocab_size, d)?;
        check_matrix("embed.pos", &self.position_embeddings, c.max_seq_len, d)?;
        check_vector("embed.ln.gain", &self.embedding_norm.gain, d)?;
        check_vector("embed.ln.shift", &self.embedding_norm.shift, d)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let att = &layer.attention;
            for (i, h) in att.heads.iter().enumerate() {
                for (kind, w, b) in [
                    ("q", &h.query, &h.query_bias),
                    ("k", &h.key, &h.key_bias),
                    ("v", &h.value, &h.value_bias),
                ] {
                    check_matrix(&format!("layer.{l}.attn.{kind}.head.{i}.weight"), w, dh, d)?;
                    check_vector(&format!("layer.{l}.attn.{kind}.head.{i}.bias"), b, dh)?;
                }
                check_matrix(
                    &format!("layer.{l}.attn.out.head.{i}.weight"),
                    &h.output,
                    d,
                    dh,
                )?;
            }
            check_vector(&format!("layer.{l}.attn.out.bias"), &att.output_bias, d)?;
            check_vector(&format!("layer.{l}.attn.ln.gain"), &att.norm.gain, d)?;
            check_vector(&format!("layer.{l}.attn.ln.shift"), &att.norm.shift, d)?;
            let ffn = &layer.ffn;
            let n = ffn.num_neurons();
            check_matrix(&format!("layer.{l}.ffn.in.weight"), &ffn.input, n, d)?;
            check_vector(&format!("layer.{l}.ffn.in.bias"), &ffn.input_bias, n)?;
            check_matrix(&format!("layer.{l}.ffn.out.weight"), &ffn.output, d, n)?;
            check_vector(&format!("layer.{l}.ffn.out.bias"), &ffn.output_bias, d)?;
            check_vector(&format!("layer.{l}.ffn.ln.gain"), &ffn.norm.gain, d)?;
            check_vector(&format!("layer.{l}.ffn.ln.shift"), &ffn.norm.shift, d)?;
        }
        check_matrix("head.pool.weight", &self.head.pool, d, d)?;
        check_vector("head.pool.bias", &self.head.pool_bias, d)?;
        check_matrix("head.cls.weight", &self.head.classifier, c.num_classes, d)?;
        check_vector("head.cls.bias", &self.head.classifier_bias, c.num_classes)?;
        Ok(())
    }

    /// Round every parameter to the nearest `f32`, matching container storage.
    pub fn round_to_f32(&mut self) {
        fn vec32(v: &mut [f64]) {
            v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        self.token_embeddings.round_to_f32();
        self.position_embeddings.round_to_f32();
        vec32(&mut self.embedding_norm.gain);
        vec32(&mut self.embedding_norm.shift);
        for layer in &mut self.layers {
            for h in &mut layer.attention.heads {
                for m in [&mut h.query, &mut h.key, &mut h.value, &mut h.output] {
                    m.round_to_f32();
                }
                for b in [&mut h.query_bias, &mut h.key_bias, &mut h.value_bias] {
                    vec32(b);
                }
            }
            vec32(&mut layer.attention.output_bias);
            vec32(&mut layer.attention.norm.gain);
            vec32(&mut layer.attention.norm.shift);
            layer.ffn.input.round_to_f32();
            layer.ffn.output.round_to_f32();
            vec32(&mut layer.ffn.input_bias);
            vec32(&mut layer.ffn.output_bias);
            vec32(&mut layer.ffn.norm.gain);
            vec32(&mut layer.ffn.norm.shift);
        }
        self.head.pool.round_to_f32();
        self.head.classifier.round_to_f32();
        vec32(&mut self.head.pool_bias);
        vec32(&mut self.head.classifier_bias);
    }

    /// Physically remove the units whose mask is zero.
    ///
    /// Surviving units keep their order. A surviving mask value other than 1
    /// is folded into the unit's output projection, so the returned model
    /// computes exactly the masked function.
    pub fn materialize(&self, masks: &MaskState) -> Result<EncoderModel> {
        masks.check_matches(self)?;
        let mut out = self.clone();
        for (l, layer) in out.layers.iter_mut().enumerate() {
            let heads = std::mem::take(&mut layer.attention.heads);
            layer.attention.heads = heads
                .into_iter()
                .zip(&masks.heads[l])
                .filter(|(_, &m)| m != 0.0)
                .map(|(mut h, &m)| {
                    if m != 1.0 {
                        h.output.scale(m);
                    }
                    h
                })
                .collect();

            let keep: Vec<usize> = (0..layer.ffn.num_neurons())
                .filter(|&i| masks.neurons[l][i] != 0.0)
                .collect();
            let ffn = &mut layer.ffn;
            let mut output = ffn.output.select_columns(&keep);
            for (c, &i) in keep.iter().enumerate() {
                let m = masks.neurons[l][i];
                if m != 1.0 {
                    for r in 0..output.rows() {
                        output[(r, c)] *= m;
                    }
                }
            }
            ffn.input = ffn.input.select_rows(&keep);
            ffn.input_bias = keep.iter().map(|&i| ffn.input_bias[i]).collect();
            ffn.output = output;
        }
        Ok(out)
    }

    /// Remove the listed units (indices into the current sub-layer) in place.
    pub fn remove_units(&mut self, layer: usize, kind: SublayerKind, remove: &[usize]) {
        if remove.is_empty() {
            return;
        }
        let n = self.units_in(layer, kind);
        let keep: Vec<usize> = (0..n).filter(|i| !remove.contains(i)).collect();
        match kind {
            SublayerKind::Attention => {
                let heads = std::mem::take(&mut self.layers[layer].attention.heads);
                self.layers[layer].attention.heads = heads
                    .into_iter()
                    .enumerate()
                    .filter(|(i, _)| !remove.contains(i))
                    .map(|(_, h)| h)
                    .collect();
            }
            SublayerKind::FeedForward => {
                let ffn = &mut self.layers[layer].ffn;
                ffn.input = ffn.input.select_rows(&keep);
                ffn.input_bias = keep.iter().map(|&i| ffn.input_bias[i]).collect();
                ffn.output = ffn.output.select_columns(&keep);
            }
        }
    }
}
