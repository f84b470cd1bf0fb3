//! Synthetic encoders and datasets for tests, demos and sweeps.
//!
//! All generators are deterministic in their seed and produce parameters that
//! are exactly representable in `f32`, so a model survives a container
//! round trip unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Sample};
use crate::error::Result;
use crate::model::{
    Attention, AttentionHead, ClassifierHead, EncoderLayer, EncoderModel, FeedForward,
    LayerNormParams, ModelConfig,
};
use crate::runtime;
use crate::tensor::Matrix;

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, std: f64) -> f64 {
        Normal::new(0.0, std)
            .expect("positive std")
            .sample(&mut self.rng)
    }

    fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal(std))
    }

    fn vector(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| self.normal(std)).collect()
    }

    fn norm(&mut self, dim: usize) -> LayerNormParams {
        LayerNormParams {
            gain: (0..dim).map(|_| 1.0 + self.normal(0.1)).collect(),
            shift: self.vector(dim, 0.1),
        }
    }

    fn head(&mut self, d: usize, dh: usize, output_std: f64) -> AttentionHead {
        let proj = 1.0 / (d as f64).sqrt();
        AttentionHead {
            query: self.matrix(dh, d, 2.0 * proj),
            query_bias: self.vector(dh, 0.1),
            key: self.matrix(dh, d, 2.0 * proj),
            key_bias: self.vector(dh, 0.1),
            value: self.matrix(dh, d, proj),
            value_bias: self.vector(dh, 0.1),
            output: self.matrix(d, dh, output_std),
        }
    }
}

/// Random encoder with roughly unit-scale activations.
pub fn random_model(config: &ModelConfig, seed: u64) -> EncoderModel {
    let mut g = Gen::new(seed);
    let (d, dh, n) = (config.embed_dim, config.head_dim, config.ffn_neurons);
    let proj = 1.0 / (d as f64).sqrt();
    let layers = (0..config.num_layers)
        .map(|_| {
            let heads = (0..config.num_heads)
                .map(|_| g.head(d, dh, 1.0 / ((config.num_heads * dh) as f64).sqrt()))
                .collect();
            let attention = Attention {
                heads,
                output_bias: g.vector(d, 0.1),
                norm: g.norm(d),
            };
            let ffn = FeedForward {
                input: g.matrix(n, d, 1.5 * proj),
                input_bias: g.vector(n, 0.3),
                output: g.matrix(d, n, 1.0 / (n as f64).sqrt()),
                output_bias: g.vector(d, 0.1),
                norm: g.norm(d),
            };
            EncoderLayer { attention, ffn }
        })
        .collect();
    let mut model = EncoderModel {
        config: config.clone(),
        token_embeddings: g.matrix(config.vocab_size, d, 1.0),
        position_embeddings: g.matrix(config.max_seq_len, d, 0.5),
        embedding_norm: g.norm(d),
        layers,
        head: ClassifierHead {
            pool: g.matrix(d, d, 1.5 * proj),
            pool_bias: g.vector(d, 0.1),
            classifier: g.matrix(config.num_classes, d, 2.0 * proj),
            classifier_bias: g.vector(config.num_classes, 0.1),
        },
    };
    model.round_to_f32();
    model
}

/// Random sequences with lengths in `min_len..=max_len`; labels are 0.
pub fn random_samples(
    config: &ModelConfig,
    count: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = max_len.min(config.max_seq_len).max(1);
    let min_len = min_len.clamp(1, max_len);
    (0..count)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            let ids = (0..len)
                .map(|_| rng.random_range(0..config.vocab_size as u32))
                .collect();
            Sample::new(ids, 0)
        })
        .collect()
}

/// A dataset padded to its longest sequence and labeled with the model's
/// own predictions, so the teacher scores 100% on it.
pub fn labeled_dataset(
    model: &EncoderModel,
    count: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut samples = random_samples(&model.config, count, min_len, max_len, seed);
    let longest = samples.iter().map(|s| s.valid_len).max().unwrap_or(0);
    for s in &mut samples {
        let logits = runtime::logits(model, s, None)?;
        s.label = argmax(&logits);
    }
    Ok(Dataset::new(
        samples.into_iter().map(|s| s.padded_to(longest)).collect(),
    ))
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Duplicate every head and neuron. The original unit keeps `1 - minor_share`
/// of its output projection and the copy (appended after all originals of
/// its sub-layer) gets `minor_share`, so the sum is unchanged. With
/// `minor_share = 0.5` both copies are identical.
pub fn plant_redundancy(model: &EncoderModel, minor_share: f64) -> EncoderModel {
    let major = 1.0 - minor_share;
    let mut out = model.clone();
    for layer in &mut out.layers {
        let mut copies = Vec::with_capacity(layer.attention.heads.len());
        for h in &mut layer.attention.heads {
            let mut copy = h.clone();
            copy.output.scale(minor_share);
            h.output.scale(major);
            copies.push(copy);
        }
        layer.attention.heads.extend(copies);

        let ffn = &mut layer.ffn;
        let input = Matrix::vstack(&[&ffn.input, &ffn.input]).expect("same width");
        let minor = ffn.output.scaled(minor_share);
        let main = ffn.output.scaled(major);
        ffn.output = Matrix::hstack(&[&main, &minor]).expect("same height");
        ffn.input = input;
        ffn.input_bias = [ffn.input_bias.clone(), ffn.input_bias.clone()].concat();
    }
    out.config.num_heads *= 2;
    out.config.ffn_neurons *= 2;
    out.round_to_f32();
    out
}

/// Append `heads` random heads and `neurons` random neurons to every layer,
/// with output projections drawn at standard deviation `output_std`.
pub fn add_noise_units(
    model: &EncoderModel,
    heads: usize,
    neurons: usize,
    output_std: f64,
    seed: u64,
) -> EncoderModel {
    let mut g = Gen::new(seed);
    let mut out = model.clone();
    let (d, dh) = (out.config.embed_dim, out.config.head_dim);
    let proj = 1.0 / (d as f64).sqrt();
    for layer in &mut out.layers {
        for _ in 0..heads {
            let h = g.head(d, dh, output_std);
            layer.attention.heads.push(h);
        }
        if neurons > 0 {
            let ffn = &mut layer.ffn;
            let extra_in = g.matrix(neurons, d, 1.5 * proj);
            let extra_out = g.matrix(d, neurons, output_std);
            ffn.input = Matrix::vstack(&[&ffn.input, &extra_in]).expect("same width");
            ffn.output = Matrix::hstack(&[&ffn.output, &extra_out]).expect("same height");
            ffn.input_bias.extend(g.vector(neurons, 0.3));
        }
    }
    out.config.num_heads += heads;
    out.config.ffn_neurons += neurons;
    out.round_to_f32();
    out
}

/// Small configuration used throughout the test-suite.
pub fn toy_config(
    layers: usize,
    heads: usize,
    head_dim: usize,
    neurons: usize,
    classes: usize,
) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        num_heads: heads,
        head_dim,
        ffn_neurons: neurons,
        embed_dim: heads * head_dim,
        vocab_size: 50,
        max_seq_len: 16,
        num_classes: classes,
        layernorm_eps: 1e-5,
        avg_seq_len: 8,
    }
}
