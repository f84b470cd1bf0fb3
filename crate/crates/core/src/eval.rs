//! Accuracy, cross-entropy and divergence from a reference model.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::runtime::{cross_entropy, kl_distill_loss, logits};
use crate::synth::argmax;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Fraction of samples whose argmax logit equals the label.
    pub accuracy: f64,
    /// Mean cross-entropy against the labels.
    pub mean_loss: f64,
    /// Mean `KL(softmax(student) ‖ softmax(reference))`, when reference
    /// logits were given.
    pub mean_kl: Option<f64>,
}

/// Logits of every sample, in dataset order.
pub fn all_logits(model: &EncoderModel, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset
        .samples
        .par_iter()
        .map(|s| logits(model, s, None))
        .collect()
}

pub fn evaluate(
    model: &EncoderModel,
    dataset: &Dataset,
    reference: Option<&[Vec<f64>]>,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::input("evaluation needs at least one sample"));
    }
    if let Some(r) = reference {
        if r.len() != dataset.len() {
            return Err(Error::contract("reference logits do not match the dataset"));
        }
    }
    let z = all_logits(model, dataset)?;
    let n = dataset.len() as f64;
    let mut correct = 0usize;
    let mut loss = 0.0;
    let mut kl = 0.0;
    for (i, (s, z)) in dataset.samples.iter().zip(&z).enumerate() {
        correct += usize::from(argmax(z) == s.label);
        loss += cross_entropy(z, s.label)?;
        if let Some(r) = reference {
            kl += kl_distill_loss(z, &r[i], 1.0)?;
        }
    }
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
        mean_kl: reference.map(|_| kl / n),
    })
}
