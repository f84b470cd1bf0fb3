use std::fmt;

use serde::{Deserialize, Serialize};

use super::EncoderModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SublayerKind {
    #[serde(rename = "mha")]
    Attention,
    #[serde(rename = "ffn")]
    FeedForward,
}

impl SublayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SublayerKind::Attention => "mha",
            SublayerKind::FeedForward => "ffn",
        }
    }
}

impl fmt::Display for SublayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Position of a sub-layer in network order: MHA₀, FFN₀, MHA₁, FFN₁, …
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SublayerId {
    pub layer: usize,
    pub kind: SublayerKind,
}

impl SublayerId {
    pub fn from_index(index: usize) -> Self {
        let kind = if index.is_multiple_of(2) {
            SublayerKind::Attention
        } else {
            SublayerKind::FeedForward
        };
        Self {
            layer: index / 2,
            kind,
        }
    }

    pub fn index(self) -> usize {
        2 * self.layer + usize::from(self.kind == SublayerKind::FeedForward)
    }

    pub fn all(num_layers: usize) -> impl Iterator<Item = SublayerId> {
        (0..2 * num_layers).map(SublayerId::from_index)
    }
}

impl fmt::Display for SublayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind, self.layer)
    }
}

/// Mask variables for every head (`ζ`) and neuron (`ξ`), plus which
/// sub-layers have already been pruned and reconstructed.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub heads: Vec<Vec<f64>>,
    pub neurons: Vec<Vec<f64>>,
    /// Indexed by [`SublayerId::index`].
    pub processed: Vec<bool>,
}

impl MaskState {
    /// All masks 1, nothing processed.
    pub fn ones(model: &EncoderModel) -> Self {
        Self {
            heads: model
                .heads_per_layer()
                .into_iter()
                .map(|n| vec![1.0; n])
                .collect(),
            neurons: model
                .neurons_per_layer()
                .into_iter()
                .map(|n| vec![1.0; n])
                .collect(),
            processed: vec![false; 2 * model.num_layers()],
        }
    }

    pub fn get(&self, id: SublayerId) -> &[f64] {
        match id.kind {
            SublayerKind::Attention => &self.heads[id.layer],
            SublayerKind::FeedForward => &self.neurons[id.layer],
        }
    }

    pub fn get_mut(&mut self, id: SublayerId) -> &mut Vec<f64> {
        match id.kind {
            SublayerKind::Attention => &mut self.heads[id.layer],
            SublayerKind::FeedForward => &mut self.neurons[id.layer],
        }
    }

    pub fn is_processed(&self, id: SublayerId) -> bool {
        self.processed.get(id.index()).copied().unwrap_or(false)
    }

    pub fn check_matches(&self, model: &EncoderModel) -> Result<()> {
        let heads: Vec<usize> = self.heads.iter().map(Vec::len).collect();
        let neurons: Vec<usize> = self.neurons.iter().map(Vec::len).collect();
        if heads != model.heads_per_layer() || neurons != model.neurons_per_layer() {
            return Err(Error::contract(format!(
                "mask shape heads={heads:?} neurons={neurons:?} does not match model heads={:?} neurons={:?}",
                model.heads_per_layer(),
                model.neurons_per_layer()
            )));
        }
        if self.processed.len() != 2 * model.num_layers() {
            return Err(Error::contract(
                "processed flags do not cover every sub-layer",
            ));
        }
        Ok(())
    }

    /// Number of units with a nonzero mask, per kind.
    pub fn surviving(&self) -> (usize, usize) {
        let count = |v: &Vec<Vec<f64>>| v.iter().flatten().filter(|&&m| m != 0.0).count();
        (count(&self.heads), count(&self.neurons))
    }

    pub fn all_ones(&self) -> bool {
        self.heads
            .iter()
            .chain(&self.neurons)
            .flatten()
            .all(|&m| m == 1.0)
    }
}
