//! Labeled token-id samples in JSON Lines form: `{"ids": [...], "label": c}`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    ids: Vec<u32>,
    label: usize,
}

/// One sequence, padded with token 0 beyond `valid_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub ids: Vec<u32>,
    pub valid_len: usize,
    pub label: usize,
}

impl Sample {
    pub fn new(ids: Vec<u32>, label: usize) -> Self {
        let valid_len = ids.len();
        Self {
            ids,
            valid_len,
            label,
        }
    }

    pub fn padded_to(mut self, len: usize) -> Self {
        if self.ids.len() < len {
            self.ids.resize(len, 0);
        }
        self
    }

    pub fn valid_ids(&self) -> &[u32] {
        &self.ids[..self.valid_len]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// At most `max` samples drawn without replacement, in their original order.
    pub fn subsample(&self, max: usize, seed: u64) -> Dataset {
        if max >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, self.len(), max).into_vec();
        picked.sort_unstable();
        Dataset::new(
            picked
                .into_iter()
                .map(|i| self.samples[i].clone())
                .collect(),
        )
    }

    pub fn total_tokens(&self) -> usize {
        self.samples.iter().map(|s| s.valid_len).sum()
    }

    /// Check every sample against a model configuration.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (n, s) in self.samples.iter().enumerate() {
            validate_sample(s, config).map_err(|e| Error::input(format!("sample {n}: {e}")))?;
        }
        Ok(())
    }

    /// Read a JSONL file. Every sequence is padded with id 0 to the longest
    /// sequence in the file; sequences longer than `max_seq_len` are rejected.
    pub fn load_jsonl(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut samples = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            let sample = Sample::new(rec.ids, rec.label);
            validate_sample(&sample, config)
                .map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            samples.push(sample);
        }
        let longest = samples.iter().map(|s| s.valid_len).max().unwrap_or(0);
        let samples = samples.into_iter().map(|s| s.padded_to(longest)).collect();
        Ok(Self { samples })
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for s in &self.samples {
            let rec = Record {
                ids: s.valid_ids().to_vec(),
                label: s.label,
            };
            serde_json::to_writer(&mut out, &rec).map_err(|e| Error::input(e.to_string()))?;
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }
}

fn validate_sample(s: &Sample, config: &ModelConfig) -> std::result::Result<(), String> {
    if s.valid_len == 0 {
        return Err("empty sequence".into());
    }
    if s.valid_len > s.ids.len() {
        return Err(format!(
            "valid length {} exceeds {} ids",
            s.valid_len,
            s.ids.len()
        ));
    }
    if s.ids.len() > config.max_seq_len {
        return Err(format!(
            "sequence length {} exceeds max_seq_len {}",
            s.ids.len(),
            config.max_seq_len
        ));
    }
    if let Some(&bad) = s.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(format!(
            "token id {bad} out of range for vocab size {}",
            config.vocab_size
        ));
    }
    if s.label >= config.num_classes {
        return Err(format!(
            "label {} out of range for {} classes",
            s.label, config.num_classes
        ));
    }
    Ok(())
}
