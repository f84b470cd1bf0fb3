//! FLOPs-normalized unit scores and the ascending threshold sweep that picks
//! which units to prune under a budget.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::knowledge::KnowledgeTable;
use crate::model::{SublayerId, SublayerKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub head: Vec<f64>,
    pub neuron: Vec<f64>,
    /// Whether each unit takes part in the search.
    pub head_candidate: Vec<bool>,
    pub neuron_candidate: Vec<bool>,
    pub lambda: f64,
    pub mu: f64,
    pub f_head: u64,
    pub f_neuron: u64,
}

impl ScoreTable {
    /// Scores given directly, every unit a candidate.
    pub fn from_scores(head: Vec<f64>, neuron: Vec<f64>, f_head: u64, f_neuron: u64) -> Self {
        Self {
            head_candidate: vec![true; head.len()],
            neuron_candidate: vec![true; neuron.len()],
            head,
            neuron,
            lambda: 0.0,
            mu: 1.0,
            f_head,
            f_neuron,
        }
    }

    /// Make every unit a candidate, including those of processed sub-layers
    /// (which keep the score their zero knowledge gives them).
    pub fn with_all_candidates(mut self) -> Self {
        self.head_candidate.fill(true);
        self.neuron_candidate.fill(true);
        self
    }

    /// FLOPs of all candidates.
    pub fn candidate_flops(&self) -> u64 {
        let nh = self.head_candidate.iter().filter(|c| **c).count() as u64;
        let nn = self.neuron_candidate.iter().filter(|c| **c).count() as u64;
        nh * self.f_head + nn * self.f_neuron
    }
}

/// `S_neuron = (K_pred + λ·K_rep)/F_neuron` and
/// `S_head = μ·(K_pred + λ·K_rep)/F_head`. Units of processed sub-layers are
/// scored but excluded from the candidate set.
pub fn score(
    knowledge: &KnowledgeTable,
    lambda: f64,
    mu: f64,
    f_head: u64,
    f_neuron: u64,
) -> Result<ScoreTable> {
    if f_head == 0 || f_neuron == 0 {
        return Err(Error::contract("unit FLOPs must be positive"));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::contract(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::contract(format!("mu must be positive, got {mu}")));
    }
    let combine = |pred: &[f64], rep: &[f64], scale: f64| -> Vec<f64> {
        pred.iter()
            .zip(rep)
            .map(|(p, r)| scale * (p + lambda * r))
            .collect()
    };
    let head = combine(
        &knowledge.pred_head,
        &knowledge.rep_head,
        mu / f_head as f64,
    );
    let neuron = combine(
        &knowledge.pred_neuron,
        &knowledge.rep_neuron,
        1.0 / f_neuron as f64,
    );
    if head
        .iter()
        .chain(&neuron)
        .any(|s| !s.is_finite() || *s < 0.0)
    {
        return Err(Error::Numerical(
            "scores must be finite and non-negative".into(),
        ));
    }

    let layout = &knowledge.layout;
    let mut head_candidate = vec![true; head.len()];
    let mut neuron_candidate = vec![true; neuron.len()];
    for id in SublayerId::all(layout.num_layers()) {
        if knowledge.is_processed(id) {
            let flags = match id.kind {
                SublayerKind::Attention => &mut head_candidate,
                SublayerKind::FeedForward => &mut neuron_candidate,
            };
            flags[layout.range(id)].fill(false);
        }
    }
    Ok(ScoreTable {
        head,
        neuron,
        head_candidate,
        neuron_candidate,
        lambda,
        mu,
        f_head,
        f_neuron,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Flat head indices to prune, ascending.
    pub heads: Vec<usize>,
    pub neurons: Vec<usize>,
    /// `-inf` when nothing needs pruning, `+inf` when everything goes.
    pub nu_star: f64,
    /// FLOPs of the candidates that survive.
    pub projected_flops: u64,
}

impl Selection {
    pub fn is_empty(&self) -> bool {
        self.heads.is_empty() && self.neurons.is_empty()
    }
}

#[derive(Clone, Copy)]
struct Entry {
    score: f64,
    /// 0 for neurons, 1 for heads.
    kind: u8,
    index: usize,
}

fn sorted_candidates(scores: &ScoreTable) -> Vec<Entry> {
    let neurons = scores
        .neuron
        .iter()
        .zip(&scores.neuron_candidate)
        .enumerate()
        .filter(|(_, (_, c))| **c)
        .map(|(index, (&score, _))| Entry {
            score,
            kind: 0,
            index,
        });
    let heads = scores
        .head
        .iter()
        .zip(&scores.head_candidate)
        .enumerate()
        .filter(|(_, (_, c))| **c)
        .map(|(index, (&score, _))| Entry {
            score,
            kind: 1,
            index,
        });
    let mut all: Vec<Entry> = neurons.chain(heads).collect();
    all.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.kind.cmp(&b.kind))
            .then(a.index.cmp(&b.index))
    });
    all
}

/// Ascending threshold sweep. `ν` walks the sorted candidate scores until the
/// FLOPs of candidates scoring `≥ ν` fit in `tau`; candidates scoring `< ν*`
/// are selected. Units tied with `ν*` survive.
pub fn search_threshold(scores: &ScoreTable, tau: u64) -> Selection {
    let sorted = sorted_candidates(scores);
    let cost = |e: &Entry| {
        if e.kind == 1 {
            scores.f_head
        } else {
            scores.f_neuron
        }
    };
    let mut f: u64 = sorted.iter().map(cost).sum();
    let mut nu = f64::NEG_INFINITY;
    // Entries before `below` score strictly less than the current ν.
    let mut below = 0;
    let mut p = 0;
    while f > tau {
        if p == sorted.len() {
            nu = f64::INFINITY;
            f = 0;
            below = sorted.len();
            break;
        }
        nu = sorted[p].score;
        while below < sorted.len() && sorted[below].score.total_cmp(&nu) == Ordering::Less {
            f -= cost(&sorted[below]);
            below += 1;
        }
        p += 1;
    }
    let mut heads = Vec::new();
    let mut neurons = Vec::new();
    for e in &sorted[..below] {
        if e.kind == 1 {
            heads.push(e.index);
        } else {
            neurons.push(e.index);
        }
    }
    heads.sort_unstable();
    neurons.sort_unstable();
    Selection {
        heads,
        neurons,
        nu_star: nu,
        projected_flops: f,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::UnitLayout;
    use crate::synth::{random_model, toy_config};

    #[test]
    fn six_heads_example() {
        let s = ScoreTable::from_scores(vec![3.0, 1.0, 6.0, 2.0, 5.0, 4.0], vec![], 10, 1);
        let sel = search_threshold(&s, 35);
        assert_eq!(sel.nu_star, 4.0);
        assert_eq!(sel.heads, vec![0, 1, 3]);
        assert_eq!(sel.projected_flops, 30);
    }

    #[test]
    fn no_pruning_and_everything() {
        let s = ScoreTable::from_scores(vec![1.0, 2.0], vec![0.5, 0.1, 3.0], 10, 2);
        let none = search_threshold(&s, 26);
        assert!(none.is_empty());
        assert_eq!(none.nu_star, f64::NEG_INFINITY);
        let all = search_threshold(&s, 0);
        assert_eq!(all.heads, vec![0, 1]);
        assert_eq!(all.neurons, vec![0, 1, 2]);
        assert_eq!(all.nu_star, f64::INFINITY);
        assert_eq!(all.projected_flops, 0);
    }

    #[test]
    fn ties_are_never_split() {
        // Two equal copies: pruning one would meet the budget, but both share
        // the threshold so both go.
        let s = ScoreTable::from_scores(vec![1.0, 1.0, 5.0], vec![], 10, 1);
        let sel = search_threshold(&s, 20);
        assert_eq!(sel.heads, vec![0, 1]);
        assert_eq!(sel.nu_star, 5.0);
    }

    #[test]
    fn direct_formula() {
        let model = random_model(&toy_config(1, 1, 2, 1, 2), 0);
        let mut k = KnowledgeTable::zeros(UnitLayout::of(&model), vec![false; 2]);
        k.pred_head[0] = 2.0;
        k.rep_head[0] = 4.0;
        let s = score(&k, 0.5, 64.0, 8, 1).unwrap();
        assert_eq!(s.head[0], 32.0);
        assert!(score(&k, 0.5, 64.0, 0, 1).is_err());
    }

    #[test]
    fn processed_sublayers_are_not_candidates() {
        let model = random_model(&toy_config(2, 2, 2, 3, 2), 0);
        let mut processed = vec![false; 4];
        processed[0] = true;
        processed[1] = true;
        let k = KnowledgeTable::zeros(UnitLayout::of(&model), processed);
        let s = score(&k, 1.0, 1.0, 10, 1).unwrap();
        assert_eq!(s.head_candidate, vec![false, false, true, true]);
        assert_eq!(
            s.neuron_candidate,
            vec![false, false, false, true, true, true]
        );
        let sel = search_threshold(&s, 0);
        assert_eq!(sel.heads, vec![2, 3]);
        assert_eq!(sel.neurons, vec![3, 4, 5]);
        assert_eq!(s.with_all_candidates().candidate_flops(), 4 * 10 + 6);
    }
}
