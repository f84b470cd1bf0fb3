//! Sub-layerwise pruning from the bottom up, with least-squares
//! reconstruction of each pruned sub-layer's output projections.

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::knowledge::{self, Criterion, SublayerCapture, UnitLayout};
use crate::kpms::{self, Selection};
use crate::model::flops::{
    flops_per_head, flops_per_neuron, model_prunable_flops, rate_from_flops,
};
use crate::model::{total_model_flops, EncoderModel, MaskState, SublayerId, SublayerKind};
use crate::runtime;
use crate::tensor::{frobenius_sq, lstsq, matmul, Matrix};

/// Round to 9 significant digits.
pub fn sig9(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Text form of [`sig9`]: plain decimal for moderate magnitudes, scientific
/// notation otherwise.
pub fn fmt_sig9(x: f64) -> String {
    let r = sig9(x);
    if r == 0.0 || !r.is_finite() || (1e-4..1e15).contains(&r.abs()) {
        format!("{r}")
    } else {
        format!("{r:e}")
    }
}

fn ser_sig9<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(sig9(*x))
}

/// Infinite thresholds are written as the strings `"-inf"` and `"inf"`.
fn ser_threshold<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_infinite() {
        s.serialize_str(if *x > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(sig9(*x))
    }
}

/// How updated weights are stored while pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Round reconstructed projections to `f32`, so the in-memory model is
    /// exactly what the container stores.
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOptions {
    pub gamma: f64,
    pub lambda: f64,
    pub mu: f64,
    pub criterion: Criterion,
    /// Measure once, select globally and commit everything without
    /// reconstruction.
    pub one_shot: bool,
    /// Keep processed units as zero-knowledge candidates and search against
    /// the full budget every iteration instead of the remaining one.
    pub kpms_global: bool,
    pub precision: Precision,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            lambda: 0.00025,
            mu: 64.0,
            criterion: Criterion::KPruning,
            one_shot: false,
            kpms_global: false,
            precision: Precision::F32,
        }
    }
}

/// Budget keeping `fraction` of the model's prunable FLOPs.
pub fn tau_from_keep(model: &EncoderModel, fraction: f64) -> Result<u64> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::input(format!(
            "kept FLOPs fraction must be in [0, 1], got {fraction}"
        )));
    }
    Ok((fraction * model_prunable_flops(model) as f64).floor() as u64)
}

/// Budget removing at least `rate` of the model's prunable FLOPs.
pub fn tau_from_compression(model: &EncoderModel, rate: f64) -> Result<u64> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::input(format!(
            "compression rate must be in [0, 1], got {rate}"
        )));
    }
    tau_from_keep(model, 1.0 - rate)
}

/// Teacher logits and pre-layernorm sub-layer outputs `X + Sub(X)` of the
/// unpruned model on the valid tokens of every sample.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    pub logits: Vec<Vec<f64>>,
    /// `[sample][sub-layer index]`, each `valid_len × d`.
    targets: Vec<Vec<Matrix>>,
}

impl TeacherCache {
    pub fn build(model: &EncoderModel, dataset: &Dataset) -> Result<Self> {
        let per_sample: Vec<(Vec<f64>, Vec<Matrix>)> = dataset
            .samples
            .par_iter()
            .map(|sample| {
                let trace = runtime::forward(model, sample, None, true)?;
                let v = trace.valid_len;
                let targets = trace
                    .layers
                    .iter()
                    .flat_map(|lt| {
                        [
                            lt.attention.residual.slice_rows(0, v),
                            lt.ffn.residual.slice_rows(0, v),
                        ]
                    })
                    .collect();
                Ok((trace.logits, targets))
            })
            .collect::<Result<_>>()?;
        let (logits, targets) = per_sample.into_iter().unzip();
        Ok(Self { logits, targets })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn target(&self, sample: usize, id: SublayerId) -> &Matrix {
        &self.targets[sample][id.index()]
    }

    /// Targets of one sub-layer with all samples' tokens stacked.
    pub fn stacked(&self, id: SublayerId) -> Matrix {
        let parts: Vec<&Matrix> = self.targets.iter().map(|t| &t[id.index()]).collect();
        Matrix::vstack(&parts).expect("equal widths")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    /// Least squares applied.
    Solved,
    /// The solve did not lower the residual; original weights kept.
    Reverted,
    /// Nothing pruned here or below, so the weights are already optimal.
    Skipped,
    /// No units left in the sub-layer.
    Empty,
    /// Reconstruction not run (one-shot mode).
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reconstruction {
    pub residual_before: f64,
    pub residual_after: f64,
    pub outcome: Outcome,
}

struct System {
    p: Matrix,
    q: Matrix,
    w: Matrix,
}

fn stack_system(
    model: &EncoderModel,
    id: SublayerId,
    survivors: &[usize],
    captures: &[SublayerCapture],
    cache: &TeacherCache,
) -> Result<System> {
    if captures.len() != cache.len() {
        return Err(Error::contract(format!(
            "{} captures for {} cached samples",
            captures.len(),
            cache.len()
        )));
    }
    let layer = &model.layers[id.layer];
    if survivors.len() != model.units_in(id.layer, id.kind) {
        return Err(Error::contract(
            "survivor list does not match the sub-layer",
        ));
    }
    let dh = model.config.head_dim;
    let cols: Vec<usize> = match id.kind {
        SublayerKind::Attention => survivors
            .iter()
            .flat_map(|&h| h * dh..(h + 1) * dh)
            .collect(),
        SublayerKind::FeedForward => survivors.to_vec(),
    };
    let ps: Vec<Matrix> = captures
        .iter()
        .map(|c| c.features.select_columns(&cols))
        .collect();
    let xs: Vec<&Matrix> = captures.iter().map(|c| &c.input).collect();
    let p = Matrix::vstack(&ps.iter().collect::<Vec<_>>())?;
    let x = Matrix::vstack(&xs)?;
    let bias = match id.kind {
        SublayerKind::Attention => &layer.attention.output_bias,
        SublayerKind::FeedForward => &layer.ffn.output_bias,
    };
    let mut q = cache.stacked(id).sub(&x)?;
    q.add_row_vector(&bias.iter().map(|b| -b).collect::<Vec<_>>())?;
    let w = match id.kind {
        SublayerKind::Attention => {
            let blocks: Vec<Matrix> = layer
                .attention
                .heads
                .iter()
                .map(|h| h.output.transpose())
                .collect();
            if blocks.is_empty() {
                Matrix::zeros(0, model.config.embed_dim)
            } else {
                Matrix::vstack(&blocks.iter().collect::<Vec<_>>())?
            }
        }
        SublayerKind::FeedForward => layer.ffn.output.transpose(),
    };
    Ok(System { p, q, w })
}

fn residual(sys: &System, w: &Matrix) -> Result<f64> {
    if w.rows() == 0 {
        return Ok(frobenius_sq(&sys.q));
    }
    Ok(frobenius_sq(&matmul(&sys.p, w)?.sub(&sys.q)?))
}

fn write_back(model: &mut EncoderModel, id: SublayerId, w: &Matrix) {
    let layer = &mut model.layers[id.layer];
    match id.kind {
        SublayerKind::Attention => {
            let dh = model.config.head_dim;
            for (k, head) in layer.attention.heads.iter_mut().enumerate() {
                head.output = w.slice_rows(k * dh, (k + 1) * dh).transpose();
            }
        }
        SublayerKind::FeedForward => layer.ffn.output = w.transpose(),
    }
}

/// Eq-5 residual `Σ‖T − (X + Sub(X))‖²` of a sub-layer under the model's
/// current weights.
pub fn sublayer_residual(
    model: &EncoderModel,
    id: SublayerId,
    captures: &[SublayerCapture],
    cache: &TeacherCache,
) -> Result<f64> {
    let all: Vec<usize> = (0..model.units_in(id.layer, id.kind)).collect();
    let sys = stack_system(model, id, &all, captures, cache)?;
    residual(&sys, &sys.w)
}

fn reconstruct(
    model: &mut EncoderModel,
    id: SublayerId,
    survivors: &[usize],
    captures: &[SublayerCapture],
    cache: &TeacherCache,
    precision: Precision,
) -> Result<Reconstruction> {
    let sys = stack_system(model, id, survivors, captures, cache)?;
    let before = residual(&sys, &sys.w)?;
    if survivors.is_empty() {
        return Ok(Reconstruction {
            residual_before: before,
            residual_after: before,
            outcome: Outcome::Empty,
        });
    }
    let mut w = lstsq(&sys.p, &sys.q, 0.0)?;
    if precision == Precision::F32 {
        w.round_to_f32();
    }
    let after = residual(&sys, &w)?;
    if !w.is_finite() || after.is_nan() || after > before {
        return Ok(Reconstruction {
            residual_before: before,
            residual_after: before,
            outcome: Outcome::Reverted,
        });
    }
    write_back(model, id, &w);
    Ok(Reconstruction {
        residual_before: before,
        residual_after: after,
        outcome: Outcome::Solved,
    })
}

/// Refit the output projections of the surviving heads of `layer` so the
/// sub-layer output matches the teacher's on the captured tokens.
///
/// `model` must already have the pruned heads removed; `survivors` lists, in
/// order, the positions of the remaining heads within the captured features.
/// The output bias is left unchanged.
pub fn reconstruct_mha(
    model: &mut EncoderModel,
    layer: usize,
    survivors: &[usize],
    captures: &[SublayerCapture],
    cache: &TeacherCache,
    precision: Precision,
) -> Result<Reconstruction> {
    let id = SublayerId {
        layer,
        kind: SublayerKind::Attention,
    };
    reconstruct(model, id, survivors, captures, cache, precision)
}

/// Feed-forward analogue of [`reconstruct_mha`]: refits the output columns
/// of the surviving neurons.
pub fn reconstruct_ffn(
    model: &mut EncoderModel,
    layer: usize,
    survivors: &[usize],
    captures: &[SublayerCapture],
    cache: &TeacherCache,
    precision: Precision,
) -> Result<Reconstruction> {
    let id = SublayerId {
        layer,
        kind: SublayerKind::FeedForward,
    };
    reconstruct(model, id, survivors, captures, cache, precision)
}

#[derive(Debug, Clone, Serialize)]
pub struct Hyperparameters {
    #[serde(serialize_with = "ser_sig9")]
    pub gamma: f64,
    #[serde(serialize_with = "ser_sig9")]
    pub lambda: f64,
    #[serde(serialize_with = "ser_sig9")]
    pub mu: f64,
    pub tau: u64,
    pub criterion: &'static str,
    pub mode: &'static str,
    pub kpms: &'static str,
    pub precision: Precision,
    pub kl_direction: &'static str,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Iteration {
    pub sublayer: usize,
    pub layer: usize,
    pub kind: SublayerKind,
    #[serde(serialize_with = "ser_threshold")]
    pub nu_star: f64,
    /// Units removed so far, per layer.
    pub pruned_heads: Vec<usize>,
    pub pruned_neurons: Vec<usize>,
    #[serde(serialize_with = "ser_sig9")]
    pub residual_before: f64,
    #[serde(serialize_with = "ser_sig9")]
    pub residual_after: f64,
    pub budget_remaining: u64,
    pub reconstruction: Outcome,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub flops_before: u64,
    pub flops_after: u64,
    #[serde(serialize_with = "ser_sig9")]
    pub compression_rate: f64,
    pub model_flops_before: u64,
    pub model_flops_after: u64,
    /// Sub-layers that lost at least one unit.
    pub sublayers_pruned: usize,
    pub heads_after: Vec<usize>,
    pub neurons_after: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PruneReport {
    pub hyperparameters: Hyperparameters,
    pub iterations: Vec<Iteration>,
    pub summary: Summary,
}

impl PruneReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn local_selection(layout: &UnitLayout, sel: &Selection, id: SublayerId) -> Vec<usize> {
    let range = layout.range(id);
    let flat = match id.kind {
        SublayerKind::Attention => &sel.heads,
        SublayerKind::FeedForward => &sel.neurons,
    };
    flat.iter()
        .filter(|g| range.contains(g))
        .map(|g| g - range.start)
        .collect()
}

fn pruned_counts(original: &EncoderModel, current: &EncoderModel) -> (Vec<usize>, Vec<usize>) {
    let diff = |a: Vec<usize>, b: Vec<usize>| a.iter().zip(&b).map(|(x, y)| x - y).collect();
    (
        diff(original.heads_per_layer(), current.heads_per_layer()),
        diff(original.neurons_per_layer(), current.neurons_per_layer()),
    )
}

fn unit_flops(model: &EncoderModel, kind: SublayerKind) -> u64 {
    match kind {
        SublayerKind::Attention => flops_per_head(&model.config),
        SublayerKind::FeedForward => flops_per_neuron(&model.config),
    }
}

/// Prune `model` so its prunable FLOPs do not exceed `tau`.
pub fn prune_model(
    model: &EncoderModel,
    dataset: &Dataset,
    tau: u64,
    options: &PruneOptions,
) -> Result<(EncoderModel, PruneReport)> {
    if dataset.is_empty() {
        return Err(Error::input("pruning needs at least one sample"));
    }
    if !(options.gamma > 0.0 && options.gamma.is_finite()) {
        return Err(Error::input(format!(
            "gamma must be positive, got {}",
            options.gamma
        )));
    }
    if !(options.lambda >= 0.0 && options.lambda.is_finite()) {
        return Err(Error::input(format!(
            "lambda must be non-negative, got {}",
            options.lambda
        )));
    }
    if !(options.mu > 0.0 && options.mu.is_finite()) {
        return Err(Error::input(format!(
            "mu must be positive, got {}",
            options.mu
        )));
    }
    model.validate()?;
    dataset.validate(&model.config)?;

    let cache = TeacherCache::build(model, dataset)?;
    let lambda = match options.criterion {
        Criterion::KPruning => options.lambda,
        Criterion::MagnitudeGradient => 0.0,
    };
    let f_head = flops_per_head(&model.config);
    let f_neuron = flops_per_neuron(&model.config);
    let flops_before = model_prunable_flops(model);

    let (pruned, iterations) = if options.one_shot {
        one_shot(
            model, dataset, &cache, tau, lambda, f_head, f_neuron, options,
        )?
    } else {
        iterative(
            model, dataset, &cache, tau, lambda, f_head, f_neuron, options,
        )?
    };

    let flops_after = model_prunable_flops(&pruned);
    let sublayers_pruned = SublayerId::all(model.num_layers())
        .filter(|id| pruned.units_in(id.layer, id.kind) < model.units_in(id.layer, id.kind))
        .count();
    let report = PruneReport {
        hyperparameters: Hyperparameters {
            gamma: options.gamma,
            lambda,
            mu: options.mu,
            tau,
            criterion: match options.criterion {
                Criterion::KPruning => "kpruning",
                Criterion::MagnitudeGradient => "magnitude-gradient",
            },
            mode: if options.one_shot {
                "one-shot"
            } else {
                "sublayerwise"
            },
            kpms: if options.kpms_global {
                "global"
            } else {
                "remaining-budget"
            },
            precision: options.precision,
            kl_direction: "KL(student || teacher)",
            samples: dataset.len(),
        },
        iterations,
        summary: Summary {
            flops_before,
            flops_after,
            compression_rate: rate_from_flops(flops_before, flops_after),
            model_flops_before: total_model_flops(model),
            model_flops_after: total_model_flops(&pruned),
            sublayers_pruned,
            heads_after: pruned.heads_per_layer(),
            neurons_after: pruned.neurons_per_layer(),
        },
    };
    Ok((pruned, report))
}

#[allow(clippy::too_many_arguments)]
fn iterative(
    model: &EncoderModel,
    dataset: &Dataset,
    cache: &TeacherCache,
    tau: u64,
    lambda: f64,
    f_head: u64,
    f_neuron: u64,
    options: &PruneOptions,
) -> Result<(EncoderModel, Vec<Iteration>)> {
    let mut current = model.clone();
    let mut processed = vec![false; 2 * model.num_layers()];
    let mut budget = tau;
    let mut committed: u64 = 0;
    let mut dirty = false;
    let mut iterations = Vec::new();

    for id in SublayerId::all(model.num_layers()) {
        let mut masks = MaskState::ones(&current);
        masks.processed = processed.clone();
        let m = knowledge::measure(
            &current,
            &masks,
            dataset,
            &cache.logits,
            options.gamma,
            options.criterion,
            Some(id),
        )?;
        let scores = kpms::score(&m.table, lambda, options.mu, f_head, f_neuron)?;
        let sel = if options.kpms_global {
            kpms::search_threshold(&scores.with_all_candidates(), tau)
        } else {
            kpms::search_threshold(&scores, budget)
        };
        let remove = local_selection(&m.table.layout, &sel, id);
        let n = current.units_in(id.layer, id.kind);
        let survivors: Vec<usize> = (0..n).filter(|i| !remove.contains(i)).collect();
        current.remove_units(id.layer, id.kind, &remove);
        if !remove.is_empty() {
            dirty = true;
        }
        let recon = if dirty {
            reconstruct(
                &mut current,
                id,
                &survivors,
                &m.captures,
                cache,
                options.precision,
            )?
        } else {
            let r = sublayer_residual(&current, id, &m.captures, cache)?;
            Reconstruction {
                residual_before: r,
                residual_after: r,
                outcome: Outcome::Skipped,
            }
        };
        log::info!(
            "{id}: pruned {} of {n}, residual {:.4e} -> {:.4e} ({:?})",
            remove.len(),
            recon.residual_before,
            recon.residual_after,
            recon.outcome
        );

        let kept = survivors.len() as u64 * unit_flops(&current, id.kind);
        committed += kept;
        budget = if options.kpms_global {
            tau.saturating_sub(committed)
        } else {
            budget.checked_sub(kept).ok_or_else(|| {
                Error::Numerical(format!("{id}: survivors exceed the remaining budget"))
            })?
        };
        processed[id.index()] = true;
        let (pruned_heads, pruned_neurons) = pruned_counts(model, &current);
        iterations.push(Iteration {
            sublayer: id.index(),
            layer: id.layer,
            kind: id.kind,
            nu_star: sel.nu_star,
            pruned_heads,
            pruned_neurons,
            residual_before: recon.residual_before,
            residual_after: recon.residual_after,
            budget_remaining: budget,
            reconstruction: recon.outcome,
        });
    }
    Ok((current, iterations))
}

#[allow(clippy::too_many_arguments)]
fn one_shot(
    model: &EncoderModel,
    dataset: &Dataset,
    cache: &TeacherCache,
    tau: u64,
    lambda: f64,
    f_head: u64,
    f_neuron: u64,
    options: &PruneOptions,
) -> Result<(EncoderModel, Vec<Iteration>)> {
    let masks = MaskState::ones(model);
    let m = knowledge::measure(
        model,
        &masks,
        dataset,
        &cache.logits,
        options.gamma,
        options.criterion,
        None,
    )?;
    let scores = kpms::score(&m.table, lambda, options.mu, f_head, f_neuron)?;
    let sel = kpms::search_threshold(&scores, tau);
    let mut current = model.clone();
    let ids: Vec<SublayerId> = SublayerId::all(model.num_layers()).collect();
    for &id in &ids {
        current.remove_units(
            id.layer,
            id.kind,
            &local_selection(&m.table.layout, &sel, id),
        );
    }

    // Residuals of the pruned model, for the report only.
    let pruned_masks = MaskState::ones(&current);
    let captures: Vec<Vec<SublayerCapture>> = dataset
        .samples
        .par_iter()
        .map(|s| {
            let trace = runtime::forward(&current, s, Some(&pruned_masks), true)?;
            Ok(ids
                .iter()
                .map(|&id| SublayerCapture::from_trace(&trace, id))
                .collect())
        })
        .collect::<Result<_>>()?;
    let (pruned_heads, pruned_neurons) = pruned_counts(model, &current);
    let mut budget = tau;
    let mut iterations = Vec::new();
    for &id in &ids {
        let caps: Vec<SublayerCapture> = captures.iter().map(|c| c[id.index()].clone()).collect();
        let r = sublayer_residual(&current, id, &caps, cache)?;
        let kept = current.units_in(id.layer, id.kind) as u64 * unit_flops(&current, id.kind);
        budget = budget.saturating_sub(kept);
        iterations.push(Iteration {
            sublayer: id.index(),
            layer: id.layer,
            kind: id.kind,
            nu_star: sel.nu_star,
            pruned_heads: pruned_heads.clone(),
            pruned_neurons: pruned_neurons.clone(),
            residual_before: r,
            residual_after: r,
            budget_remaining: budget,
            reconstruction: Outcome::Disabled,
        });
    }
    Ok((current, iterations))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_rounds() {
        assert_eq!(sig9(1.0 / 3.0), 0.333333333);
        assert_eq!(sig9(123456789012.0), 123456789000.0);
        assert_eq!(sig9(0.0), 0.0);
        assert!(sig9(f64::NAN).is_nan());
    }

    #[test]
    fn sig9_text() {
        assert_eq!(fmt_sig9(0.5), "0.5");
        assert_eq!(fmt_sig9(5.795139791e-15), "5.79513979e-15");
        assert_eq!(fmt_sig9(2.0e20), "2e20");
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(f64::INFINITY), "inf");
    }

    #[test]
    fn thresholds_serialize() {
        let v = |x: f64| {
            let mut out = Vec::new();
            ser_threshold(&x, &mut serde_json::Serializer::new(&mut out)).unwrap();
            String::from_utf8(out).unwrap()
        };
        assert_eq!(v(f64::INFINITY), "\"inf\"");
        assert_eq!(v(f64::NEG_INFINITY), "\"-inf\"");
        assert_eq!(v(0.125), "0.125");
    }
}
