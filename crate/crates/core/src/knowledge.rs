//! Predictive (Fisher) and representational (output-norm) knowledge of every
//! head and neuron, measured over a sample dataset.

use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::kpms::ScoreTable;
use crate::model::{EncoderModel, MaskState, SublayerId, SublayerKind};
use crate::runtime::{self, ForwardTrace};
use crate::tensor::{dot, frobenius_sq, matmul_transb, Matrix};

/// Samples per work item. Partial sums are formed per chunk in sample order
/// and then combined pairwise, so results do not depend on the thread count.
const CHUNK: usize = 16;

/// How unit importance is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Criterion {
    /// Fisher approximation of the distillation loss plus output norms.
    #[default]
    KPruning,
    /// `|mean ∂CE/∂m|` against the sample labels; representational knowledge
    /// is still measured but callers should weight it by 0.
    MagnitudeGradient,
}

/// Flat numbering of heads and neurons, layer-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitLayout {
    head_offsets: Vec<usize>,
    neuron_offsets: Vec<usize>,
}

fn offsets(counts: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(counts.len() + 1);
    out.push(0);
    for c in counts {
        out.push(out.last().unwrap() + c);
    }
    out
}

fn locate(offsets: &[usize], index: usize) -> (usize, usize) {
    let layer = offsets.partition_point(|&o| o <= index) - 1;
    (layer, index - offsets[layer])
}

impl UnitLayout {
    /// Layout from per-layer unit counts; both slices need one entry per layer.
    pub fn new(heads_per_layer: &[usize], neurons_per_layer: &[usize]) -> Self {
        assert_eq!(
            heads_per_layer.len(),
            neurons_per_layer.len(),
            "layer counts differ"
        );
        Self {
            head_offsets: offsets(heads_per_layer),
            neuron_offsets: offsets(neurons_per_layer),
        }
    }

    pub fn of(model: &EncoderModel) -> Self {
        Self::new(&model.heads_per_layer(), &model.neurons_per_layer())
    }

    pub fn num_layers(&self) -> usize {
        self.head_offsets.len() - 1
    }

    pub fn num_heads(&self) -> usize {
        *self.head_offsets.last().unwrap()
    }

    pub fn num_neurons(&self) -> usize {
        *self.neuron_offsets.last().unwrap()
    }

    pub fn head_index(&self, layer: usize, head: usize) -> usize {
        self.head_offsets[layer] + head
    }

    pub fn neuron_index(&self, layer: usize, neuron: usize) -> usize {
        self.neuron_offsets[layer] + neuron
    }

    /// `(layer, head)` of a flat head index.
    pub fn head_unit(&self, index: usize) -> (usize, usize) {
        assert!(index < self.num_heads(), "head index {index} out of range");
        locate(&self.head_offsets, index)
    }

    pub fn neuron_unit(&self, index: usize) -> (usize, usize) {
        assert!(
            index < self.num_neurons(),
            "neuron index {index} out of range"
        );
        locate(&self.neuron_offsets, index)
    }

    /// Flat indices of the units of one sub-layer, in the head or neuron
    /// numbering depending on its kind.
    pub fn range(&self, id: SublayerId) -> Range<usize> {
        let o = match id.kind {
            SublayerKind::Attention => &self.head_offsets,
            SublayerKind::FeedForward => &self.neuron_offsets,
        };
        o[id.layer]..o[id.layer + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeTable {
    pub layout: UnitLayout,
    pub pred_head: Vec<f64>,
    pub rep_head: Vec<f64>,
    pub pred_neuron: Vec<f64>,
    pub rep_neuron: Vec<f64>,
    /// Per sub-layer, indexed by [`SublayerId::index`]. Units of processed
    /// sub-layers carry zero knowledge and are not pruning candidates.
    pub processed: Vec<bool>,
}

impl KnowledgeTable {
    pub fn zeros(layout: UnitLayout, processed: Vec<bool>) -> Self {
        Self {
            pred_head: vec![0.0; layout.num_heads()],
            rep_head: vec![0.0; layout.num_heads()],
            pred_neuron: vec![0.0; layout.num_neurons()],
            rep_neuron: vec![0.0; layout.num_neurons()],
            layout,
            processed,
        }
    }

    pub fn is_processed(&self, id: SublayerId) -> bool {
        self.processed.get(id.index()).copied().unwrap_or(false)
    }

    /// Multiply every entry by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| x * c).collect();
        Self {
            pred_head: s(&self.pred_head),
            rep_head: s(&self.rep_head),
            pred_neuron: s(&self.pred_neuron),
            rep_neuron: s(&self.rep_neuron),
            ..self.clone()
        }
    }

    /// Write one CSV row per unit: layer, sublayer_kind, unit_index, k_pred,
    /// k_rep, score.
    pub fn write_csv<W: Write>(&self, scores: &ScoreTable, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
        w.write_record([
            "layer",
            "sublayer_kind",
            "unit_index",
            "k_pred",
            "k_rep",
            "score",
        ])
        .map_err(csv_err)?;
        for id in SublayerId::all(self.layout.num_layers()) {
            let (pred, rep, score) = match id.kind {
                SublayerKind::Attention => (&self.pred_head, &self.rep_head, &scores.head),
                SublayerKind::FeedForward => (&self.pred_neuron, &self.rep_neuron, &scores.neuron),
            };
            for (unit, g) in self.layout.range(id).enumerate() {
                w.write_record([
                    id.layer.to_string(),
                    id.kind.to_string(),
                    unit.to_string(),
                    crate::kpp::fmt_sig9(pred[g]),
                    crate::kpp::fmt_sig9(rep[g]),
                    crate::kpp::fmt_sig9(score[g]),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()
            .map_err(|e| Error::Numerical(format!("csv write failed: {e}")))
    }
}

/// Input and unit features of one sub-layer on the valid tokens of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SublayerCapture {
    /// `X_S` (`valid_len × d`).
    pub input: Matrix,
    /// Attention: head features `[f_1 | f_2 | …]` (`valid_len × H·d_h`).
    /// Feed-forward: neuron features `g` (`valid_len × N`).
    pub features: Matrix,
}

impl SublayerCapture {
    pub fn from_trace(trace: &ForwardTrace, id: SublayerId) -> Self {
        let valid = trace.valid_len;
        let lt = &trace.layers[id.layer];
        match id.kind {
            SublayerKind::Attention => {
                let blocks: Vec<Matrix> = lt
                    .attention
                    .features
                    .iter()
                    .map(|f| f.slice_rows(0, valid))
                    .collect();
                let refs: Vec<&Matrix> = blocks.iter().collect();
                let features = if refs.is_empty() {
                    Matrix::zeros(valid, 0)
                } else {
                    Matrix::hstack(&refs).expect("equal heights")
                };
                Self {
                    input: lt.attention.input.slice_rows(0, valid),
                    features,
                }
            }
            SublayerKind::FeedForward => Self {
                input: lt.ffn.input.slice_rows(0, valid),
                features: lt.ffn.features.slice_rows(0, valid),
            },
        }
    }
}

/// Knowledge table plus the retained sub-layer captures, in sample order.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub table: KnowledgeTable,
    pub captures: Vec<SublayerCapture>,
}

#[derive(Clone, Copy)]
enum Predictive<'a> {
    None,
    Distill { teacher: &'a [Vec<f64>], gamma: f64 },
    CrossEntropy,
}

/// Per-unit sums over samples: `[pred_head, rep_head, pred_neuron, rep_neuron]`.
type Sums = [Vec<f64>; 4];

fn add_sums(mut a: Sums, b: &Sums) -> Sums {
    for (x, y) in a.iter_mut().zip(b) {
        for (p, q) in x.iter_mut().zip(y) {
            *p += q;
        }
    }
    a
}

fn pairwise(mut parts: Vec<Sums>) -> Option<Sums> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => add_sums(a, &b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop()
}

/// Squared Frobenius norm of each head's output `f_i·W_outᵢᵀ` over valid rows.
fn head_output_norms(model: &EncoderModel, trace: &ForwardTrace, layer: usize) -> Result<Vec<f64>> {
    let valid = trace.valid_len;
    let att = &trace.layers[layer].attention;
    model.layers[layer]
        .attention
        .heads
        .iter()
        .zip(&att.features)
        .map(|(head, f)| {
            let h = matmul_transb(&f.slice_rows(0, valid), &head.output)?;
            Ok(frobenius_sq(&h))
        })
        .collect()
}

/// `‖v_j‖²·Σ_t g_j(t)²` over valid rows, the norm of the rank-one output.
fn neuron_output_norms(model: &EncoderModel, trace: &ForwardTrace, layer: usize) -> Vec<f64> {
    let g = &trace.layers[layer].ffn.features;
    let out = &model.layers[layer].ffn.output;
    (0..g.cols())
        .map(|j| {
            let v = out.column(j);
            let gsq: f64 = (0..trace.valid_len).map(|t| g[(t, j)] * g[(t, j)]).sum();
            dot(&v, &v) * gsq
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn sample_sums(
    model: &EncoderModel,
    masks: &MaskState,
    layout: &UnitLayout,
    sample: &Sample,
    index: usize,
    predictive: Predictive<'_>,
    representational: bool,
    lowest: Option<SublayerId>,
    retain: Option<SublayerId>,
) -> Result<(Sums, Option<SublayerCapture>)> {
    let mut sums: Sums = [
        vec![0.0; layout.num_heads()],
        vec![0.0; layout.num_heads()],
        vec![0.0; layout.num_neurons()],
        vec![0.0; layout.num_neurons()],
    ];
    let trace = runtime::forward(model, sample, Some(masks), true)?;

    let grads = match (predictive, lowest) {
        (Predictive::None, _) | (_, None) => None,
        (Predictive::Distill { teacher, gamma }, Some(low)) => {
            let dz = runtime::kl_distill_grad(&trace.logits, &teacher[index], gamma)?;
            Some((
                runtime::backward_masks(model, &trace, masks, &dz, low)?,
                true,
            ))
        }
        (Predictive::CrossEntropy, Some(low)) => {
            let dz = runtime::cross_entropy_grad(&trace.logits, sample.label)?;
            Some((
                runtime::backward_masks(model, &trace, masks, &dz, low)?,
                false,
            ))
        }
    };

    for id in SublayerId::all(model.num_layers()) {
        if masks.is_processed(id) {
            continue;
        }
        let range = layout.range(id);
        let (pred, rep) = match id.kind {
            SublayerKind::Attention => (0, 1),
            SublayerKind::FeedForward => (2, 3),
        };
        if let Some((g, square)) = &grads {
            let g = match id.kind {
                SublayerKind::Attention => &g.heads[id.layer],
                SublayerKind::FeedForward => &g.neurons[id.layer],
            };
            for (dst, &x) in sums[pred][range.clone()].iter_mut().zip(g) {
                *dst = if *square { 0.5 * x * x } else { x };
            }
        }
        if representational {
            let norms = match id.kind {
                SublayerKind::Attention => head_output_norms(model, &trace, id.layer)?,
                SublayerKind::FeedForward => neuron_output_norms(model, &trace, id.layer),
            };
            sums[rep][range].copy_from_slice(&norms);
        }
    }
    let capture = retain.map(|id| SublayerCapture::from_trace(&trace, id));
    Ok((sums, capture))
}

fn run(
    model: &EncoderModel,
    masks: &MaskState,
    dataset: &Dataset,
    predictive: Predictive<'_>,
    representational: bool,
    retain: Option<SublayerId>,
) -> Result<Measurement> {
    if dataset.is_empty() {
        return Err(Error::input(
            "knowledge measurement needs at least one sample",
        ));
    }
    masks.check_matches(model)?;
    if let Predictive::Distill { teacher, .. } = predictive {
        if teacher.len() != dataset.len() {
            return Err(Error::contract(format!(
                "{} teacher logit vectors for {} samples",
                teacher.len(),
                dataset.len()
            )));
        }
    }
    let layout = UnitLayout::of(model);
    let lowest = SublayerId::all(model.num_layers()).find(|id| !masks.is_processed(*id));

    let chunks: Vec<(Sums, Vec<SublayerCapture>)> = dataset
        .samples
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut acc: Option<Sums> = None;
            let mut caps = Vec::new();
            for (k, sample) in chunk.iter().enumerate() {
                let (s, cap) = sample_sums(
                    model,
                    masks,
                    &layout,
                    sample,
                    c * CHUNK + k,
                    predictive,
                    representational,
                    lowest,
                    retain,
                )?;
                acc = Some(match acc {
                    None => s,
                    Some(a) => add_sums(a, &s),
                });
                caps.extend(cap);
            }
            Ok((acc.expect("chunks are non-empty"), caps))
        })
        .collect::<Result<_>>()?;

    let mut captures = Vec::new();
    let mut parts = Vec::with_capacity(chunks.len());
    for (s, caps) in chunks {
        parts.push(s);
        captures.extend(caps);
    }
    let [pred_head, rep_head, pred_neuron, rep_neuron] = pairwise(parts).expect("non-empty");
    let n = dataset.len() as f64;
    let finish = |v: Vec<f64>, abs: bool| -> Vec<f64> {
        v.into_iter()
            .map(|x| if abs { (x / n).abs() } else { x / n })
            .collect()
    };
    let abs = matches!(predictive, Predictive::CrossEntropy);
    let table = KnowledgeTable {
        pred_head: finish(pred_head, abs),
        rep_head: finish(rep_head, false),
        pred_neuron: finish(pred_neuron, abs),
        rep_neuron: finish(rep_neuron, false),
        layout,
        processed: masks.processed.clone(),
    };
    if [
        &table.pred_head,
        &table.rep_head,
        &table.pred_neuron,
        &table.rep_neuron,
    ]
    .iter()
    .any(|v| v.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::Numerical("non-finite knowledge value".into()));
    }
    Ok(Measurement { table, captures })
}

/// Both knowledge kinds from one captured forward per sample, optionally
/// retaining the captures of sub-layer `retain` for reconstruction.
pub fn measure(
    model: &EncoderModel,
    masks: &MaskState,
    dataset: &Dataset,
    teacher_logits: &[Vec<f64>],
    gamma: f64,
    criterion: Criterion,
    retain: Option<SublayerId>,
) -> Result<Measurement> {
    let predictive = match criterion {
        Criterion::KPruning => Predictive::Distill {
            teacher: teacher_logits,
            gamma,
        },
        Criterion::MagnitudeGradient => Predictive::CrossEntropy,
    };
    run(model, masks, dataset, predictive, true, retain)
}

/// `K_pred` per unit: the sample mean of `½·(∂K/∂m)²`.
pub fn measure_predictive(
    model: &EncoderModel,
    masks: &MaskState,
    dataset: &Dataset,
    teacher_logits: &[Vec<f64>],
    gamma: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let predictive = Predictive::Distill {
        teacher: teacher_logits,
        gamma,
    };
    let t = run(model, masks, dataset, predictive, false, None)?.table;
    Ok((t.pred_head, t.pred_neuron))
}

/// `K_rep` per unit: the sample mean of the squared Frobenius norm of the
/// unit's output over valid tokens.
pub fn measure_representational(
    model: &EncoderModel,
    masks: &MaskState,
    dataset: &Dataset,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = run(model, masks, dataset, Predictive::None, true, None)?.table;
    Ok((t.rep_head, t.rep_neuron))
}

/// Magnitude-gradient baseline: `|mean ∂CE/∂m|` per unit.
pub fn measure_magnitude_gradient(
    model: &EncoderModel,
    masks: &MaskState,
    dataset: &Dataset,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = run(model, masks, dataset, Predictive::CrossEntropy, false, None)?.table;
    Ok((t.pred_head, t.pred_neuron))
}
