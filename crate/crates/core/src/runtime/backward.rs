//! Hand-written reverse pass for the fixed encoder architecture.
//!
//! Only mask gradients are produced. Because every mask scales one additive
//! term of its sub-layer, `∂K/∂ζ_i = ⟨∂K/∂M, h_i⟩` and `∂K/∂ξ_i = ⟨∂K/∂F, n_i⟩`;
//! the rest of the pass propagates `∂K/∂X` down through layer norms,
//! residuals, attention and GELU.

use super::forward::{self, ForwardTrace};
use super::loss::{cross_entropy_grad, kl_distill_grad};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, MaskState, SublayerId, SublayerKind};
use crate::tensor::{
    dot, gelu_grad, matmul, matmul_transa, matmul_transb, matvec_trans, LayerNormStats, Matrix,
};

/// Gradient of a scalar loss with respect to every mask variable.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGradients {
    pub heads: Vec<Vec<f64>>,
    pub neurons: Vec<Vec<f64>>,
}

impl MaskGradients {
    fn zeros(model: &EncoderModel) -> Self {
        Self {
            heads: model
                .heads_per_layer()
                .into_iter()
                .map(|n| vec![0.0; n])
                .collect(),
            neurons: model
                .neurons_per_layer()
                .into_iter()
                .map(|n| vec![0.0; n])
                .collect(),
        }
    }
}

/// Backward through `y = gain ⊙ n + shift`, `n = (x − μ)·inv_std`, per row.
pub fn layernorm_backward(dy: &Matrix, stats: &LayerNormStats, gain: &[f64]) -> Matrix {
    let (rows, d) = dy.shape();
    let mut dx = Matrix::zeros(rows, d);
    let mut dn = vec![0.0; d];
    for r in 0..rows {
        let dy_row = dy.row(r);
        if dy_row.iter().all(|v| *v == 0.0) {
            continue;
        }
        let n_row = stats.normalized.row(r);
        for c in 0..d {
            dn[c] = dy_row[c] * gain[c];
        }
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dot(&dn, n_row) / d as f64;
        let inv = stats.inv_std[r];
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = inv * (dn[c] - mean_dn - n_row[c] * mean_dn_n);
        }
    }
    dx
}

/// Backward through a row-wise softmax given its output `probs`.
pub fn softmax_backward(d_probs: &Matrix, probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let inner = dot(p, dp);
        for (o, (pi, dpi)) in out.row_mut(r).iter_mut().zip(p.iter().zip(dp)) {
            *o = pi * (dpi - inner);
        }
    }
    out
}

/// Reverse pass from `∂K/∂logits` to the mask gradients of every sub-layer
/// at or above `lowest`; gradients below it are left at zero and the pass
/// stops there.
pub fn backward_masks(
    model: &EncoderModel,
    trace: &ForwardTrace,
    masks: &MaskState,
    d_logits: &[f64],
    lowest: SublayerId,
) -> Result<MaskGradients> {
    if !trace.captured() {
        return Err(Error::contract(
            "backward pass needs a captured forward trace",
        ));
    }
    if d_logits.len() != model.config.num_classes {
        return Err(Error::contract("logit gradient has wrong length"));
    }
    masks.check_matches(model)?;
    let mut grads = MaskGradients::zeros(model);
    let d = model.config.embed_dim;
    let scale = 1.0 / (model.config.head_dim as f64).sqrt();

    // Classifier head.
    let d_pooled = matvec_trans(&model.head.classifier, d_logits)?;
    let d_pre: Vec<f64> = d_pooled
        .iter()
        .zip(&trace.pooled)
        .map(|(g, p)| g * (1.0 - p * p))
        .collect();
    let d_first = matvec_trans(&model.head.pool, &d_pre)?;
    let mut dx = Matrix::zeros(trace.hidden.rows(), d);
    dx.row_mut(0).copy_from_slice(&d_first);

    for l in (lowest.layer..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let lt = &trace.layers[l];

        // Feed-forward sub-layer.
        let ffn = &layer.ffn;
        let d_res = layernorm_backward(&dx, &lt.ffn.norm, &ffn.norm.gain);
        // d_res flows to both the FFN output and the residual input.
        let d_g_raw = matmul(&d_res, &ffn.output)?; // s × N: ⟨dF[t], v_j⟩
        let g = &lt.ffn.features;
        let xi = &masks.neurons[l];
        let n = ffn.num_neurons();
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..g.rows() {
                acc += d_g_raw[(t, j)] * g[(t, j)];
            }
            grads.neurons[l][j] = acc;
        }
        if l == lowest.layer && lowest.kind == SublayerKind::FeedForward {
            break;
        }
        let mut d_pre = d_g_raw;
        for t in 0..d_pre.rows() {
            let pre = lt.ffn.preactivation.row(t);
            for (j, e) in d_pre.row_mut(t).iter_mut().enumerate() {
                *e *= xi[j] * gelu_grad(pre[j]);
            }
        }
        let mut d_x = matmul(&d_pre, &ffn.input)?;
        d_x.add_assign(&d_res)?;

        // Attention sub-layer.
        let att = &layer.attention;
        let d_res = layernorm_backward(&d_x, &lt.attention.norm, &att.norm.gain);
        let mut d_in = d_res.clone();
        let need_input_grad = l > lowest.layer;
        for (i, head) in att.heads.iter().enumerate() {
            let f = &lt.attention.features[i];
            let d_f_raw = matmul(&d_res, &head.output)?; // s × d_h
            grads.heads[l][i] = dot(d_f_raw.as_slice(), f.as_slice());
            if !need_input_grad {
                continue;
            }
            let zeta = masks.heads[l][i];
            let d_f = d_f_raw.scaled(zeta);
            let probs = &lt.attention.probs[i];
            let v = &lt.attention.values[i];
            let d_probs = matmul_transb(&d_f, v)?;
            let d_v = matmul_transa(probs, &d_f)?;
            let mut d_scores = softmax_backward(&d_probs, probs);
            d_scores.scale(scale);
            let d_q = matmul(&d_scores, &lt.attention.keys[i])?;
            let d_k = matmul_transa(&d_scores, &lt.attention.queries[i])?;
            d_in.add_assign(&matmul(&d_q, &head.query)?)?;
            d_in.add_assign(&matmul(&d_k, &head.key)?)?;
            d_in.add_assign(&matmul(&d_v, &head.value)?)?;
        }
        if !need_input_grad {
            break;
        }
        dx = d_in;
    }
    Ok(grads)
}

/// Mask gradients of the distillation loss against cached teacher logits.
pub fn mask_gradients(
    model: &EncoderModel,
    sample: &Sample,
    masks: &MaskState,
    teacher_logits: &[f64],
    gamma: f64,
) -> Result<MaskGradients> {
    let trace = forward::forward(model, sample, Some(masks), true)?;
    let d_logits = kl_distill_grad(&trace.logits, teacher_logits, gamma)?;
    backward_masks(model, &trace, masks, &d_logits, SublayerId::from_index(0))
}

/// Mask gradients of the cross-entropy against the sample label.
pub fn mask_gradients_ce(
    model: &EncoderModel,
    sample: &Sample,
    masks: &MaskState,
) -> Result<MaskGradients> {
    let trace = forward::forward(model, sample, Some(masks), true)?;
    let d_logits = cross_entropy_grad(&trace.logits, sample.label)?;
    backward_masks(model, &trace, masks, &d_logits, SublayerId::from_index(0))
}
