use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, MaskState};
use crate::tensor::{
    layernorm_with_stats, matmul, matmul_transb, matvec, softmax_in_place, LayerNormStats, Matrix,
};

/// Intermediate values of one attention sub-layer. All matrices are
/// token-major: row `t` belongs to token `t` of the padded sequence.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// Sub-layer input `X` (`s × d`).
    pub input: Matrix,
    pub queries: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    /// Attention probabilities per head (`s × s`); padded keys get 0.
    pub probs: Vec<Matrix>,
    /// Head features `f_i(X)` (`s × d_h`).
    pub features: Vec<Matrix>,
    /// `X + M(X; ζ)` before layer normalization.
    pub residual: Matrix,
    pub norm: LayerNormStats,
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct FeedForwardTrace {
    pub input: Matrix,
    /// Linear projections before the activation (`s × N`).
    pub preactivation: Matrix,
    /// Neuron features `g_i(X)`, one column per neuron (`s × N`).
    pub features: Matrix,
    /// `X + F(X; ξ)` before layer normalization.
    pub residual: Matrix,
    pub norm: LayerNormStats,
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub attention: AttentionTrace,
    pub ffn: FeedForwardTrace,
}

/// Everything a forward pass produced. `layers` is empty unless capture was
/// requested.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    pub hidden: Matrix,
    /// `tanh(W_pool·h₀ + b)`.
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub valid_len: usize,
}

impl ForwardTrace {
    pub fn captured(&self) -> bool {
        !self.layers.is_empty()
    }
}

fn check_sample(model: &EncoderModel, sample: &Sample) -> Result<()> {
    let c = &model.config;
    if sample.ids.is_empty() || sample.valid_len == 0 || sample.valid_len > sample.ids.len() {
        return Err(Error::input(format!(
            "sample has {} ids with valid length {}",
            sample.ids.len(),
            sample.valid_len
        )));
    }
    if sample.ids.len() > c.max_seq_len {
        return Err(Error::input(format!(
            "sequence length {} exceeds max_seq_len {}",
            sample.ids.len(),
            c.max_seq_len
        )));
    }
    if let Some(&id) = sample.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
        return Err(Error::input(format!(
            "token id {id} out of range for vocab size {}",
            c.vocab_size
        )));
    }
    Ok(())
}

/// Embedding lookup plus positions, then the embedding layer norm.
fn embed(model: &EncoderModel, sample: &Sample) -> Result<Matrix> {
    let d = model.config.embed_dim;
    let mut x = Matrix::zeros(sample.ids.len(), d);
    for (t, &id) in sample.ids.iter().enumerate() {
        let tok = model.token_embeddings.row(id as usize);
        let pos = model.position_embeddings.row(t);
        for ((o, a), b) in x.row_mut(t).iter_mut().zip(tok).zip(pos) {
            *o = a + b;
        }
    }
    let norm = &model.embedding_norm;
    layernorm_with_stats(&x, &norm.gain, &norm.shift, model.config.layernorm_eps).map(|(y, _)| y)
}

fn project(x: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    let mut out = matmul_transb(x, weight)?;
    out.add_row_vector(bias)?;
    Ok(out)
}

/// Masked forward pass.
///
/// Each head output `h_i = f_i·W_outᵢᵀ` and each neuron output `n_i = v_i·g_i`
/// is scaled by its mask before the sum and bias; `masks = None` runs the
/// plain unmasked network. Keys at positions `>= valid_len` are masked with
/// `-inf`, so padding never reaches a valid token.
pub fn forward(
    model: &EncoderModel,
    sample: &Sample,
    masks: Option<&MaskState>,
    capture: bool,
) -> Result<ForwardTrace> {
    check_sample(model, sample)?;
    if let Some(m) = masks {
        m.check_matches(model)?;
    }
    let eps = model.config.layernorm_eps;
    let scale = 1.0 / (model.config.head_dim as f64).sqrt();
    let s = sample.ids.len();
    let valid = sample.valid_len;

    let mut x = embed(model, sample)?;
    let mut layers = Vec::with_capacity(if capture { model.layers.len() } else { 0 });

    for (l, layer) in model.layers.iter().enumerate() {
        // Multi-head attention.
        let att = &layer.attention;
        let mut sub = Matrix::zeros(s, model.config.embed_dim);
        let n_heads = att.heads.len();
        let mut queries = Vec::with_capacity(n_heads);
        let mut keys = Vec::with_capacity(n_heads);
        let mut values = Vec::with_capacity(n_heads);
        let mut probs = Vec::with_capacity(n_heads);
        let mut features = Vec::with_capacity(n_heads);
        for (i, head) in att.heads.iter().enumerate() {
            let q = project(&x, &head.query, &head.query_bias)?;
            let k = project(&x, &head.key, &head.key_bias)?;
            let v = project(&x, &head.value, &head.value_bias)?;
            let mut a = matmul_transb(&q, &k)?;
            for t in 0..s {
                let row = a.row_mut(t);
                for (j, e) in row.iter_mut().enumerate() {
                    *e = if j < valid {
                        *e * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_in_place(row, 1.0);
            }
            let f = matmul(&a, &v)?;
            let h = matmul_transb(&f, &head.output)?;
            match masks {
                Some(m) => sub.add_scaled(&h, m.heads[l][i])?,
                None => sub.add_assign(&h)?,
            }
            if capture {
                queries.push(q);
                keys.push(k);
                values.push(v);
                probs.push(a);
                features.push(f);
            }
        }
        sub.add_row_vector(&att.output_bias)?;
        let att_input = capture.then(|| x.clone());
        let mut residual = x;
        residual.add_assign(&sub)?;
        let (y, norm) = layernorm_with_stats(&residual, &att.norm.gain, &att.norm.shift, eps)?;
        let att_trace = att_input.map(|input| AttentionTrace {
            input,
            queries,
            keys,
            values,
            probs,
            features,
            residual: residual.clone(),
            norm,
            output: y.clone(),
        });
        x = y;

        // Feed-forward.
        let ffn = &layer.ffn;
        let pre = project(&x, &ffn.input, &ffn.input_bias)?;
        let g = pre.map(crate::tensor::gelu);
        let sub = match masks {
            Some(m) => {
                let mut gm = g.clone();
                let xi = &m.neurons[l];
                for t in 0..s {
                    for (e, &mask) in gm.row_mut(t).iter_mut().zip(xi) {
                        *e *= mask;
                    }
                }
                matmul_transb(&gm, &ffn.output)?
            }
            None => matmul_transb(&g, &ffn.output)?,
        };
        let mut sub = sub;
        sub.add_row_vector(&ffn.output_bias)?;
        let mut residual = x.clone();
        residual.add_assign(&sub)?;
        let (y, norm) = layernorm_with_stats(&residual, &ffn.norm.gain, &ffn.norm.shift, eps)?;
        if capture {
            layers.push(LayerTrace {
                attention: att_trace.expect("captured"),
                ffn: FeedForwardTrace {
                    input: x,
                    preactivation: pre,
                    features: g,
                    residual,
                    norm,
                    output: y.clone(),
                },
            });
        }
        x = y;
    }

    let mut pooled = matvec(&model.head.pool, x.row(0))?;
    for (p, b) in pooled.iter_mut().zip(&model.head.pool_bias) {
        *p = (*p + b).tanh();
    }
    let mut logits = matvec(&model.head.classifier, &pooled)?;
    for (z, b) in logits.iter_mut().zip(&model.head.classifier_bias) {
        *z += b;
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    Ok(ForwardTrace {
        layers,
        hidden: x,
        pooled,
        logits,
        valid_len: valid,
    })
}

/// Logits only, without capturing intermediates.
pub fn logits(
    model: &EncoderModel,
    sample: &Sample,
    masks: Option<&MaskState>,
) -> Result<Vec<f64>> {
    forward(model, sample, masks, false).map(|t| t.logits)
}
