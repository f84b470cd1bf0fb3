use crate::error::{Error, Result};
use crate::tensor::{log_softmax, softmax};

fn check_pair(student: &[f64], teacher: &[f64], gamma: f64) -> Result<()> {
    if student.len() != teacher.len() {
        return Err(Error::contract(format!(
            "logit lengths differ: {} vs {}",
            student.len(),
            teacher.len()
        )));
    }
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::contract(format!(
            "temperature must be positive, got {gamma}"
        )));
    }
    Ok(())
}

/// `γ²·KL(s_γ(student) ‖ s_γ(teacher))`, with `s_γ(z) = softmax(z/γ)`.
///
/// The divergence is taken from the student distribution to the teacher's,
/// in that order.
pub fn kl_distill_loss(student: &[f64], teacher: &[f64], gamma: f64) -> Result<f64> {
    check_pair(student, teacher, gamma)?;
    let log_s = log_softmax(student, gamma);
    let log_t = log_softmax(teacher, gamma);
    let kl: f64 = log_s
        .iter()
        .zip(&log_t)
        .map(|(ls, lt)| ls.exp() * (ls - lt))
        .sum();
    Ok(gamma * gamma * kl.max(0.0))
}

/// Gradient of [`kl_distill_loss`] with respect to the student logits:
/// `γ·p_j·(a_j − Σ_c p_c a_c)` where `a = log p − log q`.
pub fn kl_distill_grad(student: &[f64], teacher: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_pair(student, teacher, gamma)?;
    let log_s = log_softmax(student, gamma);
    let log_t = log_softmax(teacher, gamma);
    let a: Vec<f64> = log_s.iter().zip(&log_t).map(|(s, t)| s - t).collect();
    let p: Vec<f64> = log_s.iter().map(|x| x.exp()).collect();
    let mean: f64 = p.iter().zip(&a).map(|(p, a)| p * a).sum();
    Ok(p.iter()
        .zip(&a)
        .map(|(p, a)| gamma * p * (a - mean))
        .collect())
}

/// `−log softmax(z)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits, 1.0)[label])
}

/// `softmax(z) − onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    if label >= logits.len() {
        return Err(Error::contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut p = softmax(logits, 1.0)?;
    p[label] -= 1.0;
    Ok(p)
}
