#![allow(dead_code)]

use kprune::data::Dataset;
use kprune::kpms::ScoreTable;
use kprune::model::EncoderModel;
use kprune::synth::random_samples;
use kprune::tensor::{matmul, matmul_transa, Matrix};

/// Samples with lengths in `min..=max`, padded to `max`.
pub fn padded_dataset(
    model: &EncoderModel,
    n: usize,
    min: usize,
    max: usize,
    seed: u64,
) -> Dataset {
    let samples = random_samples(&model.config, n, min, max, seed);
    Dataset::new(samples.into_iter().map(|s| s.padded_to(max)).collect())
}

/// Solve `(PᵀP)·W = PᵀQ` by Gaussian elimination with partial pivoting.
pub fn normal_equations(p: &Matrix, q: &Matrix) -> Matrix {
    let mut a = matmul_transa(p, p).unwrap();
    let mut b = matmul_transa(p, q).unwrap();
    let n = a.rows();
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| a[(i, k)].abs().total_cmp(&a[(j, k)].abs()))
            .unwrap();
        for c in 0..n {
            let t = a[(k, c)];
            a[(k, c)] = a[(piv, c)];
            a[(piv, c)] = t;
        }
        for c in 0..b.cols() {
            let t = b[(k, c)];
            b[(k, c)] = b[(piv, c)];
            b[(piv, c)] = t;
        }
        for i in k + 1..n {
            let f = a[(i, k)] / a[(k, k)];
            for c in k..n {
                a[(i, c)] -= f * a[(k, c)];
            }
            for c in 0..b.cols() {
                b[(i, c)] -= f * b[(k, c)];
            }
        }
    }
    let mut w = Matrix::zeros(n, b.cols());
    for c in 0..b.cols() {
        for i in (0..n).rev() {
            let mut s = b[(i, c)];
            for j in i + 1..n {
                s -= a[(i, j)] * w[(j, c)];
            }
            w[(i, c)] = s / a[(i, i)];
        }
    }
    w
}

pub fn residual(p: &Matrix, w: &Matrix, q: &Matrix) -> f64 {
    kprune::tensor::frobenius_sq(&matmul(p, w).unwrap().sub(q).unwrap())
}

/// Exhaustive threshold search: among every candidate score and `+inf`, the
/// smallest threshold whose survivors (score `≥ ν`) fit the budget.
pub fn brute_force(scores: &ScoreTable, tau: u64) -> (Vec<usize>, Vec<usize>, f64) {
    let flops = |nu: f64| -> u64 {
        let h = scores.head.iter().filter(|&&s| s >= nu).count() as u64;
        let n = scores.neuron.iter().filter(|&&s| s >= nu).count() as u64;
        h * scores.f_head + n * scores.f_neuron
    };
    if flops(f64::NEG_INFINITY) <= tau {
        return (vec![], vec![], f64::NEG_INFINITY);
    }
    let mut thresholds: Vec<f64> = scores.head.iter().chain(&scores.neuron).copied().collect();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(f64::total_cmp);
    let nu = thresholds.into_iter().find(|&t| flops(t) <= tau).unwrap();
    let below = |v: &[f64]| (0..v.len()).filter(|&i| v[i] < nu).collect::<Vec<_>>();
    (below(&scores.head), below(&scores.neuron), nu)
}

/// Largest relative logit deviation over a dataset.
pub fn max_relative_logit_diff(a: &EncoderModel, b: &EncoderModel, ds: &Dataset) -> f64 {
    let mut worst: f64 = 0.0;
    for s in &ds.samples {
        let za = kprune::runtime::logits(a, s, None).unwrap();
        let zb = kprune::runtime::logits(b, s, None).unwrap();
        let scale = za.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
        for (x, y) in za.iter().zip(&zb) {
            worst = worst.max((x - y).abs() / scale);
        }
    }
    worst
}
