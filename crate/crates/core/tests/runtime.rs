use kprune::data::Sample;
use kprune::model::{MaskState, SublayerId};
use kprune::runtime::{
    backward_masks, cross_entropy, forward, kl_distill_grad, kl_distill_loss, logits,
    mask_gradients, mask_gradients_ce,
};
use kprune::synth::{random_model, random_samples, toy_config};

fn toy() -> kprune::model::EncoderModel {
    random_model(&toy_config(2, 2, 4, 8, 3), 7)
}

/// Student masks away from 1 so the distillation gradient is nonzero.
fn perturbed_masks(model: &kprune::model::EncoderModel) -> MaskState {
    let mut m = MaskState::ones(model);
    for (l, heads) in m.heads.iter_mut().enumerate() {
        for (i, z) in heads.iter_mut().enumerate() {
            *z = 0.6 + 0.15 * (i + l) as f64;
        }
    }
    for (l, neurons) in m.neurons.iter_mut().enumerate() {
        for (j, x) in neurons.iter_mut().enumerate() {
            *x = 1.3 - 0.1 * ((j + 2 * l) % 7) as f64;
        }
    }
    m
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let tol = 1e-4 * numeric.abs().max(analytic.abs()).max(1e-3);
    assert!(
        (analytic - numeric).abs() <= tol,
        "{what}: analytic {analytic} numeric {numeric}"
    );
}

#[test]
fn mask_gradients_match_finite_differences() {
    let model = toy();
    let teacher_masks = MaskState::ones(&model);
    let masks = perturbed_masks(&model);
    let samples = random_samples(&model.config, 3, 3, 9, 11);
    let h = 1e-3;
    for (n, raw) in samples.into_iter().enumerate() {
        let sample = raw.padded_to(10);
        let teacher = logits(&model, &sample, Some(&teacher_masks)).unwrap();
        let loss = |m: &MaskState| {
            let z = logits(&model, &sample, Some(m)).unwrap();
            kl_distill_loss(&z, &teacher, 2.0).unwrap()
        };
        let grads = mask_gradients(&model, &sample, &masks, &teacher, 2.0).unwrap();
        for l in 0..2 {
            for i in 0..2 {
                let mut up = masks.clone();
                let mut down = masks.clone();
                up.heads[l][i] += h;
                down.heads[l][i] -= h;
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                assert_close(grads.heads[l][i], fd, &format!("sample {n} head {l}.{i}"));
            }
            for j in 0..8 {
                let mut up = masks.clone();
                let mut down = masks.clone();
                up.neurons[l][j] += h;
                down.neurons[l][j] -= h;
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                assert_close(
                    grads.neurons[l][j],
                    fd,
                    &format!("sample {n} neuron {l}.{j}"),
                );
            }
        }
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let model = toy();
    let masks = MaskState::ones(&model);
    let sample = Sample::new(vec![3, 17, 4, 42, 9], 2);
    let grads = mask_gradients_ce(&model, &sample, &masks).unwrap();
    let h = 1e-3;
    let loss =
        |m: &MaskState| cross_entropy(&logits(&model, &sample, Some(m)).unwrap(), 2).unwrap();
    for l in 0..2 {
        for i in 0..2 {
            let mut up = masks.clone();
            let mut down = masks.clone();
            up.heads[l][i] += h;
            down.heads[l][i] -= h;
            assert_close(
                grads.heads[l][i],
                (loss(&up) - loss(&down)) / (2.0 * h),
                "head",
            );
        }
    }
}

#[test]
fn gradients_vanish_when_student_equals_teacher() {
    let model = toy();
    let masks = MaskState::ones(&model);
    let sample = Sample::new(vec![1, 2, 3, 4], 0);
    let teacher = logits(&model, &sample, None).unwrap();
    let grads = mask_gradients(&model, &sample, &masks, &teacher, 2.0).unwrap();
    assert!(grads.heads.iter().flatten().all(|g| *g == 0.0));
    assert!(grads.neurons.iter().flatten().all(|g| *g == 0.0));
}

#[test]
fn truncated_backward_agrees_above_the_cut() {
    let model = random_model(&toy_config(3, 2, 4, 8, 3), 3);
    let masks = perturbed_masks(&model);
    let sample = Sample::new(vec![5, 6, 7, 8, 9, 10], 1);
    let teacher = logits(&model, &sample, None).unwrap();
    let trace = forward(&model, &sample, Some(&masks), true).unwrap();
    let dz = kl_distill_grad(&trace.logits, &teacher, 2.0).unwrap();
    let full = backward_masks(&model, &trace, &masks, &dz, SublayerId::from_index(0)).unwrap();
    for cut in 1..6 {
        let id = SublayerId::from_index(cut);
        let part = backward_masks(&model, &trace, &masks, &dz, id).unwrap();
        for s in SublayerId::all(3) {
            let (a, b) = (part_of(&part, s), part_of(&full, s));
            if s.index() >= cut {
                assert_eq!(a, b, "{s} above cut {cut}");
            } else {
                assert!(a.iter().all(|g| *g == 0.0), "{s} below cut {cut}");
            }
        }
    }
}

fn part_of(g: &kprune::runtime::MaskGradients, id: SublayerId) -> Vec<f64> {
    match id.kind {
        kprune::model::SublayerKind::Attention => g.heads[id.layer].clone(),
        kprune::model::SublayerKind::FeedForward => g.neurons[id.layer].clone(),
    }
}

#[test]
fn capture_does_not_change_logits() {
    let model = toy();
    let masks = perturbed_masks(&model);
    let sample = Sample::new(vec![8, 1, 30, 2], 0);
    let a = forward(&model, &sample, Some(&masks), true).unwrap();
    let b = forward(&model, &sample, Some(&masks), false).unwrap();
    assert_eq!(a.logits, b.logits);
    assert!(a.captured() && !b.captured());
}

#[test]
fn unit_masks_match_unmasked_forward_bitwise() {
    let model = toy();
    let sample = Sample::new(vec![8, 1, 30, 2, 11, 12], 0);
    let ones = MaskState::ones(&model);
    assert_eq!(
        logits(&model, &sample, Some(&ones)).unwrap(),
        logits(&model, &sample, None).unwrap()
    );
}

#[test]
fn padding_does_not_reach_valid_tokens() {
    let model = toy();
    let short = Sample::new(vec![4, 9, 13], 1);
    let padded = short.clone().padded_to(12);
    let a = forward(&model, &short, None, true).unwrap();
    let b = forward(&model, &padded, None, true).unwrap();
    for (x, y) in a.logits.iter().zip(&b.logits) {
        assert!((x - y).abs() < 1e-12);
    }
    let hidden = b.hidden.slice_rows(0, 3);
    assert!(hidden.max_abs_diff(&a.hidden) < 1e-12);
}

#[test]
fn single_token_sequence_runs() {
    let model = toy();
    let sample = Sample::new(vec![0], 0);
    let trace = forward(&model, &sample, None, true).unwrap();
    assert!(trace.logits.iter().all(|z| z.is_finite()));
    // One valid key: every attention row is the point mass.
    assert_eq!(trace.layers[0].attention.probs[0][(0, 0)], 1.0);
}

#[test]
fn bad_samples_are_input_errors() {
    let model = toy();
    let too_long = Sample::new(vec![1; 17], 0);
    let bad_id = Sample::new(vec![50], 0);
    for s in [too_long, bad_id] {
        let err = forward(&model, &s, None, false).unwrap_err();
        assert!(err.is_user_error(), "{err}");
    }
}
