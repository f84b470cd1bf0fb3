mod common;

use common::brute_force;
use kprune::knowledge::{KnowledgeTable, UnitLayout};
use kprune::kpms::{score, search_threshold, ScoreTable};
use proptest::prelude::*;

/// Knowledge table with the given units, all in layer 0.
fn table(values: &[(f64, f64)], heads: usize) -> KnowledgeTable {
    let neurons = values.len() - heads;
    let mut t = KnowledgeTable::zeros(UnitLayout::new(&[heads], &[neurons]), vec![false, false]);
    for (g, &(p, r)) in values.iter().enumerate() {
        if g < heads {
            t.pred_head[g] = p;
            t.rep_head[g] = r;
        } else {
            t.pred_neuron[g - heads] = p;
            t.rep_neuron[g - heads] = r;
        }
    }
    t
}

fn survivors(scores: &ScoreTable, heads: &[usize], neurons: &[usize]) -> u64 {
    (scores.head.len() - heads.len()) as u64 * scores.f_head
        + (scores.neuron.len() - neurons.len()) as u64 * scores.f_neuron
}

fn knowledge() -> impl Strategy<Value = (Vec<(f64, f64)>, usize)> {
    // Mixing a coarse grid in makes ties frequent.
    let value = prop_oneof![(0u8..4).prop_map(f64::from), 0.0..10.0f64];
    prop::collection::vec((value.clone(), value), 1..=12).prop_flat_map(|v| {
        let n = v.len();
        (Just(v), 0..=n)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn selection_matches_exhaustive_search(
        (values, heads) in knowledge(),
        f_head in 1u64..30,
        f_neuron in 1u64..30,
        lambda in 0.0..2.0f64,
        tau_frac in 0.0..=1.0f64,
    ) {
        let s = score(&table(&values, heads), lambda, 64.0, f_head, f_neuron).unwrap();
        let tau = (tau_frac * s.candidate_flops() as f64) as u64;
        let sel = search_threshold(&s, tau);
        let (bh, bn, nu) = brute_force(&s, tau);
        prop_assert_eq!(&sel.heads, &bh);
        prop_assert_eq!(&sel.neurons, &bn);
        prop_assert_eq!(sel.nu_star, nu);
        prop_assert!(survivors(&s, &sel.heads, &sel.neurons) <= tau);
        prop_assert_eq!(sel.projected_flops, survivors(&s, &sel.heads, &sel.neurons));
    }

    #[test]
    fn ties_are_never_split(
        (values, heads) in knowledge(),
        tau_frac in 0.0..=1.0f64,
    ) {
        let s = score(&table(&values, heads), 1.0, 1.0, 3, 3).unwrap();
        let tau = (tau_frac * s.candidate_flops() as f64) as u64;
        let sel = search_threshold(&s, tau);
        let pruned: Vec<f64> = sel.heads.iter().map(|&i| s.head[i])
            .chain(sel.neurons.iter().map(|&i| s.neuron[i]))
            .collect();
        for (i, &x) in s.head.iter().enumerate() {
            prop_assert_eq!(pruned.contains(&x), sel.heads.contains(&i));
        }
        for (i, &x) in s.neuron.iter().enumerate() {
            prop_assert_eq!(pruned.contains(&x), sel.neurons.contains(&i));
        }
    }

    #[test]
    fn larger_budget_prunes_a_subset(
        (values, heads) in knowledge(),
        a in 0.0..=1.0f64,
        b in 0.0..=1.0f64,
    ) {
        let s = score(&table(&values, heads), 0.5, 64.0, 7, 2).unwrap();
        let total = s.candidate_flops() as f64;
        let (lo, hi) = ((a.min(b) * total) as u64, (a.max(b) * total) as u64);
        let tight = search_threshold(&s, lo);
        let loose = search_threshold(&s, hi);
        prop_assert!(loose.heads.iter().all(|h| tight.heads.contains(h)));
        prop_assert!(loose.neurons.iter().all(|n| tight.neurons.contains(n)));
        prop_assert!(tight.nu_star >= loose.nu_star);
    }

    #[test]
    fn scaling_knowledge_keeps_selection(
        (values, heads) in knowledge(),
        c in prop_oneof![Just(0.1), Just(3.7), Just(100.0), 0.01..1000.0f64],
        tau_frac in 0.0..=1.0f64,
    ) {
        let t = table(&values, heads);
        let s = score(&t, 0.3, 64.0, 5, 1).unwrap();
        let tau = (tau_frac * s.candidate_flops() as f64) as u64;
        let a = search_threshold(&s, tau);
        let b = search_threshold(&score(&t.scaled(c), 0.3, 64.0, 5, 1).unwrap(), tau);
        prop_assert_eq!(a.heads, b.heads);
        prop_assert_eq!(a.neurons, b.neurons);
    }
}
