mod support;

use std::collections::BTreeSet;

use proptest::prelude::*;
use ragplan_core::backend::FaultInjector;
use ragplan_core::dpo::{dpo_grad, dpo_loss};
use ragplan_core::dsl::{parse_plan, render_plan};
use ragplan_core::executor::{Executor, ExecutorConfig};
use ragplan_core::policy::all_kind_sequences;
use ragplan_core::retrieval::{build_index, Corpus};
use ragplan_core::reward::{max_f1, normalize, token_f1};
use ragplan_core::synthetic::Scenario;
use ragplan_core::types::{Document, OpKind, Plan, PlanDefaults, PlanSource};
use ragplan_core::FEATURE_DIM;
use support::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn render_then_parse_is_identity(seed in any::<u64>()) {
        let plan = random_plan(&mut rng(seed), 6);
        let text = render_plan(&plan);
        let back = parse_plan(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(&back, &plan);
        prop_assert_eq!(render_plan(&back), text);
    }

    #[test]
    fn mutated_programs_are_rejected(seed in any::<u64>()) {
        let mut r = rng(seed);
        let text = render_plan(&random_plan(&mut r, 5));
        let (bad, label) = mutate_invalid(&mut r, &text);
        prop_assert!(parse_plan(&bad).is_err(), "{} accepted:\n{}", label, bad);
    }

    #[test]
    fn f1_matches_multiset_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_text(&mut r, 8), random_text(&mut r, 8));
        prop_assert_eq!(normalize(&a), oracle_normalize(&a));
        let f = token_f1(&a, &b).value();
        prop_assert!((f - multiset_f1(&a, &b)).abs() <= 1e-12);
        prop_assert_eq!(f, token_f1(&b, &a).value());
        prop_assert!((0.0..=1.0).contains(&f));
        if !normalize(&a).is_empty() {
            prop_assert_eq!(token_f1(&a, &a).value(), 1.0);
        }
    }

    #[test]
    fn max_f1_is_the_best_gold(seed in any::<u64>(), n in 1usize..5) {
        let mut r = rng(seed);
        let pred = random_text(&mut r, 6);
        let golds: Vec<String> = (0..n).map(|_| random_text(&mut r, 6)).collect();
        let best = golds.iter().map(|g| multiset_f1(&pred, g)).fold(0.0, f64::max);
        prop_assert!((max_f1(&pred, &golds).unwrap().value() - best).abs() <= 1e-12);
    }

    #[test]
    fn bm25_matches_closed_form(seed in any::<u64>(), topk in 1usize..8) {
        let mut r = rng(seed);
        let docs: Vec<(String, String)> = (0..6)
            .map(|i| (format!("doc{i}"), format!("{} {}", random_text(&mut r, 10), ["zeta", "eta", "theta"][i % 3])))
            .collect();
        let corpus = Corpus::new(docs.iter().map(|(i, t)| Document::new(i.clone(), t.clone())).collect()).unwrap();
        let index = build_index(&corpus).unwrap();
        let query = format!("{} eta", random_text(&mut r, 4));
        let got: Vec<(String, f64)> = index
            .retrieve(&query, topk)
            .unwrap()
            .into_iter()
            .map(|d| (d.id, d.score.unwrap()))
            .collect();
        let want = oracle_bm25(&docs, &query, 1.2, 0.75, topk);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(&g.0, &w.0);
            prop_assert!((g.1 - w.1).abs() <= 1e-12);
        }
        let longer = index.retrieve(&query, topk + 1).unwrap();
        let ids = |v: &[Document]| v.iter().map(|d| d.id.clone()).collect::<Vec<_>>();
        prop_assert_eq!(&ids(&longer)[..got.len()], &got.iter().map(|g| g.0.clone()).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn plan_distribution_is_normalized(seed in any::<u64>(), max_len in 1usize..=4) {
        let mut r = rng(seed);
        let params = random_params(&mut r, max_len, 3.0);
        let state = random_state(&mut r);
        let seqs = enumerate_sequences(max_len);
        let mass: f64 = seqs.iter().map(|k| params.kinds_logprob(&state, k).unwrap().exp()).sum();
        prop_assert!((mass - 1.0).abs() <= 1e-9, "mass {}", mass);
        let ours: BTreeSet<Vec<usize>> = seqs.iter().map(|s| s.iter().map(|k| k.index()).collect()).collect();
        let theirs: BTreeSet<Vec<usize>> =
            all_kind_sequences(max_len).iter().map(|s| s.iter().map(|k| k.index()).collect()).collect();
        prop_assert_eq!(ours, theirs);
    }

    #[test]
    fn shifting_a_feature_column_leaves_probabilities(seed in any::<u64>(), f in 0usize..FEATURE_DIM, c in -5.0f64..5.0) {
        let mut r = rng(seed);
        let params = random_params(&mut r, 3, 2.0);
        let mut shifted = params.clone();
        for k in OpKind::ALL {
            shifted.set_weight(k, f, params.weight(k, f) + c);
        }
        let state = random_state(&mut r);
        for seq in enumerate_sequences(3) {
            let a = params.kinds_logprob(&state, &seq).unwrap();
            let b = shifted.kinds_logprob(&state, &seq).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn samples_are_emittable_and_reproducible(seed in any::<u64>(), max_len in 1usize..=6) {
        let mut r = rng(seed);
        let params = random_params(&mut r, max_len, 2.0);
        let state = random_state(&mut r);
        let kinds = params.sample_kinds(&state, seed);
        prop_assert_eq!(&kinds, &params.sample_kinds(&state, seed));
        prop_assert!(kinds.len() <= max_len);
        prop_assert_eq!(kinds.last(), Some(&OpKind::GenerateAnswer));
        prop_assert!(kinds[..kinds.len() - 1].iter().all(|k| *k != OpKind::GenerateAnswer));
        let plan = Plan::from_kinds(&kinds, PlanDefaults::default(), PlanSource::Policy, max_len).unwrap();
        prop_assert_eq!(plan.kinds(), kinds);
    }

    #[test]
    fn grad_logprob_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let params = random_params(&mut r, 4, 1.0);
        let state = random_state(&mut r);
        let seqs = enumerate_sequences(4);
        let kinds = &seqs[seed as usize % seqs.len()];
        let g = params.grad_logprob(&state, kinds).unwrap();
        let h = 1e-5;
        for (i, gi) in g.iter().enumerate() {
            let mut p = params.clone();
            p.weights_mut()[i] += h;
            let up = p.kinds_logprob(&state, kinds).unwrap();
            p.weights_mut()[i] -= 2.0 * h;
            let down = p.kinds_logprob(&state, kinds).unwrap();
            let fd = (up - down) / (2.0 * h);
            prop_assert!((fd - gi).abs() <= 1e-6 * (1.0 + gi.abs()), "weight {}: {} vs {}", i, gi, fd);
        }
    }

    #[test]
    fn small_gradient_step_lowers_dpo_loss(seed in any::<u64>(), beta in 0.05f64..1.0) {
        let mut r = rng(seed);
        let theta = random_params(&mut r, 3, 1.0);
        let reference = random_params(&mut r, 3, 1.0);
        let t = random_triple(&mut r, 3);
        let g = dpo_grad(&theta, &reference, &t, beta).unwrap();
        let norm2: f64 = g.iter().map(|x| x * x).sum();
        prop_assume!(norm2 > 1e-12);
        let mut stepped = theta.clone();
        for (w, gi) in stepped.weights_mut().iter_mut().zip(&g) {
            *w -= 1e-3 * gi;
        }
        prop_assert!(dpo_loss(&stepped, &reference, &t, beta).unwrap() < dpo_loss(&theta, &reference, &t, beta).unwrap());
    }

    #[test]
    fn dpo_loss_at_reference_is_ln2(seed in any::<u64>(), beta in 0.01f64..2.0) {
        let mut r = rng(seed);
        let theta = random_params(&mut r, 4, 3.0);
        let t = random_triple(&mut r, 4);
        prop_assert!((dpo_loss(&theta, &theta.clone(), &t, beta).unwrap() - std::f64::consts::LN_2).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn execution_falls_back_to_the_initial_answer(seed in any::<u64>(), rate in 0.0f64..0.6) {
        let s = Scenario::build().unwrap();
        let faulty = FaultInjector::new(&s.backend, rate, seed);
        let ex = Executor::new(&s.index, &faulty, ExecutorConfig::default());
        let mut r = rng(seed);
        let states: Vec<_> = s.on_train.iter().chain(&s.held_out).collect();
        let state = states[seed as usize % states.len()];
        let plan = random_plan(&mut r, 6);
        let trace = ex.execute(state, &plan);
        prop_assert!(!trace.final_answer.trim().is_empty());
        if trace.fell_back {
            prop_assert_eq!(&trace.final_answer, &state.initial_answer);
            prop_assert!(trace.steps.last().unwrap().error.is_some());
        } else {
            prop_assert_eq!(trace.steps.len(), plan.len());
            prop_assert!(trace.steps.iter().all(|st| st.error.is_none()));
        }
    }
}
