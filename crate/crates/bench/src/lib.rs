//! Deterministic inputs for the benchmarks.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ragplan_core::policy::PolicyParams;
use ragplan_core::types::{Document, OpKind, Phase, Plan, PlanDefaults, PlanSource, PreferenceTriple, Question, RagState};
use ragplan_core::{Corpus, FEATURE_DIM};

const VOCAB_SIZE: usize = 2000;

fn word(i: usize) -> String {
    format!("w{i:04}")
}

/// Zipf-ish text: low word ids are much more frequent.
pub fn text(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| {
            let u: f64 = rng.random();
            word(((VOCAB_SIZE as f64).powf(u) as usize).min(VOCAB_SIZE - 1))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn corpus(n_docs: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = (0..n_docs)
        .map(|i| Document::new(format!("doc{i}"), text(&mut rng, 80)))
        .collect();
    Corpus::new(docs).expect("generated ids are unique")
}

pub fn queries(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| text(&mut rng, 6)).collect()
}

pub fn state(seed: u64) -> RagState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RagState {
        question: Question::new("q", text(&mut rng, 12)).with_golds(vec![text(&mut rng, 3)]),
        docs: (0..5)
            .map(|i| Document::new(format!("d{i}"), text(&mut rng, 60)).with_score(rng.random_range(0.0..15.0)))
            .collect(),
        initial_answer: text(&mut rng, 4),
        phase: Phase::OnPolicy,
        correctness: Some(false),
        reasoning_trace: None,
    }
}

pub fn params(max_len: usize, seed: u64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..OpKind::COUNT * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    PolicyParams::from_weights(w, max_len).expect("weight count matches")
}

/// A triple over two of the longest plans a horizon-`max_len` policy emits.
pub fn triple(max_len: usize, seed: u64) -> PreferenceTriple {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = [OpKind::Retrieval, OpKind::RewriteQuery, OpKind::RefineDoc];
    let long = |rng: &mut ChaCha8Rng| {
        let kinds: Vec<OpKind> = (0..max_len - 1).map(|_| *body.choose(rng).unwrap()).collect();
        Plan::from_kinds(&kinds, PlanDefaults::default(), PlanSource::Policy, max_len).expect("valid by construction")
    };
    let (a, b) = (long(&mut rng), long(&mut rng));
    PreferenceTriple::new(Arc::new(state(seed)), a, b, 1.0, 0.0).expect("strict reward gap")
}
