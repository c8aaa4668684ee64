//! Featurized autoregressive policy over operation-kind sequences.
//!
//! At step `t` the policy sees a feature vector of the state and the prefix
//! `o_<t` and picks the next kind from a softmax over one linear score per
//! kind. A plan that reaches step `max_len - 1` without terminating is forced
//! to `GenerateAnswer`; that step has probability 1 and contributes nothing
//! to log-probabilities or gradients. Arguments are filled from
//! [`PlanDefaults`] by [`Plan::from_kinds`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::tokenize;
use crate::types::{OpKind, Plan, PlanDefaults, PlanError, PlanSource, RagState};

/// Feature layout:
///
/// | index | feature |
/// |---|---|
/// | 0 | bias (1) |
/// | 1 | correctness: +1 correct, −1 incorrect, 0 unknown |
/// | 2 | reasoning trace present (0/1) |
/// | 3 | min(question tokens / 32, 1) |
/// | 4 | min(initial answer tokens / 16, 1) |
/// | 5 | mean of s/(1+s) over document scores s (0 without scores) |
/// | 6 | max of s/(1+s) over document scores s (0 without scores) |
/// | 7 | fraction of initial-answer tokens occurring in the documents |
/// | 8..13 | one-hot of the previous kind in the prefix (all 0 at step 0) |
/// | 13 | prefix length / max_len |
pub const FEATURE_DIM: usize = 14;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<PlanError> for PolicyError {
    fn from(e: PlanError) -> Self {
        PolicyError::InvalidPlan(e.to_string())
    }
}

/// Features of `state` with `prefix` already emitted.
pub fn featurize(state: &RagState, prefix: &[OpKind], max_len: usize) -> [f64; FEATURE_DIM] {
    with_prefix(&state_features(state), prefix, max_len)
}

/// The prefix-independent entries of [`featurize`]; the rest are zero.
fn state_features(state: &RagState) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    f[0] = 1.0;
    f[1] = match state.correctness {
        Some(true) => 1.0,
        Some(false) => -1.0,
        None => 0.0,
    };
    f[2] = if state.reasoning_trace.is_some() { 1.0 } else { 0.0 };
    f[3] = (tokenize(&state.question.text).len() as f64 / 32.0).min(1.0);
    let answer = tokenize(&state.initial_answer);
    f[4] = (answer.len() as f64 / 16.0).min(1.0);
    let squashed: Vec<f64> = state
        .docs
        .iter()
        .filter_map(|d| d.score)
        .map(|s| {
            let s = s.max(0.0);
            s / (1.0 + s)
        })
        .collect();
    if !squashed.is_empty() {
        f[5] = squashed.iter().sum::<f64>() / squashed.len() as f64;
        f[6] = squashed.iter().copied().fold(0.0, f64::max);
    }
    if !answer.is_empty() {
        let doc_tokens: std::collections::HashSet<String> =
            state.docs.iter().flat_map(|d| tokenize(&d.text)).collect();
        let hits = answer.iter().filter(|t| doc_tokens.contains(*t)).count();
        f[7] = hits as f64 / answer.len() as f64;
    }
    f
}

fn with_prefix(base: &[f64; FEATURE_DIM], prefix: &[OpKind], max_len: usize) -> [f64; FEATURE_DIM] {
    let mut f = *base;
    if let Some(prev) = prefix.last() {
        f[8 + prev.index()] = 1.0;
    }
    f[13] = prefix.len() as f64 / max_len.max(1) as f64;
    f
}

/// Numerically stable `ln(Σ exp(x_i))`.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// One weight row per kind, in [`OpKind::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    weights: Vec<f64>,
    max_len: usize,
}

/// Flattened gradient with the layout of [`PolicyParams::weights`].
pub type Gradient = Vec<f64>;

impl PolicyParams {
    pub const N_WEIGHTS: usize = OpKind::COUNT * FEATURE_DIM;

    /// The uniform policy.
    pub fn zeros(max_len: usize) -> Self {
        Self {
            weights: vec![0.0; Self::N_WEIGHTS],
            max_len: max_len.max(1),
        }
    }

    pub fn from_weights(weights: Vec<f64>, max_len: usize) -> Result<Self, PolicyError> {
        if weights.len() != Self::N_WEIGHTS {
            return Err(PolicyError::DimensionMismatch {
                expected: Self::N_WEIGHTS,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(PolicyError::Checkpoint("non-finite weight".into()));
        }
        if max_len == 0 {
            return Err(PolicyError::Checkpoint("max_len must be at least 1".into()));
        }
        Ok(Self { weights, max_len })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn weight(&self, kind: OpKind, feature: usize) -> f64 {
        self.weights[kind.index() * FEATURE_DIM + feature]
    }

    pub fn set_weight(&mut self, kind: OpKind, feature: usize, value: f64) {
        self.weights[kind.index() * FEATURE_DIM + feature] = value;
    }

    pub fn logits(&self, feat: &[f64]) -> Result<[f64; OpKind::COUNT], PolicyError> {
        if feat.len() != FEATURE_DIM {
            return Err(PolicyError::DimensionMismatch {
                expected: FEATURE_DIM,
                got: feat.len(),
            });
        }
        let mut z = [0.0; OpKind::COUNT];
        for (k, zk) in z.iter_mut().enumerate() {
            let row = &self.weights[k * FEATURE_DIM..(k + 1) * FEATURE_DIM];
            *zk = row.iter().zip(feat).map(|(w, x)| w * x).sum();
        }
        Ok(z)
    }

    pub fn step_log_distribution(&self, feat: &[f64]) -> Result<[f64; OpKind::COUNT], PolicyError> {
        let z = self.logits(feat)?;
        let lse = log_sum_exp(&z);
        Ok(z.map(|zk| zk - lse))
    }

    pub fn step_distribution(&self, feat: &[f64]) -> Result<[f64; OpKind::COUNT], PolicyError> {
        Ok(self.step_log_distribution(feat)?.map(f64::exp))
    }

    fn check_kinds(&self, kinds: &[OpKind]) -> Result<(), PolicyError> {
        if kinds.is_empty() || kinds.len() > self.max_len {
            return Err(PolicyError::InvalidPlan(format!(
                "plan length {} outside 1..={}",
                kinds.len(),
                self.max_len
            )));
        }
        if kinds.last() != Some(&OpKind::GenerateAnswer)
            || kinds[..kinds.len() - 1].contains(&OpKind::GenerateAnswer)
        {
            return Err(PolicyError::InvalidPlan(
                "GenerateAnswer must appear exactly once, last".into(),
            ));
        }
        Ok(())
    }

    /// `ln π(kinds | state)`, summed over the non-forced steps.
    pub fn kinds_logprob(&self, state: &RagState, kinds: &[OpKind]) -> Result<f64, PolicyError> {
        self.check_kinds(kinds)?;
        let base = state_features(state);
        let mut total = 0.0;
        for t in 0..kinds.len() {
            if t == self.max_len - 1 {
                break;
            }
            let feat = with_prefix(&base, &kinds[..t], self.max_len);
            total += self.step_log_distribution(&feat)?[kinds[t].index()];
        }
        Ok(total)
    }

    pub fn plan_logprob(&self, state: &RagState, plan: &Plan) -> Result<f64, PolicyError> {
        self.kinds_logprob(state, &plan.kinds())
    }

    /// `∇_W ln π(kinds | state)`; each free step adds `(e_o − p) ⊗ f`.
    pub fn grad_logprob(&self, state: &RagState, kinds: &[OpKind]) -> Result<Gradient, PolicyError> {
        self.check_kinds(kinds)?;
        let base = state_features(state);
        let mut g = vec![0.0; Self::N_WEIGHTS];
        for t in 0..kinds.len() {
            if t == self.max_len - 1 {
                break;
            }
            let feat = with_prefix(&base, &kinds[..t], self.max_len);
            let p = self.step_distribution(&feat)?;
            for k in 0..OpKind::COUNT {
                let coef = if k == kinds[t].index() { 1.0 } else { 0.0 } - p[k];
                let row = &mut g[k * FEATURE_DIM..(k + 1) * FEATURE_DIM];
                for (gi, fi) in row.iter_mut().zip(&feat) {
                    *gi += coef * fi;
                }
            }
        }
        Ok(g)
    }

    fn build(&self, kinds: &[OpKind], defaults: PlanDefaults) -> Plan {
        Plan::from_kinds(kinds, defaults, PlanSource::Policy, self.max_len)
            .expect("every kind sequence ending in GenerateAnswer within max_len is a valid plan")
    }

    /// Ancestral sample driven by `ChaCha8Rng::seed_from_u64(seed)`.
    pub fn sample_kinds(&self, state: &RagState, seed: u64) -> Vec<OpKind> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = state_features(state);
        let mut kinds = Vec::new();
        while kinds.len() < self.max_len - 1 {
            let feat = with_prefix(&base, &kinds, self.max_len);
            let p = self
                .step_distribution(&feat)
                .expect("featurize yields FEATURE_DIM entries");
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = OpKind::GenerateAnswer;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    pick = OpKind::ALL[k];
                    break;
                }
            }
            kinds.push(pick);
            if pick == OpKind::GenerateAnswer {
                return kinds;
            }
        }
        kinds.push(OpKind::GenerateAnswer);
        kinds
    }

    pub fn sample_plan(&self, state: &RagState, seed: u64, defaults: PlanDefaults) -> Plan {
        self.build(&self.sample_kinds(state, seed), defaults)
    }

    /// Greedy kinds; ties go to the earliest kind in [`OpKind::ALL`].
    pub fn decode_kinds(&self, state: &RagState) -> Vec<OpKind> {
        let base = state_features(state);
        let mut kinds = Vec::new();
        while kinds.len() < self.max_len - 1 {
            let feat = with_prefix(&base, &kinds, self.max_len);
            let z = self.logits(&feat).expect("featurize yields FEATURE_DIM entries");
            let mut best = 0;
            for k in 1..OpKind::COUNT {
                if z[k] > z[best] {
                    best = k;
                }
            }
            let pick = OpKind::ALL[best];
            kinds.push(pick);
            if pick == OpKind::GenerateAnswer {
                return kinds;
            }
        }
        kinds.push(OpKind::GenerateAnswer);
        kinds
    }

    pub fn decode_plan(&self, state: &RagState, defaults: PlanDefaults) -> Plan {
        self.build(&self.decode_kinds(state), defaults)
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            format_version: CHECKPOINT_VERSION,
            kind_order: OpKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            feature_dim: FEATURE_DIM,
            max_len: self.max_len,
            weights: self
                .weights
                .chunks(FEATURE_DIM)
                .map(<[f64]>::to_vec)
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let file = File::create(path).map_err(|e| PolicyError::Io(e.to_string()))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.to_checkpoint())
            .map_err(|e| PolicyError::Io(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| PolicyError::Io(e.to_string()))?;
        w.flush().map_err(|e| PolicyError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let file = File::open(path).map_err(|e| PolicyError::Io(format!("{}: {e}", path.display())))?;
        let ckpt: PolicyCheckpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        Self::try_from(ckpt)
    }
}

/// On-disk form of [`PolicyParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyCheckpoint {
    pub format_version: u32,
    pub kind_order: Vec<String>,
    pub feature_dim: usize,
    pub max_len: usize,
    pub weights: Vec<Vec<f64>>,
}

impl TryFrom<PolicyCheckpoint> for PolicyParams {
    type Error = PolicyError;

    fn try_from(c: PolicyCheckpoint) -> Result<Self, PolicyError> {
        if c.format_version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported format version {}",
                c.format_version
            )));
        }
        let expected: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        if c.kind_order != expected {
            return Err(PolicyError::Checkpoint(format!(
                "kind order {:?} differs from {:?}",
                c.kind_order, expected
            )));
        }
        if c.feature_dim != FEATURE_DIM {
            return Err(PolicyError::DimensionMismatch {
                expected: FEATURE_DIM,
                got: c.feature_dim,
            });
        }
        if c.weights.len() != OpKind::COUNT {
            return Err(PolicyError::DimensionMismatch {
                expected: OpKind::COUNT,
                got: c.weights.len(),
            });
        }
        if let Some(row) = c.weights.iter().find(|r| r.len() != FEATURE_DIM) {
            return Err(PolicyError::DimensionMismatch {
                expected: FEATURE_DIM,
                got: row.len(),
            });
        }
        PolicyParams::from_weights(c.weights.concat(), c.max_len)
    }
}

impl Serialize for PolicyParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_checkpoint().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PolicyParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let c = PolicyCheckpoint::deserialize(d)?;
        PolicyParams::try_from(c).map_err(serde::de::Error::custom)
    }
}

/// Every kind sequence the policy can emit with the given `max_len`, shortest first.
pub fn all_kind_sequences(max_len: usize) -> Vec<Vec<OpKind>> {
    let mut out = Vec::new();
    let mut prefixes: Vec<Vec<OpKind>> = vec![Vec::new()];
    for _ in 0..max_len.max(1) {
        let mut next = Vec::new();
        for p in &prefixes {
            let mut done = p.clone();
            done.push(OpKind::GenerateAnswer);
            out.push(done);
            for k in &OpKind::ALL[..OpKind::COUNT - 1] {
                let mut q = p.clone();
                q.push(*k);
                next.push(q);
            }
        }
        prefixes = next;
    }
    out
}

/// SplitMix64 finalizer over the folded parts; used to derive independent seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Document, Phase, Question};

    fn state() -> RagState {
        RagState {
            question: Question::new("q", "what is the capital of france"),
            docs: vec![
                Document::new("d1", "paris is the capital").with_score(3.0),
                Document::new("d2", "lyon is a city").with_score(1.0),
            ],
            initial_answer: "paris city".into(),
            phase: Phase::OnPolicy,
            correctness: Some(false),
            reasoning_trace: None,
        }
    }

    #[test]
    fn features_follow_layout() {
        let f = featurize(&state(), &[OpKind::RewriteQuery], 4);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[1], -1.0);
        assert_eq!(f[2], 0.0);
        assert!((f[3] - 6.0 / 32.0).abs() < 1e-15);
        assert!((f[4] - 2.0 / 16.0).abs() < 1e-15);
        assert!((f[5] - (0.75 + 0.5) / 2.0).abs() < 1e-15);
        assert_eq!(f[6], 0.75);
        assert_eq!(f[7], 1.0);
        assert_eq!(f[8 + OpKind::RewriteQuery.index()], 1.0);
        assert_eq!(f[13], 0.25);
        assert!(f.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn uniform_policy() {
        let p = PolicyParams::zeros(6);
        let d = p.step_distribution(&featurize(&state(), &[], 6)).unwrap();
        assert!(d.iter().all(|x| (x - 0.2).abs() < 1e-15));
        let one = p.kinds_logprob(&state(), &[OpKind::GenerateAnswer]).unwrap();
        assert!((one - 0.2f64.ln()).abs() < 1e-12);
        let two = p
            .kinds_logprob(&state(), &[OpKind::Retrieval, OpKind::GenerateAnswer])
            .unwrap();
        assert!((two - 2.0 * 0.2f64.ln()).abs() < 1e-12);
        assert!(p.step_distribution(&[0.0; 3]).is_err());
    }

    #[test]
    fn large_weight_dominates() {
        let mut p = PolicyParams::zeros(6);
        p.set_weight(OpKind::DecomposeQuery, 0, 800.0);
        let d = p.step_distribution(&featurize(&state(), &[], 6)).unwrap();
        assert_eq!(d[OpKind::DecomposeQuery.index()], 1.0);
        assert!(d.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn forced_terminal_step_is_free() {
        let p = PolicyParams::zeros(2);
        let lp = p
            .kinds_logprob(&state(), &[OpKind::RefineDoc, OpKind::GenerateAnswer])
            .unwrap();
        assert!((lp - 0.2f64.ln()).abs() < 1e-12);
        assert!(p
            .kinds_logprob(&state(), &[OpKind::Retrieval, OpKind::Retrieval, OpKind::GenerateAnswer])
            .is_err());
    }

    #[test]
    fn decoding_ties_and_preferences() {
        let p = PolicyParams::zeros(4);
        assert_eq!(
            p.decode_kinds(&state()),
            vec![OpKind::Retrieval, OpKind::Retrieval, OpKind::Retrieval, OpKind::GenerateAnswer]
        );
        let mut p = PolicyParams::zeros(4);
        p.set_weight(OpKind::GenerateAnswer, 0, 1.0);
        let plan = p.decode_plan(&state(), PlanDefaults::default());
        assert_eq!(plan.kinds(), vec![OpKind::GenerateAnswer]);
        assert_eq!(plan.source(), PlanSource::Policy);
    }

    #[test]
    fn sampling_is_seeded() {
        let p = PolicyParams::zeros(6);
        let s = state();
        for seed in 0..50 {
            assert_eq!(p.sample_kinds(&s, seed), p.sample_kinds(&s, seed));
        }
        let distinct: std::collections::HashSet<Vec<OpKind>> =
            (0..50).map(|seed| p.sample_kinds(&s, seed)).collect();
        assert!(distinct.len() > 5);
    }

    #[test]
    fn uniform_first_step_frequencies() {
        let p = PolicyParams::zeros(6);
        let s = state();
        let mut counts = [0usize; OpKind::COUNT];
        for seed in 0..10_000u64 {
            counts[p.sample_kinds(&s, mix_seed(&[7, seed]))[0].index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.2).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_refusals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut p = PolicyParams::zeros(3);
        p.set_weight(OpKind::RefineDoc, 7, 0.1 + 0.2);
        p.set_weight(OpKind::Retrieval, 1, -1e-17);
        p.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path).unwrap(), p);

        let mut c = p.to_checkpoint();
        c.feature_dim = 13;
        assert!(matches!(
            PolicyParams::try_from(c),
            Err(PolicyError::DimensionMismatch { .. })
        ));
        let mut c = p.to_checkpoint();
        c.weights[2].pop();
        assert!(matches!(
            PolicyParams::try_from(c),
            Err(PolicyError::DimensionMismatch { .. })
        ));
        let mut c = p.to_checkpoint();
        c.kind_order.swap(0, 1);
        assert!(PolicyParams::try_from(c).is_err());
    }

    #[test]
    fn seed_mixing_spreads() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
        assert_eq!(mix_seed(&[5, 6, 7]), mix_seed(&[5, 6, 7]));
    }
}
