//! Answer normalization, token-level F1 and oracle correctness labels.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{ExecutionTrace, Executor};
use crate::types::{Plan, RagState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("gold answer set is empty")]
    EmptyGoldSet,
    #[error("reward {0} outside [0, 1]")]
    OutOfRange(String),
}

/// A score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Reward(f64);

impl Reward {
    pub const ZERO: Reward = Reward(0.0);
    pub const ONE: Reward = Reward(1.0);

    pub fn new(value: f64) -> Result<Self, RewardError> {
        if (0.0..=1.0).contains(&value) {
            Ok(Reward(value))
        } else {
            Err(RewardError::OutOfRange(value.to_string()))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Reward {
    type Error = RewardError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Reward::new(v)
    }
}

impl From<Reward> for f64 {
    fn from(r: Reward) -> f64 {
        r.0
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, deletes ASCII punctuation, drops the articles `a`, `an`, `the`
/// and splits on whitespace.
///
/// Punctuation is deleted rather than replaced, so `"u.s."` becomes `"us"`.
/// This differs from [`crate::retrieval::tokenize`], which splits on it.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !ARTICLES.contains(t))
        .map(str::to_string)
        .collect()
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Harmonic mean of token precision and recall over normalized multisets.
/// Two empty answers score 1, exactly one empty answer scores 0.
pub fn token_f1(pred: &str, gold: &str) -> Reward {
    let p = normalize(pred);
    let g = normalize(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() {
            Reward::ONE
        } else {
            Reward::ZERO
        };
    }
    let gc = counts(&g);
    let common: usize = counts(&p)
        .iter()
        .map(|(t, n)| (*n).min(gc.get(t).copied().unwrap_or(0)))
        .sum();
    if common == 0 {
        return Reward::ZERO;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    Reward(2.0 * precision * recall / (precision + recall))
}

pub fn max_f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<Reward, RewardError> {
    golds
        .iter()
        .map(|g| token_f1(pred, g.as_ref()))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or(RewardError::EmptyGoldSet)
}

/// How the oracle label `c` is derived from an answer and its golds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "tau")]
pub enum CorrectnessRule {
    /// Normalized token sequences are equal for some gold.
    #[default]
    ExactMatch,
    /// `max_f1 >= tau`.
    F1Threshold(f64),
}

pub fn correctness_label<S: AsRef<str>>(a0: &str, golds: &[S]) -> Result<bool, RewardError> {
    correctness_label_with(a0, golds, CorrectnessRule::ExactMatch)
}

pub fn correctness_label_with<S: AsRef<str>>(
    a0: &str,
    golds: &[S],
    rule: CorrectnessRule,
) -> Result<bool, RewardError> {
    if golds.is_empty() {
        return Err(RewardError::EmptyGoldSet);
    }
    Ok(match rule {
        CorrectnessRule::ExactMatch => {
            let a = normalize(a0);
            golds.iter().any(|g| normalize(g.as_ref()) == a)
        }
        CorrectnessRule::F1Threshold(tau) => max_f1(a0, golds)?.value() >= tau,
    })
}

/// Executes `plan` on `state` and scores the result against the state's golds.
pub fn reward_of(
    state: &RagState,
    plan: &Plan,
    executor: &Executor<'_>,
) -> Result<(Reward, ExecutionTrace), RewardError> {
    let golds = state.gold_answers().ok_or(RewardError::EmptyGoldSet)?;
    if golds.is_empty() {
        return Err(RewardError::EmptyGoldSet);
    }
    let trace = executor.execute(state, plan);
    let r = max_f1(&trace.final_answer, golds)?;
    Ok((r, trace))
}
