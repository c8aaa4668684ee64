//! Gold-blind evaluation: plans are decoded and executed on the inference
//! view of each state, and golds are consulted only for scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::executor::{ExecutionTrace, Executor};
use crate::policy::PolicyParams;
use crate::reward::{max_f1, RewardError};
use crate::types::{OpKind, Plan, PlanDefaults, PlanSource, RagState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub record_id: String,
    /// Empty for the vanilla baseline, which runs no plan.
    pub plan: Vec<OpKind>,
    pub trace: ExecutionTrace,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub records: usize,
    pub mean_f1: f64,
    pub fallback_rate: f64,
    pub mean_plan_len: f64,
}

impl EvalSummary {
    pub fn of(records: &[EvalRecord]) -> Self {
        let n = records.len().max(1) as f64;
        Self {
            records: records.len(),
            mean_f1: records.iter().map(|r| r.f1).sum::<f64>() / n,
            fallback_rate: records.iter().filter(|r| r.trace.fell_back).count() as f64 / n,
            mean_plan_len: records.iter().map(|r| r.plan.len() as f64).sum::<f64>() / n,
        }
    }
}

/// What produces the answer for each state.
#[derive(Debug, Clone, Copy)]
pub enum Answerer<'a> {
    /// The initial answer as is.
    Vanilla,
    /// Greedy decode of a trained policy.
    Policy(&'a PolicyParams, PlanDefaults),
}

fn golds(state: &RagState) -> Result<&[String], RewardError> {
    state.gold_answers().ok_or(RewardError::EmptyGoldSet)
}

/// Scores every state; output order follows input order.
pub fn evaluate(
    states: &[RagState],
    answerer: Answerer<'_>,
    executor: &Executor<'_>,
) -> Result<(Vec<EvalRecord>, EvalSummary), RewardError> {
    let records = states
        .par_iter()
        .map(|state| {
            let blind = state.to_inference(state.correctness);
            let (plan, trace) = match answerer {
                Answerer::Vanilla => (
                    Vec::new(),
                    ExecutionTrace {
                        steps: Vec::new(),
                        final_answer: blind.initial_answer.clone(),
                        fell_back: false,
                    },
                ),
                Answerer::Policy(params, defaults) => {
                    let plan = params.decode_plan(&blind, defaults);
                    let trace = executor.execute(&blind, &plan);
                    (plan.kinds(), trace)
                }
            };
            let f1 = max_f1(&trace.final_answer, golds(state)?)?.value();
            Ok(EvalRecord {
                record_id: state.question.id.clone(),
                plan,
                trace,
                f1,
            })
        })
        .collect::<Result<Vec<_>, RewardError>>()?;
    let summary = EvalSummary::of(&records);
    Ok((records, summary))
}

/// Best achievable F1 over every plan of at most `max_len` steps.
pub fn oracle_f1(state: &RagState, executor: &Executor<'_>, defaults: PlanDefaults, max_len: usize) -> Result<f64, RewardError> {
    let golds = golds(state)?;
    let mut best = 0.0f64;
    for kinds in crate::policy::all_kind_sequences(max_len) {
        let plan = Plan::from_kinds(&kinds, defaults, PlanSource::Manual, max_len)
            .expect("enumerated sequences are valid plans");
        let answer = executor.execute(state, &plan).final_answer;
        best = best.max(max_f1(&answer, golds)?.value());
    }
    Ok(best)
}
