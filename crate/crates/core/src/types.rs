//! Shared domain types: questions, documents, RAG states, operations and plans.
//!
//! Everything here is plain data plus invariant checking. A [`Plan`] can only
//! be obtained through [`Plan::new`] (or the canonical builders), so any plan
//! held anywhere in the system ends in exactly one `GenerateAnswer`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default upper bound on the number of operations in a plan.
pub const DEFAULT_MAX_PLAN_LEN: usize = 6;

/// Variables every plan program may read without defining them.
pub const BOUND_QUESTION: &str = "question";
pub const BOUND_DOC_LIST: &str = "doc_list";
pub const BOUND_PREVIOUS_PRED: &str = "previous_pred";
/// The variable the terminal `GenerateAnswer` must assign.
pub const FINAL_ANSWER: &str = "final_answer";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    /// Present for training and evaluation data, absent at inference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answers: Option<Vec<String>>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold_answers: None,
        }
    }

    pub fn with_golds(mut self, golds: Vec<String>) -> Self {
        self.gold_answers = Some(golds);
        self
    }

    /// Copy without gold answers, for anything that must stay gold-blind.
    pub fn without_golds(&self) -> Self {
        Self {
            id: self.id.clone(),
            text: self.text.clone(),
            gold_answers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// Retriever-assigned relevance, non-negative when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }
}

/// Which training regime a state belongs to; decides which diagnostics it may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Oracle correctness and (on failure) the baseline's reasoning trace are visible.
    OffPolicy,
    /// Only a judge-estimated correctness flag is visible.
    OnPolicy,
    /// Deployment: judge flag only, and no gold answers anywhere in the state.
    Inference,
}

/// A (possibly failed) RAG outcome the planner conditions on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagState {
    pub question: Question,
    pub docs: Vec<Document>,
    pub initial_answer: String,
    pub phase: Phase,
    /// Oracle label when off-policy, judge estimate otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correctness: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_trace: Option<String>,
}

impl RagState {
    pub fn gold_answers(&self) -> Option<&[String]> {
        self.question.gold_answers.as_deref()
    }

    /// The gold-free view of this state used at deployment time.
    pub fn to_inference(&self, judged: Option<bool>) -> RagState {
        RagState {
            question: self.question.without_golds(),
            docs: self.docs.clone(),
            initial_answer: self.initial_answer.clone(),
            phase: Phase::Inference,
            correctness: judged,
            reasoning_trace: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyQuestion,
    EmptyGoldAnswer,
    EmptyInitialAnswer,
    EmptyDocument(String),
    DuplicateDocId(String),
    MissingCorrectness,
    MissingReasoningTrace,
    UnexpectedReasoningTrace,
    GoldLeakage,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyQuestion => write!(f, "empty question text"),
            Violation::EmptyGoldAnswer => write!(f, "empty gold answer"),
            Violation::EmptyInitialAnswer => write!(f, "empty initial_answer"),
            Violation::EmptyDocument(id) => write!(f, "empty document text: {id}"),
            Violation::DuplicateDocId(id) => write!(f, "duplicate document id: {id}"),
            Violation::MissingCorrectness => write!(f, "missing correctness"),
            Violation::MissingReasoningTrace => write!(f, "missing reasoning_trace"),
            Violation::UnexpectedReasoningTrace => {
                write!(f, "reasoning_trace outside off-policy phase")
            }
            Violation::GoldLeakage => write!(f, "gold leakage"),
        }
    }
}

/// Lists every broken `RagState` invariant; an empty list means the state is valid.
pub fn validate_state(state: &RagState) -> Vec<Violation> {
    let mut out = Vec::new();
    if state.question.text.trim().is_empty() {
        out.push(Violation::EmptyQuestion);
    }
    if let Some(golds) = &state.question.gold_answers {
        if golds.iter().any(|g| g.trim().is_empty()) {
            out.push(Violation::EmptyGoldAnswer);
        }
    }
    if state.initial_answer.trim().is_empty() {
        out.push(Violation::EmptyInitialAnswer);
    }
    let mut seen = HashSet::new();
    for doc in &state.docs {
        if doc.text.trim().is_empty() {
            out.push(Violation::EmptyDocument(doc.id.clone()));
        }
        if !seen.insert(doc.id.as_str()) {
            out.push(Violation::DuplicateDocId(doc.id.clone()));
        }
    }
    match state.phase {
        Phase::OffPolicy => match state.correctness {
            None => out.push(Violation::MissingCorrectness),
            Some(false) if state.reasoning_trace.is_none() => {
                out.push(Violation::MissingReasoningTrace)
            }
            _ => {}
        },
        Phase::OnPolicy | Phase::Inference => {
            if state.reasoning_trace.is_some() {
                out.push(Violation::UnexpectedReasoningTrace);
            }
        }
    }
    if state.phase == Phase::Inference && state.question.gold_answers.is_some() {
        out.push(Violation::GoldLeakage);
    }
    out
}

/// Operation kinds, in the fixed order used for tie-breaking and parameter rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Retrieval,
    RewriteQuery,
    DecomposeQuery,
    RefineDoc,
    GenerateAnswer,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Retrieval,
        OpKind::RewriteQuery,
        OpKind::DecomposeQuery,
        OpKind::RefineDoc,
        OpKind::GenerateAnswer,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Retrieval => "Retrieval",
            OpKind::RewriteQuery => "RewriteQuery",
            OpKind::DecomposeQuery => "DecomposeQuery",
            OpKind::RefineDoc => "RefineDoc",
            OpKind::GenerateAnswer => "GenerateAnswer",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewriteInstruction {
    Clarify,
    Expand,
}

impl RewriteInstruction {
    pub fn as_str(self) -> &'static str {
        match self {
            RewriteInstruction::Clarify => "clarify",
            RewriteInstruction::Expand => "expand",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clarify" => Some(Self::Clarify),
            "expand" => Some(Self::Expand),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineInstruction {
    Explain,
    Summarize,
}

impl RefineInstruction {
    pub fn as_str(self) -> &'static str {
        match self {
            RefineInstruction::Explain => "explain",
            RefineInstruction::Summarize => "summarize",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "explain" => Some(Self::Explain),
            "summarize" => Some(Self::Summarize),
            _ => None,
        }
    }
}

/// A query-typed argument: a variable or a string literal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryArg {
    Var(String),
    Literal(String),
}

impl QueryArg {
    pub fn question() -> Self {
        QueryArg::Var(BOUND_QUESTION.to_string())
    }
}

/// A single document taken from a document-list variable; no index means the first one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DocArg {
    pub source: String,
    pub index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Operation {
    Retrieval {
        query: QueryArg,
        topk: usize,
    },
    RewriteQuery {
        query: QueryArg,
        instruction: RewriteInstruction,
    },
    DecomposeQuery {
        query: QueryArg,
    },
    RefineDoc {
        query: QueryArg,
        doc: DocArg,
        instruction: RefineInstruction,
    },
    GenerateAnswer {
        query: QueryArg,
        docs: String,
        additional_instruction: Option<String>,
    },
}

impl Operation {
    pub fn kind(&self) -> OpKind {
        match self {
            Operation::Retrieval { .. } => OpKind::Retrieval,
            Operation::RewriteQuery { .. } => OpKind::RewriteQuery,
            Operation::DecomposeQuery { .. } => OpKind::DecomposeQuery,
            Operation::RefineDoc { .. } => OpKind::RefineDoc,
            Operation::GenerateAnswer { .. } => OpKind::GenerateAnswer,
        }
    }

    pub fn query(&self) -> &QueryArg {
        match self {
            Operation::Retrieval { query, .. }
            | Operation::RewriteQuery { query, .. }
            | Operation::DecomposeQuery { query }
            | Operation::RefineDoc { query, .. }
            | Operation::GenerateAnswer { query, .. } => query,
        }
    }
}

/// One plan statement: an operation and the variable it assigns, if any.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bind: Option<String>,
    pub op: Operation,
}

impl Step {
    pub fn new(bind: Option<&str>, op: Operation) -> Self {
        Self {
            bind: bind.map(str::to_string),
            op,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Teacher,
    Policy,
    Manual,
}

/// Static type of a plan variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarType {
    Text,
    /// Rewrites; used as a single query through the first element.
    Queries,
    /// Decomposition output; fans out when fed to `Retrieval`.
    SubQueries,
    Docs,
}

impl VarType {
    pub fn produced_by(kind: OpKind) -> VarType {
        match kind {
            OpKind::Retrieval => VarType::Docs,
            OpKind::RewriteQuery => VarType::Queries,
            OpKind::DecomposeQuery => VarType::SubQueries,
            OpKind::RefineDoc | OpKind::GenerateAnswer => VarType::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("plan is empty")]
    Empty,
    #[error("plan has {len} operations, limit is {max}")]
    TooLong { len: usize, max: usize },
    #[error("plan does not end with `final_answer = GenerateAnswer(...)`")]
    MissingTerminal,
    #[error("GenerateAnswer appears before the final step (step {step})")]
    EarlyTerminal { step: usize },
    #[error("step {step}: topk must be at least 1")]
    InvalidTopk { step: usize },
    #[error("step {step}: undefined variable `{name}`")]
    UndefinedVariable { step: usize, name: String },
    #[error("step {step}: variable `{name}` cannot be used as {expected}")]
    TypeMismatch {
        step: usize,
        name: String,
        expected: &'static str,
    },
    #[error("step {step}: cannot assign to reserved name `{name}`")]
    ReservedName { step: usize, name: String },
    #[error("step {step}: sub-queries `{name}` already fanned out by an earlier Retrieval")]
    FanOutBudget { step: usize, name: String },
    #[error("step {step}: nested decomposition of `{name}`")]
    NestedDecompose { step: usize, name: String },
    #[error("step {step}: {message}")]
    Argument { step: usize, message: String },
}

impl PlanError {
    /// Zero-based step the error refers to, when there is one.
    pub fn step(&self) -> Option<usize> {
        match self {
            PlanError::InvalidTopk { step }
            | PlanError::EarlyTerminal { step }
            | PlanError::UndefinedVariable { step, .. }
            | PlanError::TypeMismatch { step, .. }
            | PlanError::ReservedName { step, .. }
            | PlanError::FanOutBudget { step, .. }
            | PlanError::NestedDecompose { step, .. }
            | PlanError::Argument { step, .. } => Some(*step),
            _ => None,
        }
    }
}

/// Argument defaults used when a plan is built from bare operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanDefaults {
    pub topk: usize,
    pub rewrite: RewriteInstruction,
    pub refine: RefineInstruction,
}

impl Default for PlanDefaults {
    fn default() -> Self {
        Self {
            topk: 5,
            rewrite: RewriteInstruction::Clarify,
            refine: RefineInstruction::Summarize,
        }
    }
}

/// An ordered, validated sequence of operations ending in `GenerateAnswer`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Plan {
    steps: Vec<Step>,
    source: PlanSource,
}

impl Plan {
    pub fn new(steps: Vec<Step>, source: PlanSource) -> Result<Self, PlanError> {
        Self::with_max_len(steps, source, DEFAULT_MAX_PLAN_LEN)
    }

    pub fn with_max_len(
        steps: Vec<Step>,
        source: PlanSource,
        max_len: usize,
    ) -> Result<Self, PlanError> {
        check_steps(&steps, max_len)?;
        Ok(Self { steps, source })
    }

    /// `final_answer = GenerateAnswer(question, doc_list)`.
    pub fn trivial(source: PlanSource) -> Self {
        Self {
            steps: vec![Step::new(
                Some(FINAL_ANSWER),
                Operation::GenerateAnswer {
                    query: QueryArg::question(),
                    docs: BOUND_DOC_LIST.to_string(),
                    additional_instruction: None,
                },
            )],
            source,
        }
    }

    /// Builds the canonical program for a kind sequence.
    ///
    /// Dataflow: each op reads the most recent query and document list.
    /// `DecomposeQuery` leaves the scalar query alone and queues its sub-queries
    /// for the next `Retrieval`; `RefineDoc` refines the first current document.
    /// A missing terminal `GenerateAnswer` is appended.
    pub fn from_kinds(
        kinds: &[OpKind],
        defaults: PlanDefaults,
        source: PlanSource,
        max_len: usize,
    ) -> Result<Self, PlanError> {
        let mut steps = Vec::with_capacity(kinds.len() + 1);
        let mut query = BOUND_QUESTION.to_string();
        let mut docs = BOUND_DOC_LIST.to_string();
        let mut pending_subqueries: Option<String> = None;
        let mut counters = [0usize; OpKind::COUNT];
        let mut kinds = kinds.to_vec();
        if kinds.last() != Some(&OpKind::GenerateAnswer) {
            kinds.push(OpKind::GenerateAnswer);
        }
        for kind in kinds {
            counters[kind.index()] += 1;
            let n = counters[kind.index()];
            let step = match kind {
                OpKind::Retrieval => {
                    let q = pending_subqueries.take().unwrap_or_else(|| query.clone());
                    let name = format!("docs{n}");
                    docs = name.clone();
                    Step::new(
                        Some(&name),
                        Operation::Retrieval {
                            query: QueryArg::Var(q),
                            topk: defaults.topk,
                        },
                    )
                }
                OpKind::RewriteQuery => {
                    let name = format!("query{n}");
                    let step = Step::new(
                        Some(&name),
                        Operation::RewriteQuery {
                            query: QueryArg::Var(query.clone()),
                            instruction: defaults.rewrite,
                        },
                    );
                    query = name;
                    step
                }
                OpKind::DecomposeQuery => {
                    let name = format!("subqueries{n}");
                    pending_subqueries = Some(name.clone());
                    Step::new(
                        Some(&name),
                        Operation::DecomposeQuery {
                            query: QueryArg::Var(query.clone()),
                        },
                    )
                }
                OpKind::RefineDoc => Step::new(
                    Some(&format!("refined{n}")),
                    Operation::RefineDoc {
                        query: QueryArg::Var(query.clone()),
                        doc: DocArg {
                            source: docs.clone(),
                            index: Some(0),
                        },
                        instruction: defaults.refine,
                    },
                ),
                OpKind::GenerateAnswer => Step::new(
                    Some(FINAL_ANSWER),
                    Operation::GenerateAnswer {
                        query: QueryArg::Var(query.clone()),
                        docs: docs.clone(),
                        additional_instruction: None,
                    },
                ),
            };
            steps.push(step);
        }
        Self::with_max_len(steps, source, max_len)
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn source(&self) -> PlanSource {
        self.source
    }

    pub fn with_source(mut self, source: PlanSource) -> Self {
        self.source = source;
        self
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn kinds(&self) -> Vec<OpKind> {
        self.steps.iter().map(|s| s.op.kind()).collect()
    }
}

impl<'de> Deserialize<'de> for Plan {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            steps: Vec<Step>,
            source: PlanSource,
        }
        let raw = Raw::deserialize(deserializer)?;
        Plan::new(raw.steps, raw.source).map_err(serde::de::Error::custom)
    }
}

fn is_reserved(name: &str) -> bool {
    matches!(name, BOUND_QUESTION | BOUND_DOC_LIST | BOUND_PREVIOUS_PRED)
}

fn check_steps(steps: &[Step], max_len: usize) -> Result<(), PlanError> {
    if steps.is_empty() {
        return Err(PlanError::Empty);
    }
    let last = steps.len() - 1;
    for (i, step) in steps.iter().enumerate() {
        if step.op.kind() == OpKind::GenerateAnswer && i != last {
            return Err(PlanError::EarlyTerminal { step: i });
        }
    }
    let terminal = &steps[last];
    if terminal.op.kind() != OpKind::GenerateAnswer
        || terminal.bind.as_deref() != Some(FINAL_ANSWER)
    {
        return Err(PlanError::MissingTerminal);
    }
    if steps.len() > max_len {
        return Err(PlanError::TooLong {
            len: steps.len(),
            max: max_len,
        });
    }

    let mut env: HashMap<&str, VarType> = HashMap::from([
        (BOUND_QUESTION, VarType::Text),
        (BOUND_DOC_LIST, VarType::Docs),
        (BOUND_PREVIOUS_PRED, VarType::Text),
    ]);
    let mut fanned_out: HashSet<&str> = HashSet::new();

    for (i, step) in steps.iter().enumerate() {
        let lookup = |name: &str| -> Result<VarType, PlanError> {
            env.get(name)
                .copied()
                .ok_or_else(|| PlanError::UndefinedVariable {
                    step: i,
                    name: name.to_string(),
                })
        };
        let query_ty = match step.op.query() {
            QueryArg::Var(name) => {
                let ty = lookup(name)?;
                if ty == VarType::Docs {
                    return Err(PlanError::TypeMismatch {
                        step: i,
                        name: name.clone(),
                        expected: "a query",
                    });
                }
                Some((name.as_str(), ty))
            }
            QueryArg::Literal(text) => {
                if text.trim().is_empty() {
                    return Err(PlanError::Argument {
                        step: i,
                        message: "empty query literal".into(),
                    });
                }
                None
            }
        };
        match &step.op {
            Operation::Retrieval { topk, .. } => {
                if *topk == 0 {
                    return Err(PlanError::InvalidTopk { step: i });
                }
                if let Some((name, VarType::SubQueries)) = query_ty {
                    if !fanned_out.insert(name) {
                        return Err(PlanError::FanOutBudget {
                            step: i,
                            name: name.to_string(),
                        });
                    }
                }
            }
            Operation::DecomposeQuery { .. } => {
                if let Some((name, VarType::SubQueries)) = query_ty {
                    return Err(PlanError::NestedDecompose {
                        step: i,
                        name: name.to_string(),
                    });
                }
            }
            Operation::RefineDoc { doc, .. } => {
                if lookup(&doc.source)? != VarType::Docs {
                    return Err(PlanError::TypeMismatch {
                        step: i,
                        name: doc.source.clone(),
                        expected: "a document list",
                    });
                }
            }
            Operation::GenerateAnswer { docs, .. } => {
                if lookup(docs)? != VarType::Docs {
                    return Err(PlanError::TypeMismatch {
                        step: i,
                        name: docs.clone(),
                        expected: "a document list",
                    });
                }
            }
            Operation::RewriteQuery { .. } => {}
        }
        if let Some(bind) = &step.bind {
            if is_reserved(bind) {
                return Err(PlanError::ReservedName {
                    step: i,
                    name: bind.clone(),
                });
            }
            // rebinding a fanned-out name starts a fresh budget
            fanned_out.remove(bind.as_str());
            env.insert(bind.as_str(), VarType::produced_by(step.op.kind()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("preferred reward {plus} must strictly exceed dispreferred reward {minus}")]
pub struct TripleError {
    pub plus: f64,
    pub minus: f64,
}

/// `(state, preferred plan, dispreferred plan)` with their rewards.
#[derive(Debug, Clone)]
pub struct PreferenceTriple {
    state: Arc<RagState>,
    preferred: Plan,
    dispreferred: Plan,
    reward_plus: f64,
    reward_minus: f64,
}

impl PreferenceTriple {
    pub fn new(
        state: Arc<RagState>,
        preferred: Plan,
        dispreferred: Plan,
        reward_plus: f64,
        reward_minus: f64,
    ) -> Result<Self, TripleError> {
        let in_range = |r: f64| (0.0..=1.0).contains(&r);
        if !(reward_plus > reward_minus && in_range(reward_plus) && in_range(reward_minus)) {
            return Err(TripleError {
                plus: reward_plus,
                minus: reward_minus,
            });
        }
        Ok(Self {
            state,
            preferred,
            dispreferred,
            reward_plus,
            reward_minus,
        })
    }

    pub fn state(&self) -> &RagState {
        &self.state
    }

    pub fn preferred(&self) -> &Plan {
        &self.preferred
    }

    pub fn dispreferred(&self) -> &Plan {
        &self.dispreferred
    }

    pub fn reward_plus(&self) -> f64 {
        self.reward_plus
    }

    pub fn reward_minus(&self) -> f64 {
        self.reward_minus
    }
}
