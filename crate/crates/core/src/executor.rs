//! Plan interpreter: applies a plan to a RAG state and records a trace.
//!
//! The working context starts with `question`, `doc_list` and
//! `previous_pred` bound from the state; each step reads its arguments from
//! the context and binds its result. Operation semantics:
//!
//! * `Retrieval` returns a fresh document list (it replaces, never appends).
//!   Fed a `DecomposeQuery` result it retrieves per sub-query, unions by doc
//!   id keeping the best score, re-ranks by score then id and keeps at most
//!   `topk × #sub-queries` documents.
//! * `RewriteQuery` returns the rewrites; used as a query, the first one.
//! * `DecomposeQuery` returns sub-queries.
//! * `RefineDoc` replaces the referenced document's text in its list and
//!   returns the refined text.
//! * `GenerateAnswer` produces the final answer and ends the plan.
//!
//! Any failing step (backend error, empty query, missing documents) aborts the
//! plan and the trace falls back to the state's initial answer.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{prompts, Backend, GenRequest, Role};
use crate::retrieval::{InvertedIndex, RetrievalError};
use crate::types::{
    DocArg, Document, OpKind, Operation, Plan, QueryArg, RagState, RefineInstruction,
    RewriteInstruction, BOUND_DOC_LIST, BOUND_PREVIOUS_PRED, BOUND_QUESTION,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub max_tokens: usize,
    /// Wall-clock step durations make traces non-reproducible, so they are opt-in.
    pub record_timing: bool,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            max_tokens: 256,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: OpKind,
    pub input_digest: String,
    pub output_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_micros: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub steps: Vec<StepRecord>,
    pub final_answer: String,
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    Queries(Vec<String>),
    SubQueries(Vec<String>),
    Docs(Vec<Document>),
}

impl Value {
    fn digest_input(&self) -> String {
        match self {
            Value::Text(t) => format!("text:{t}"),
            Value::Queries(q) => format!("queries:{}", q.join("\u{1f}")),
            Value::SubQueries(q) => format!("subqueries:{}", q.join("\u{1f}")),
            Value::Docs(d) => {
                let parts: Vec<String> = d
                    .iter()
                    .map(|d| match d.score {
                        Some(s) => format!("{}|{}|{:016x}", d.id, d.text, s.to_bits()),
                        None => format!("{}|{}|-", d.id, d.text),
                    })
                    .collect();
                format!("docs:{}", parts.join("\u{1f}"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StepError {
    #[error("backend: {0}")]
    Backend(#[from] crate::backend::BackendError),
    #[error("retrieval: {0}")]
    Retrieval(String),
    #[error("undefined variable `{0}`")]
    Undefined(String),
    #[error("`{0}` has the wrong type")]
    Type(String),
    #[error("empty value for `{0}`")]
    Empty(String),
    #[error("document index {index} out of range for `{list}` ({len} documents)")]
    DocIndex {
        list: String,
        index: usize,
        len: usize,
    },
}

impl From<RetrievalError> for StepError {
    fn from(e: RetrievalError) -> Self {
        StepError::Retrieval(e.to_string())
    }
}

fn digest(s: &str) -> String {
    let d = Sha256::digest(s.as_bytes());
    hex::encode(&d[..8])
}

/// Variables visible to the remaining steps of a plan.
#[derive(Debug, Clone)]
pub struct WorkingContext {
    vars: HashMap<String, Value>,
}

/// What a step produced: the bound value, a digest of its inputs, the backend role used.
pub struct StepOutput {
    pub value: Value,
    pub input: String,
    pub role: Option<Role>,
}

impl WorkingContext {
    pub fn new(state: &RagState) -> Self {
        let vars = HashMap::from([
            (BOUND_QUESTION.to_string(), Value::Text(state.question.text.clone())),
            (BOUND_DOC_LIST.to_string(), Value::Docs(state.docs.clone())),
            (
                BOUND_PREVIOUS_PRED.to_string(),
                Value::Text(state.initial_answer.clone()),
            ),
        ]);
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.vars.get(name)
    }

    pub fn bind(&mut self, name: &str, value: Value) {
        self.vars.insert(name.to_string(), value);
    }

    fn lookup(&self, name: &str) -> Result<&Value, StepError> {
        self.vars
            .get(name)
            .ok_or_else(|| StepError::Undefined(name.to_string()))
    }

    /// Resolves a scalar query; list-valued variables yield their first element.
    pub fn query_text(&self, q: &QueryArg) -> Result<String, StepError> {
        let (name, text) = match q {
            QueryArg::Literal(t) => ("<literal>", t.clone()),
            QueryArg::Var(name) => {
                let text = match self.lookup(name)? {
                    Value::Text(t) => t.clone(),
                    Value::Queries(v) | Value::SubQueries(v) => {
                        v.first().cloned().unwrap_or_default()
                    }
                    Value::Docs(_) => return Err(StepError::Type(name.clone())),
                };
                (name.as_str(), text)
            }
        };
        if text.trim().is_empty() {
            return Err(StepError::Empty(name.to_string()));
        }
        Ok(text)
    }

    fn docs(&self, name: &str) -> Result<&Vec<Document>, StepError> {
        match self.lookup(name)? {
            Value::Docs(d) => Ok(d),
            _ => Err(StepError::Type(name.to_string())),
        }
    }

    pub fn apply_retrieval(
        &self,
        query: &QueryArg,
        topk: usize,
        index: &InvertedIndex,
    ) -> Result<StepOutput, StepError> {
        if let QueryArg::Var(name) = query {
            if let Value::SubQueries(subs) = self.lookup(name)? {
                return fan_out(subs, topk, index);
            }
        }
        let q = self.query_text(query)?;
        let docs = index.retrieve(&q, topk)?;
        Ok(StepOutput {
            value: Value::Docs(docs),
            input: format!("{q}\u{1f}{topk}"),
            role: None,
        })
    }

    pub fn apply_rewrite(
        &self,
        query: &QueryArg,
        instruction: RewriteInstruction,
        backend: &dyn Backend,
        cfg: &ExecutorConfig,
    ) -> Result<StepOutput, StepError> {
        let q = self.query_text(query)?;
        let prompt = prompts::rewrite_prompt(&q, instruction);
        let out = backend.generate(&GenRequest::new(prompt.clone()).with_max_tokens(cfg.max_tokens), Role::Rewrite)?;
        let rewrites = split_lines(&out);
        if rewrites.is_empty() {
            return Err(StepError::Empty("rewrites".into()));
        }
        Ok(StepOutput {
            value: Value::Queries(rewrites),
            input: prompt,
            role: Some(Role::Rewrite),
        })
    }

    pub fn apply_decompose(
        &self,
        query: &QueryArg,
        backend: &dyn Backend,
        cfg: &ExecutorConfig,
    ) -> Result<StepOutput, StepError> {
        let q = self.query_text(query)?;
        let prompt = prompts::decompose_prompt(&q);
        let out = backend.generate(&GenRequest::new(prompt.clone()).with_max_tokens(cfg.max_tokens), Role::Decompose)?;
        let subs = split_lines(&out);
        if subs.is_empty() {
            return Err(StepError::Empty("sub-queries".into()));
        }
        Ok(StepOutput {
            value: Value::SubQueries(subs),
            input: prompt,
            role: Some(Role::Decompose),
        })
    }

    /// Refines one document and writes the refined text back into its list.
    pub fn apply_refine(
        &mut self,
        query: &QueryArg,
        doc: &DocArg,
        instruction: RefineInstruction,
        backend: &dyn Backend,
        cfg: &ExecutorConfig,
    ) -> Result<StepOutput, StepError> {
        let q = self.query_text(query)?;
        let i = doc.index.unwrap_or(0);
        let docs = self.docs(&doc.source)?;
        let Some(target) = docs.get(i) else {
            return Err(StepError::DocIndex {
                list: doc.source.clone(),
                index: i,
                len: docs.len(),
            });
        };
        let prompt = prompts::refine_prompt(&q, &target.text, instruction);
        let refined = backend
            .generate(&GenRequest::new(prompt.clone()).with_max_tokens(cfg.max_tokens), Role::Refine)?
            .trim()
            .to_string();
        if let Some(Value::Docs(list)) = self.vars.get_mut(&doc.source) {
            list[i].text = refined.clone();
        }
        Ok(StepOutput {
            value: Value::Text(refined),
            input: prompt,
            role: Some(Role::Refine),
        })
    }

    pub fn apply_generate(
        &self,
        query: &QueryArg,
        docs: &str,
        additional_instruction: Option<&str>,
        backend: &dyn Backend,
        cfg: &ExecutorConfig,
    ) -> Result<StepOutput, StepError> {
        let q = self.query_text(query)?;
        let list = self.docs(docs)?;
        if list.is_empty() {
            return Err(StepError::Empty(docs.to_string()));
        }
        let prompt = prompts::answer_prompt(&q, list, additional_instruction);
        let out = backend.generate(&GenRequest::new(prompt.clone()).with_max_tokens(cfg.max_tokens), Role::Answer)?;
        let (answer, _) = split_answer(&out);
        if answer.is_empty() {
            return Err(StepError::Empty("answer".into()));
        }
        Ok(StepOutput {
            value: Value::Text(answer),
            input: prompt,
            role: Some(Role::Answer),
        })
    }
}

fn fan_out(subs: &[String], topk: usize, index: &InvertedIndex) -> Result<StepOutput, StepError> {
    let mut best: HashMap<String, Document> = HashMap::new();
    let mut usable = 0usize;
    for q in subs {
        match index.retrieve(q, topk) {
            Ok(docs) => {
                usable += 1;
                for d in docs {
                    match best.get(&d.id) {
                        Some(prev) if prev.score >= d.score => {}
                        _ => {
                            best.insert(d.id.clone(), d);
                        }
                    }
                }
            }
            Err(RetrievalError::EmptyQuery) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if usable == 0 {
        return Err(StepError::Retrieval("no sub-query has tokens".into()));
    }
    let mut docs: Vec<Document> = best.into_values().collect();
    docs.sort_by(|a, b| {
        let (sa, sb) = (a.score.unwrap_or(0.0), b.score.unwrap_or(0.0));
        sb.total_cmp(&sa).then_with(|| a.id.cmp(&b.id))
    });
    docs.truncate(topk * subs.len());
    Ok(StepOutput {
        value: Value::Docs(docs),
        input: format!("{}\u{1f}{topk}", subs.join("\u{1f}")),
        role: None,
    })
}

/// Non-empty lines with list markers (`-`, `*`, `1.`, `2)`) stripped.
fn split_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| {
            let l = l.trim();
            let l = l.trim_start_matches(['-', '*']).trim_start();
            let digits = l.chars().take_while(char::is_ascii_digit).count();
            if digits > 0 && l[digits..].starts_with(['.', ')']) {
                l[digits + 1..].trim().to_string()
            } else {
                l.to_string()
            }
        })
        .filter(|l| !l.is_empty())
        .collect()
}

/// Splits a completion into `(answer, raw reasoning)`.
///
/// When some line starts with `Answer:` (any case) the answer is the rest of
/// the last such line; otherwise the whole trimmed completion is the answer.
pub fn split_answer(completion: &str) -> (String, String) {
    let tagged = completion.lines().rev().find_map(|l| {
        let t = l.trim_start();
        (t.len() >= 7 && t[..7].eq_ignore_ascii_case("answer:")).then(|| t[7..].trim().to_string())
    });
    let answer = tagged.unwrap_or_else(|| completion.trim().to_string());
    (answer, completion.trim().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanillaAnswer {
    pub docs: Vec<Document>,
    pub answer: String,
    /// Full completion, kept as the reasoning trace of a failed answer.
    pub raw: String,
}

pub struct Executor<'a> {
    index: &'a InvertedIndex,
    backend: &'a dyn Backend,
    config: ExecutorConfig,
}

impl<'a> Executor<'a> {
    pub fn new(index: &'a InvertedIndex, backend: &'a dyn Backend, config: ExecutorConfig) -> Self {
        Self {
            index,
            backend,
            config,
        }
    }

    pub fn index(&self) -> &InvertedIndex {
        self.index
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend
    }

    /// Runs `plan` on `state`. Never fails: errors become a fallback to `a0`.
    pub fn execute(&self, state: &RagState, plan: &Plan) -> ExecutionTrace {
        let mut ctx = WorkingContext::new(state);
        let mut steps = Vec::with_capacity(plan.len());
        for step in plan.steps() {
            let started = self.config.record_timing.then(Instant::now);
            let result = self.apply(&mut ctx, &step.op);
            let duration_micros = started.map(|t| t.elapsed().as_micros() as u64);
            match result {
                Ok(out) => {
                    steps.push(StepRecord {
                        kind: step.op.kind(),
                        input_digest: digest(&out.input),
                        output_digest: digest(&out.value.digest_input()),
                        role: out.role,
                        duration_micros,
                        error: None,
                    });
                    if let Operation::GenerateAnswer { .. } = step.op {
                        let Value::Text(answer) = out.value else {
                            unreachable!("GenerateAnswer yields text")
                        };
                        return ExecutionTrace {
                            steps,
                            final_answer: answer,
                            fell_back: false,
                        };
                    }
                    if let Some(bind) = &step.bind {
                        ctx.bind(bind, out.value);
                    }
                }
                Err(e) => {
                    log::debug!("step {:?} failed for `{}`: {e}", step.op.kind(), state.question.id);
                    steps.push(StepRecord {
                        kind: step.op.kind(),
                        input_digest: String::new(),
                        output_digest: String::new(),
                        role: step_role(step.op.kind()),
                        duration_micros,
                        error: Some(e.to_string()),
                    });
                    return ExecutionTrace {
                        steps,
                        final_answer: state.initial_answer.clone(),
                        fell_back: true,
                    };
                }
            }
        }
        unreachable!("valid plans end in GenerateAnswer")
    }

    /// One retrieve-then-generate pass producing an initial answer.
    ///
    /// `docs` skips retrieval when given. Unlike [`Executor::execute`] this
    /// has nothing to fall back on, so failures are returned.
    pub fn vanilla(&self, question: &str, docs: Option<Vec<Document>>, topk: usize) -> Result<VanillaAnswer, StepError> {
        let docs = match docs {
            Some(d) => d,
            None => self.index.retrieve(question, topk)?,
        };
        if docs.is_empty() {
            return Err(StepError::Empty(BOUND_DOC_LIST.into()));
        }
        let prompt = prompts::answer_prompt(question, &docs, None);
        let out = self.backend.generate(
            &GenRequest::new(prompt).with_max_tokens(self.config.max_tokens),
            Role::Answer,
        )?;
        let (answer, raw) = split_answer(&out);
        if answer.is_empty() {
            return Err(StepError::Empty("answer".into()));
        }
        Ok(VanillaAnswer { docs, answer, raw })
    }

    fn apply(&self, ctx: &mut WorkingContext, op: &Operation) -> Result<StepOutput, StepError> {
        let cfg = &self.config;
        match op {
            Operation::Retrieval { query, topk } => ctx.apply_retrieval(query, *topk, self.index),
            Operation::RewriteQuery { query, instruction } => {
                ctx.apply_rewrite(query, *instruction, self.backend, cfg)
            }
            Operation::DecomposeQuery { query } => ctx.apply_decompose(query, self.backend, cfg),
            Operation::RefineDoc {
                query,
                doc,
                instruction,
            } => ctx.apply_refine(query, doc, *instruction, self.backend, cfg),
            Operation::GenerateAnswer {
                query,
                docs,
                additional_instruction,
            } => ctx.apply_generate(query, docs, additional_instruction.as_deref(), self.backend, cfg),
        }
    }
}

fn step_role(kind: OpKind) -> Option<Role> {
    match kind {
        OpKind::Retrieval => None,
        OpKind::RewriteQuery => Some(Role::Rewrite),
        OpKind::DecomposeQuery => Some(Role::Decompose),
        OpKind::RefineDoc => Some(Role::Refine),
        OpKind::GenerateAnswer => Some(Role::Answer),
    }
}
