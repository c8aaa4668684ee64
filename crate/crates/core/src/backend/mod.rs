//! Generation backends shared by the executor, the judge and the teacher.

mod http;
pub mod prompts;
mod scripted;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use scripted::{FaultInjector, Matcher, ScriptedBackend, ScriptedRule, BUILTIN_DEFAULT_RESPONSE};

use crate::dsl::parse_plan_with;
use crate::types::{Document, Phase, Plan, PlanSource, RagState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Answer,
    Rewrite,
    Decompose,
    Refine,
    Judge,
    Teacher,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Answer => "answer",
            Role::Rewrite => "rewrite",
            Role::Decompose => "decompose",
            Role::Refine => "refine",
            Role::Judge => "judge",
            Role::Teacher => "teacher",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "answer" => Some(Role::Answer),
            "rewrite" => Some(Role::Rewrite),
            "decompose" => Some(Role::Decompose),
            "refine" => Some(Role::Refine),
            "judge" => Some(Role::Judge),
            "teacher" => Some(Role::Teacher),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 256,
            temperature: 0.0,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_tokens(mut self, n: usize) -> Self {
        self.max_tokens = n;
        self
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A text generator. Implementations must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    /// Raw completion; callers should go through [`Backend::generate`].
    fn complete(&self, req: &GenRequest, role: Role) -> Result<String, BackendError>;

    /// Validates the request and rejects empty completions.
    fn generate(&self, req: &GenRequest, role: Role) -> Result<String, BackendError> {
        req.validate()?;
        let text = self.complete(req, role)?;
        if text.trim().is_empty() {
            return Err(BackendError::MalformedResponse(format!(
                "empty completion for role `{role}`"
            )));
        }
        Ok(text)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, req: &GenRequest, role: Role) -> Result<String, BackendError> {
        (**self).complete(req, role)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, req: &GenRequest, role: Role) -> Result<String, BackendError> {
        (**self).complete(req, role)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, req: &GenRequest, role: Role) -> Result<String, BackendError> {
        (**self).complete(req, role)
    }
}

/// Reads a verdict from judge output: the first word equal to `correct` or
/// `incorrect`, case-insensitively. Anything else counts as incorrect.
pub fn parse_verdict(text: &str) -> bool {
    for word in text.split(|c: char| !c.is_alphabetic()) {
        if word.eq_ignore_ascii_case("correct") {
            return true;
        }
        if word.eq_ignore_ascii_case("incorrect") {
            return false;
        }
    }
    false
}

/// Coarse correctness estimate of an answer. Takes no gold answers by construction.
pub fn judge_correctness(
    backend: &dyn Backend,
    question: &str,
    docs: &[Document],
    answer: &str,
) -> Result<bool, BackendError> {
    let req = GenRequest::new(prompts::judge_prompt(question, docs, answer)).with_max_tokens(8);
    Ok(parse_verdict(&backend.generate(&req, Role::Judge)?))
}

/// Pulls program text out of a completion, dropping Markdown code fences.
pub fn extract_program(completion: &str) -> String {
    let mut inside = false;
    let mut fenced = Vec::new();
    let mut saw_fence = false;
    for line in completion.lines() {
        if line.trim_start().starts_with("```") {
            saw_fence = true;
            if inside {
                break;
            }
            inside = true;
            continue;
        }
        if inside {
            fenced.push(line);
        }
    }
    if saw_fence {
        fenced.join("\n")
    } else {
        completion.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherOptions {
    pub temperature: f64,
    pub max_tokens: usize,
    pub max_plan_len: usize,
}

impl Default for TeacherOptions {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 256,
            max_plan_len: crate::types::DEFAULT_MAX_PLAN_LEN,
        }
    }
}

/// Asks the teacher for `n` candidate programs and keeps the distinct valid ones.
///
/// Completion `j` is requested with seed `j`. Unparsable completions are
/// dropped with a warning; if none survive, the trivial plan is returned.
pub fn propose_plans(
    backend: &dyn Backend,
    state: &RagState,
    n: usize,
    opts: TeacherOptions,
) -> Result<Vec<Plan>, BackendError> {
    if state.phase != Phase::OffPolicy {
        return Err(BackendError::InvalidRequest(
            "teacher proposals require an off-policy state".into(),
        ));
    }
    if n < 2 {
        return Err(BackendError::InvalidRequest(format!(
            "need at least 2 candidates, got {n}"
        )));
    }
    let prompt = prompts::teacher_prompt(state);
    let mut plans: Vec<Plan> = Vec::new();
    for j in 0..n {
        let req = GenRequest::new(prompt.clone())
            .with_seed(j as u64)
            .with_temperature(opts.temperature)
            .with_max_tokens(opts.max_tokens);
        let completion = backend.generate(&req, Role::Teacher)?;
        let program = extract_program(&completion);
        match parse_plan_with(&program, PlanSource::Teacher, opts.max_plan_len) {
            Ok(plan) => {
                if !plans.contains(&plan) {
                    plans.push(plan);
                }
            }
            Err(e) => log::warn!(
                "dropping teacher candidate {j} for `{}`: {e}",
                state.question.id
            ),
        }
    }
    if plans.is_empty() {
        plans.push(Plan::trivial(PlanSource::Teacher));
    }
    Ok(plans)
}
