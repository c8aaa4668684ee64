//! Deterministic rule-table backend for tests and desk-scale runs.
//!
//! Rules file: JSONL, one `{"role", "match", "seed", "response"}` object per line.
//!
//! * `role` is a role name (`answer`, `rewrite`, ...) or `*` for any role.
//! * `match` is a substring or a list of substrings that must all occur in
//!   the prompt. Absent or empty means the rule is a default.
//! * `seed`, when present, restricts the rule to requests with that seed.
//! * `response` may contain `{seed}` and `{line:PREFIX}`; the latter expands to
//!   the rest of the first prompt line starting with `PREFIX`.
//!
//! Lookup: among specific rules (non-empty `match` or a `seed`) for the role or
//! `*`, exactly one may match, otherwise the call fails with an ambiguity
//! error. With no specific match the role's default is used, then the `*`
//! default, then a built-in fallback.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, GenRequest, Role};

/// Response used when no rule, not even a default, applies.
pub const BUILTIN_DEFAULT_RESPONSE: &str = "I don't know";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Matcher {
    One(String),
    All(Vec<String>),
}

impl Matcher {
    fn needles(&self) -> Vec<&str> {
        match self {
            Matcher::One(s) if s.is_empty() => vec![],
            Matcher::One(s) => vec![s.as_str()],
            Matcher::All(v) => v.iter().map(String::as_str).filter(|s| !s.is_empty()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedRule {
    /// Role name or `*`.
    pub role: String,
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub matcher: Option<Matcher>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub response: String,
}

impl ScriptedRule {
    pub fn new(role: &str, needles: &[&str], response: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            matcher: if needles.is_empty() {
                None
            } else {
                Some(Matcher::All(needles.iter().map(|s| s.to_string()).collect()))
            },
            seed: None,
            response: response.into(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn needles(&self) -> Vec<&str> {
        self.matcher.as_ref().map(Matcher::needles).unwrap_or_default()
    }

    fn is_default(&self) -> bool {
        self.seed.is_none() && self.needles().is_empty()
    }

    fn applies_to(&self, role: Role) -> bool {
        self.role == "*" || self.role == role.as_str()
    }

    fn matches(&self, prompt: &str, seed: Option<u64>) -> bool {
        if let Some(s) = self.seed {
            if seed != Some(s) {
                return false;
            }
        }
        self.needles().iter().all(|n| prompt.contains(n))
    }

    /// Identity used to reject duplicate rules.
    fn key(&self) -> (String, Vec<String>, Option<u64>) {
        let mut needles: Vec<String> = self.needles().into_iter().map(str::to_string).collect();
        needles.sort();
        (self.role.clone(), needles, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    rules: Vec<ScriptedRule>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptedRule>) -> Result<Self, BackendError> {
        let mut seen = HashSet::new();
        for r in &rules {
            if r.role != "*" && Role::parse(&r.role).is_none() {
                return Err(BackendError::InvalidRequest(format!("unknown role `{}`", r.role)));
            }
            if r.response.trim().is_empty() {
                return Err(BackendError::InvalidRequest(format!(
                    "rule for role `{}` has an empty response",
                    r.role
                )));
            }
            if !seen.insert(r.key()) {
                return Err(BackendError::InvalidRequest(format!(
                    "duplicate rule for role `{}` with match {:?}",
                    r.role,
                    r.needles()
                )));
            }
        }
        Ok(Self { rules })
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, BackendError> {
        let mut rules = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rule: ScriptedRule = serde_json::from_str(&line).map_err(|e| {
                BackendError::InvalidRequest(format!("rules line {}: {e}", i + 1))
            })?;
            rules.push(rule);
        }
        Self::new(rules)
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let f = std::fs::File::open(path)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(std::io::BufReader::new(f))
    }

    pub fn rules(&self) -> &[ScriptedRule] {
        &self.rules
    }

    fn lookup(&self, role: Role, prompt: &str, seed: Option<u64>) -> Result<&str, BackendError> {
        let specific: Vec<&ScriptedRule> = self
            .rules
            .iter()
            .filter(|r| r.applies_to(role) && !r.is_default() && r.matches(prompt, seed))
            .collect();
        match specific.len() {
            1 => return Ok(&specific[0].response),
            0 => {}
            n => {
                return Err(BackendError::MalformedResponse(format!(
                    "{n} scripted rules match role `{}`",
                    role.as_str()
                )))
            }
        }
        let role_default = self
            .rules
            .iter()
            .find(|r| r.role == role.as_str() && r.is_default());
        let any_default = self.rules.iter().find(|r| r.role == "*" && r.is_default());
        Ok(role_default
            .or(any_default)
            .map_or(BUILTIN_DEFAULT_RESPONSE, |r| r.response.as_str()))
    }
}

fn expand_template(template: &str, prompt: &str, seed: Option<u64>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let Some(end) = tail.find('}') else {
            out.push_str(tail);
            return out;
        };
        let key = &tail[1..end];
        if key == "seed" {
            match seed {
                Some(s) => out.push_str(&s.to_string()),
                None => out.push_str("none"),
            }
        } else if let Some(prefix) = key.strip_prefix("line:") {
            if let Some(line) = prompt.lines().find_map(|l| l.strip_prefix(prefix)) {
                out.push_str(line.trim());
            }
        } else {
            out.push_str(&tail[..=end]);
        }
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    out
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &GenRequest, role: Role) -> Result<String, BackendError> {
        let template = self.lookup(role, &req.prompt, req.seed)?;
        Ok(expand_template(template, &req.prompt, req.seed))
    }
}

/// Wraps a backend and deterministically fails a fraction of calls.
///
/// A call fails when the first 8 bytes of `sha256(role, seed, prompt)`, read as
/// a big-endian integer, fall below `rate · 2^64`. The decision depends only on
/// the call, so runs are reproducible.
#[derive(Debug, Clone)]
pub struct FaultInjector<B> {
    inner: B,
    rate: f64,
    salt: u64,
}

impl<B: Backend> FaultInjector<B> {
    pub fn new(inner: B, rate: f64, salt: u64) -> Self {
        Self {
            inner,
            rate: rate.clamp(0.0, 1.0),
            salt,
        }
    }

    fn should_fail(&self, req: &GenRequest, role: Role) -> bool {
        let mut h = Sha256::new();
        h.update(self.salt.to_le_bytes());
        h.update(role.as_str().as_bytes());
        h.update(req.seed.unwrap_or(u64::MAX).to_le_bytes());
        h.update(req.prompt.as_bytes());
        let digest = h.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        (u64::from_be_bytes(head) as f64) < self.rate * 18_446_744_073_709_551_616.0
    }
}

impl<B: Backend> Backend for FaultInjector<B> {
    fn complete(&self, req: &GenRequest, role: Role) -> Result<String, BackendError> {
        if self.should_fail(req, role) {
            return Err(BackendError::Unavailable("injected fault".into()));
        }
        self.inner.complete(req, role)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend() -> ScriptedBackend {
        ScriptedBackend::new(vec![
            ScriptedRule::new("answer", &["q: capital of France"], "Paris"),
            ScriptedRule::new("answer", &[], "no idea"),
            ScriptedRule::new("rewrite", &[], "{line:Query: } clarified"),
            ScriptedRule::new("teacher", &[], "final_answer = GenerateAnswer(question, doc_list)").with_seed(1),
            ScriptedRule::new("*", &[], "fallback"),
        ])
        .unwrap()
    }

    fn req(prompt: &str) -> GenRequest {
        GenRequest::new(prompt)
    }

    #[test]
    fn rule_lookup_and_defaults() {
        let b = backend();
        assert_eq!(b.generate(&req("q: capital of France"), Role::Answer).unwrap(), "Paris");
        assert_eq!(b.generate(&req("q: capital of Spain"), Role::Answer).unwrap(), "no idea");
        assert_eq!(b.generate(&req("anything"), Role::Judge).unwrap(), "fallback");
    }

    #[test]
    fn seed_specific_rules() {
        let b = backend();
        let r = req("plan please").with_seed(1);
        assert!(b.generate(&r, Role::Teacher).unwrap().starts_with("final_answer"));
        assert_eq!(b.generate(&req("plan please").with_seed(2), Role::Teacher).unwrap(), "fallback");
    }

    #[test]
    fn line_template() {
        let b = backend();
        let out = b.generate(&req("Rewrite it\nQuery: who won\nRewrites:"), Role::Rewrite).unwrap();
        assert_eq!(out, "who won clarified");
    }

    #[test]
    fn ambiguous_rules_fail() {
        let b = ScriptedBackend::new(vec![
            ScriptedRule::new("answer", &["alpha"], "A"),
            ScriptedRule::new("answer", &["beta"], "B"),
        ])
        .unwrap();
        assert!(matches!(
            b.generate(&req("alpha beta"), Role::Answer),
            Err(BackendError::MalformedResponse(_))
        ));
        assert_eq!(b.generate(&req("zzz"), Role::Answer).unwrap(), BUILTIN_DEFAULT_RESPONSE);
    }

    #[test]
    fn duplicate_and_invalid_rules_rejected() {
        assert!(ScriptedBackend::new(vec![
            ScriptedRule::new("answer", &["x", "y"], "1"),
            ScriptedRule::new("answer", &["y", "x"], "2"),
        ])
        .is_err());
        assert!(ScriptedBackend::new(vec![ScriptedRule::new("critic", &[], "1")]).is_err());
    }

    #[test]
    fn jsonl_rules() {
        let text = r#"{"role": "answer", "match": "capital", "response": "Paris"}
{"role": "judge", "match": ["Answer: unknown"], "response": "INCORRECT"}

{"role": "judge", "response": "CORRECT"}"#;
        let b = ScriptedBackend::from_jsonl(text.as_bytes()).unwrap();
        assert_eq!(b.rules().len(), 3);
        assert_eq!(b.generate(&req("Answer: unknown"), Role::Judge).unwrap(), "INCORRECT");
        assert_eq!(b.generate(&req("Answer: Paris"), Role::Judge).unwrap(), "CORRECT");
    }

    #[test]
    fn fault_injection_is_deterministic() {
        let f = FaultInjector::new(backend(), 0.5, 7);
        let mut failures = 0;
        for i in 0..200 {
            let r = req(&format!("prompt {i}"));
            let a = f.generate(&r, Role::Answer).is_err();
            assert_eq!(a, f.generate(&r, Role::Answer).is_err());
            failures += a as usize;
        }
        assert!((60..140).contains(&failures), "{failures}");
        let never = FaultInjector::new(backend(), 0.0, 7);
        assert!(never.generate(&req("x"), Role::Answer).is_ok());
        let always = FaultInjector::new(backend(), 1.0, 7);
        assert!(always.generate(&req("x"), Role::Answer).is_err());
    }
}
