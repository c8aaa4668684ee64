//! JSONL dataset records and their conversion into planner states.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ragplan_core::backend::{judge_correctness, Backend};
use ragplan_core::retrieval::InvertedIndex;
use ragplan_core::reward::{correctness_label_with, CorrectnessRule};
use ragplan_core::types::{validate_state, Document, Phase, Question, RagState};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One question. `answer` fills in `initial_answer`, `docs` and a label;
/// training and evaluation read them back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_trace: Option<String>,
    /// Fixed retrieval result; overrides BM25 when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub docs: Option<Vec<Document>>,
    /// Oracle correctness of `initial_answer`, derived from the golds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
    /// Judge estimate of the same, derived without the golds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judged: Option<bool>,
}

impl DatasetRecord {
    pub fn new(id: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            gold_answers: Vec::new(),
            initial_answer: None,
            reasoning_trace: None,
            doc_ids: None,
            docs: None,
            label: None,
            judged: None,
        }
    }

    /// An answered record carrying everything in `state`.
    pub fn from_state(state: &RagState) -> Self {
        let mut r = Self::new(state.question.id.clone(), state.question.text.clone());
        r.gold_answers = state.question.gold_answers.clone().unwrap_or_default();
        r.initial_answer = Some(state.initial_answer.clone());
        r.docs = Some(state.docs.clone());
        match state.phase {
            Phase::OffPolicy => {
                r.label = state.correctness;
                r.reasoning_trace = state.reasoning_trace.clone();
            }
            _ => r.judged = state.correctness,
        }
        r
    }

    fn golds(&self) -> Result<Vec<String>, CliError> {
        if self.gold_answers.is_empty() {
            return Err(CliError::Data(format!("record `{}` has no gold_answers", self.id)));
        }
        Ok(self.gold_answers.clone())
    }

    fn answered(&self) -> Result<(&str, &[Document]), CliError> {
        match (&self.initial_answer, &self.docs) {
            (Some(a), Some(d)) => Ok((a, d)),
            _ => Err(CliError::Data(format!(
                "record `{}` has no initial answer or documents; run `answer` first",
                self.id
            ))),
        }
    }

    fn checked(&self, state: RagState) -> Result<RagState, CliError> {
        match validate_state(&state).first() {
            Some(v) => Err(CliError::Data(format!("record `{}`: {v}", self.id))),
            None => Ok(state),
        }
    }

    /// Off-policy state: oracle label (computed when missing) and the stored trace.
    pub fn off_policy_state(&self, rule: CorrectnessRule) -> Result<RagState, CliError> {
        let golds = self.golds()?;
        let (a0, docs) = self.answered()?;
        let label = match self.label {
            Some(l) => l,
            None => correctness_label_with(a0, &golds, rule).map_err(|e| CliError::Data(e.to_string()))?,
        };
        self.checked(RagState {
            question: Question::new(self.id.clone(), self.question.clone()).with_golds(golds),
            docs: docs.to_vec(),
            initial_answer: a0.to_string(),
            phase: Phase::OffPolicy,
            correctness: Some(label),
            reasoning_trace: if label { None } else { self.reasoning_trace.clone() },
        })
    }

    /// On-policy state: judge estimate, asking the judge when the record has none.
    /// Golds stay attached for reward computation only.
    pub fn on_policy_state(&self, judge: &dyn Backend) -> Result<RagState, CliError> {
        let golds = self.golds()?;
        let (a0, docs) = self.answered()?;
        let judged = match self.judged {
            Some(j) => j,
            None => judge_correctness(judge, &self.question, docs, a0)?,
        };
        self.checked(RagState {
            question: Question::new(self.id.clone(), self.question.clone()).with_golds(golds),
            docs: docs.to_vec(),
            initial_answer: a0.to_string(),
            phase: Phase::OnPolicy,
            correctness: Some(judged),
            reasoning_trace: None,
        })
    }

    /// Deployment view: no golds, the judge estimate if the record has one.
    pub fn inference_state(&self) -> Result<RagState, CliError> {
        let (a0, docs) = self.answered()?;
        self.checked(RagState {
            question: Question::new(self.id.clone(), self.question.clone()),
            docs: docs.to_vec(),
            initial_answer: a0.to_string(),
            phase: Phase::Inference,
            correctness: self.judged,
            reasoning_trace: None,
        })
    }

    /// The inference view with golds attached for scoring.
    pub fn scored_state(&self) -> Result<RagState, CliError> {
        let golds = self.golds()?;
        let mut s = self.inference_state()?;
        s.question = s.question.with_golds(golds);
        s.phase = Phase::OnPolicy;
        Ok(s)
    }

    /// Fixed documents looked up in `index`, when the record names any.
    pub fn fixed_docs(&self, index: &InvertedIndex) -> Result<Option<Vec<Document>>, CliError> {
        let Some(ids) = &self.doc_ids else {
            return Ok(None);
        };
        ids.iter()
            .map(|id| {
                index
                    .document(id)
                    .cloned()
                    .ok_or_else(|| CliError::Data(format!("record `{}`: unknown doc id `{id}`", self.id)))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| CliError::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a dataset, rejecting duplicate ids, sorted by id.
pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, CliError> {
    let mut records: Vec<DatasetRecord> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(CliError::Data(format!("{}: duplicate id `{}`", path.display(), r.id)));
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}
