//! A small scripted question set with three planted failure modes.
//!
//! Every question asks for the code word of a distinct item. Three kinds:
//!
//! * `MissedRetrieval`: the baseline documents are filler, the initial answer
//!   is `unknown` and the judge flags it. Retrieving on the question finds
//!   the document holding the code word.
//! * `Grounded`: the baseline documents hold the code word (first position)
//!   and the initial answer is right. Fresh retrieval surfaces a decoy with
//!   a wrong code word, so any intervention hurts.
//! * `Hallucinated`: the baseline documents are confidently scored filler and
//!   the initial answer is a wrong code word that the judge accepts. Only
//!   retrieval fixes it, and only on-policy data shows the judge's mistake.
//!
//! The off-policy split holds the first two kinds only. Hallucinated cases
//! dominate the on-policy split; the held-out split is balanced.

use crate::backend::{judge_correctness, BackendError, ScriptedBackend, ScriptedRule};
use crate::dpo::TrainConfig;
use crate::retrieval::{build_index, Corpus, InvertedIndex};
use crate::types::{Document, Phase, Question, RagState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    MissedRetrieval,
    Grounded,
    Hallucinated,
}

pub struct Scenario {
    pub corpus: Corpus,
    pub index: InvertedIndex,
    pub backend: ScriptedBackend,
    pub rules: Vec<ScriptedRule>,
    /// Off-policy states: oracle correctness and reasoning traces.
    pub off_train: Vec<RagState>,
    /// On-policy states: judge correctness, golds kept for reward only.
    pub on_train: Vec<RagState>,
    /// Held-out states in the on-policy form; evaluation strips the golds.
    pub held_out: Vec<RagState>,
    pub cases: Vec<(String, Case)>,
    pub config: TrainConfig,
}

/// Split sizes and filler scoring of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    /// `(MissedRetrieval, Grounded)` counts in the off-policy split.
    pub off: [usize; 2],
    /// `(MissedRetrieval, Grounded, Hallucinated)` counts in the on-policy split.
    pub on: [usize; 3],
    /// Same layout as `on`, for the held-out split.
    pub held_out: [usize; 3],
    /// Retriever score attached to the filler documents of hallucinated cases.
    pub filler_score: f64,
    pub config: TrainConfig,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            off: [5, 5],
            on: [5, 5, 15],
            held_out: [5, 5, 5],
            filler_score: 50.0,
            config: TrainConfig {
                learning_rate: 2.0,
                max_plan_len: 2,
                topk: 2,
                seed: 17,
                ..TrainConfig::default()
            },
        }
    }
}

/// Question count of the default spec.
pub const SCENARIO_QUESTIONS: usize = 50;

fn question_text(i: usize) -> String {
    format!("what is the code word of item{i:02}?")
}

fn gold(i: usize) -> String {
    format!("ans{i:02}")
}

fn wrong(i: usize) -> String {
    format!("wrong{i:02}")
}

fn filler(i: usize, j: usize) -> String {
    format!("filler{i:02}{j} paragraph about weather{i:02} and harbor{i:02} traffic")
}

const TEACHER_PROGRAMS: [&str; 4] = [
    "final_answer = GenerateAnswer(question, doc_list)",
    "docs = Retrieval(question, 2)\nfinal_answer = GenerateAnswer(question, docs)",
    "q = RewriteQuery(question, \"clarify\")\nfinal_answer = GenerateAnswer(q, doc_list)",
    "d = RefineDoc(question, doc_list[0], \"summarize\")\nfinal_answer = GenerateAnswer(question, doc_list)",
];

impl Scenario {
    pub fn build() -> Result<Self, BackendError> {
        Self::with_spec(&ScenarioSpec::default())
    }

    pub fn with_spec(spec: &ScenarioSpec) -> Result<Self, BackendError> {
        const KINDS: [Case; 3] = [Case::MissedRetrieval, Case::Grounded, Case::Hallucinated];
        let mut assignment: Vec<(Case, Phase)> = Vec::new();
        for (case, n) in KINDS.iter().zip(spec.off) {
            assignment.extend(std::iter::repeat_n((*case, Phase::OffPolicy), n));
        }
        for (phase, counts) in [(Phase::OnPolicy, spec.on), (Phase::Inference, spec.held_out)] {
            for (case, n) in KINDS.iter().zip(counts) {
                assignment.extend(std::iter::repeat_n((*case, phase), n));
            }
        }

        let mut docs = Vec::new();
        let mut rules = vec![
            ScriptedRule::new("answer", &[], "unknown"),
            ScriptedRule::new("judge", &["Answer: unknown\n"], "INCORRECT"),
            ScriptedRule::new("judge", &[], "CORRECT"),
            ScriptedRule::new("rewrite", &[], "{line:Query: } in detail"),
            ScriptedRule::new("decompose", &[], "{line:Query: }"),
            ScriptedRule::new("refine", &[], "a short summary"),
        ];
        for (seed, program) in TEACHER_PROGRAMS.iter().enumerate() {
            rules.push(ScriptedRule::new("teacher", &[], *program).with_seed(seed as u64));
        }

        let mut raw = Vec::new();
        for (i, &(case, phase)) in assignment.iter().enumerate() {
            let q = question_text(i);
            let qline = format!("Question: {q}\n");
            let id = format!("syn{i:02}");
            let fillers: Vec<Document> = (0..2)
                .map(|j| Document::new(format!("f{i:02}{j}"), filler(i, j)))
                .collect();
            docs.extend(fillers.iter().cloned());
            let (state_docs, a0) = match case {
                Case::MissedRetrieval | Case::Hallucinated => {
                    let text = format!("item{i:02} code word is {}", gold(i));
                    docs.push(Document::new(format!("g{i:02}"), text.clone()));
                    rules.push(ScriptedRule::new("answer", &[qline.as_str(), text.as_str()], gold(i)));
                    if case == Case::MissedRetrieval {
                        (fillers, "unknown".to_string())
                    } else {
                        let scored = fillers.into_iter().map(|d| d.with_score(spec.filler_score)).collect();
                        (scored, wrong(i))
                    }
                }
                Case::Grounded => {
                    let text = format!("ledger entry {}", gold(i));
                    let decoy = format!("item{i:02} code word decoy is {}", wrong(i));
                    let gold_doc = Document::new(format!("g{i:02}"), text.clone());
                    docs.push(gold_doc.clone());
                    docs.push(Document::new(format!("t{i:02}"), decoy.clone()));
                    rules.push(ScriptedRule::new("answer", &[qline.as_str(), text.as_str()], gold(i)));
                    rules.push(ScriptedRule::new("answer", &[qline.as_str(), decoy.as_str()], wrong(i)));
                    let mut d = vec![gold_doc];
                    d.extend(fillers);
                    (d, gold(i))
                }
            };
            raw.push((id, q, case, phase, state_docs, a0));
        }

        let corpus = Corpus::new(docs).expect("synthetic corpus is well formed");
        let index = build_index(&corpus).expect("synthetic corpus is non-empty");
        let backend = ScriptedBackend::new(rules.clone())?;

        let mut scenario = Scenario {
            corpus,
            index,
            backend,
            rules,
            off_train: Vec::new(),
            on_train: Vec::new(),
            held_out: Vec::new(),
            cases: Vec::new(),
            config: spec.config.clone(),
        };
        for (i, (id, q, case, phase, docs, a0)) in raw.into_iter().enumerate() {
            let question = Question::new(id.clone(), q).with_golds(vec![gold(i)]);
            scenario.cases.push((id, case));
            let state = match phase {
                Phase::OffPolicy => {
                    let correct = case == Case::Grounded;
                    RagState {
                        question,
                        docs,
                        initial_answer: a0,
                        phase,
                        correctness: Some(correct),
                        reasoning_trace: (!correct).then(|| "no document mentions the item".to_string()),
                    }
                }
                _ => {
                    let judged = judge_correctness(&scenario.backend, &question.text, &docs, &a0)?;
                    RagState {
                        question,
                        docs,
                        initial_answer: a0,
                        phase: Phase::OnPolicy,
                        correctness: Some(judged),
                        reasoning_trace: None,
                    }
                }
            };
            match phase {
                Phase::OffPolicy => scenario.off_train.push(state),
                Phase::OnPolicy => scenario.on_train.push(state),
                Phase::Inference => scenario.held_out.push(state),
            }
        }
        Ok(scenario)
    }

    pub fn case_of(&self, id: &str) -> Option<Case> {
        self.cases.iter().find(|(i, _)| i == id).map(|(_, c)| *c)
    }
}
