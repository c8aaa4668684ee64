//! Prompt builders for every generation role.
//!
//! Scripted rules match on substrings of these prompts, so the line layout
//! (`Question: ...`, `Query: ...`, `Answer: ...`) is part of the contract.

use crate::types::{Document, Phase, RagState, RefineInstruction, RewriteInstruction};

/// System prompt for the plan-proposing teacher.
pub const TEACHER_SYSTEM_PROMPT: &str = r#"You are an agent tasked with optimizing a Retrieval-Augmented Generation process. The goal is to improve the model's predictions by addressing issues flagged in the error_type. You are given the results from an initial RAG process, including a query, a list of retrieved documents, a prediction, and the identified error type. Your task is to optimize the current RAG process by selecting the appropriate functions and generating the corresponding Python code to fix the problem.

Available Functions

1. Retrieval(query: str, topk: int) -> List[str]
   Purpose: Retrieves the top-k most relevant documents for a given query.
   Parameters:
     - query (str): input query
     - topk (int): number of documents
   Returns:
     - list of documents sorted by relevance

2. RewriteQuery(query: str, instruction: str) -> List[str]
   Purpose: Rewrite the query to better match relevant documents.
   Instructions:
     - "clarify": make the query more specific
     - "expand": add context or related terms

3. DecomposeQuery(query: str) -> List[str]
   Purpose: Decompose the query into more specific sub-queries.

4. RefineDoc(query: str, doc: str, instruction: str) -> str
   Purpose: Refine a document when it is not directly relevant.
   Instructions:
     - "explain"
     - "summarize"

5. GenerateAnswer(query: str, docs: List[str],
                  additional_instruction: str = None) -> str
   Purpose: Generate the final answer using the selected documents.

You can directly use the provided variables as inputs to the functions. You may freely combine functions to improve performance."#;

/// User prompt template; `{question}`, `{doc_list}`, `{previous_pred}` and
/// `{error_type}` are substituted by [`teacher_user_prompt`].
pub const TEACHER_USER_TEMPLATE: &str = r#"Given the following information:

question = "{question}"
doc_list = {doc_list}
previous_pred = "{previous_pred}"

Error type of previous prediction:
{error_type}

Please carefully read the provided question, document list, previous answer, and the error type given by a teacher model. Your task is to generate Python code that calls the relevant functions to optimize the current RAG process and resolve the identified error.

The generated code should:
- Contain only function calls (no implementations)
- Use a minimal and necessary sequence of function executions
- End with: final_answer = GenerateAnswer(...)

Only output the code. Do not provide explanations."#;

/// Escapes a string for a double-quoted Python literal.
pub fn py_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

/// Renders documents as a Python list of string literals.
pub fn py_doc_list(docs: &[Document]) -> String {
    let items: Vec<String> = docs
        .iter()
        .map(|d| format!("\"{}\"", py_escape(&d.text)))
        .collect();
    format!("[{}]", items.join(", "))
}

/// The diagnostic placed in the error slot of the teacher prompt.
///
/// No error categories: only the correctness flag, plus the baseline's raw
/// reasoning trace when the off-policy state carries one.
pub fn error_signal(state: &RagState) -> String {
    let flag = match state.correctness {
        Some(true) => "correct",
        Some(false) => "incorrect",
        None => "unknown",
    };
    match (&state.phase, &state.reasoning_trace) {
        (Phase::OffPolicy, Some(trace)) if state.correctness == Some(false) => {
            format!("{flag}\nReasoning trace of previous prediction:\n{trace}")
        }
        _ => flag.to_string(),
    }
}

pub fn teacher_user_prompt(state: &RagState) -> String {
    TEACHER_USER_TEMPLATE
        .replace("{question}", &py_escape(&state.question.text))
        .replace("{doc_list}", &py_doc_list(&state.docs))
        .replace("{previous_pred}", &py_escape(&state.initial_answer))
        .replace("{error_type}", &error_signal(state))
}

/// System and user prompt joined by a blank line.
pub fn teacher_prompt(state: &RagState) -> String {
    format!("{TEACHER_SYSTEM_PROMPT}\n\n{}", teacher_user_prompt(state))
}

fn numbered_docs(docs: &[Document]) -> String {
    let mut out = String::new();
    for (i, d) in docs.iter().enumerate() {
        out.push_str(&format!("[{}] {}\n", i + 1, d.text));
    }
    out
}

pub fn answer_prompt(query: &str, docs: &[Document], additional_instruction: Option<&str>) -> String {
    let mut out = format!(
        "Answer the question using the documents.\nQuestion: {query}\nDocuments:\n{}",
        numbered_docs(docs)
    );
    if let Some(extra) = additional_instruction {
        out.push_str(&format!("Additional instruction: {extra}\n"));
    }
    out.push_str("Answer:");
    out
}

pub fn rewrite_prompt(query: &str, instruction: RewriteInstruction) -> String {
    let how = match instruction {
        RewriteInstruction::Clarify => "make the query more specific",
        RewriteInstruction::Expand => "add context or related terms",
    };
    format!(
        "Rewrite the query to better match relevant documents ({}: {how}). \
         Write one rewrite per line.\nQuery: {query}\nRewrites:",
        instruction.as_str()
    )
}

pub fn decompose_prompt(query: &str) -> String {
    format!(
        "Decompose the query into more specific sub-queries, one per line.\nQuery: {query}\nSub-queries:"
    )
}

pub fn refine_prompt(query: &str, doc_text: &str, instruction: RefineInstruction) -> String {
    format!(
        "Refine the document for the query ({}).\nQuery: {query}\nDocument: {doc_text}\nRefined:",
        instruction.as_str()
    )
}

pub fn judge_prompt(question: &str, docs: &[Document], answer: &str) -> String {
    format!(
        "Judge whether the answer to the question is correct given the documents. \
         Reply with a single word: CORRECT or INCORRECT.\nQuestion: {question}\nDocuments:\n{}Answer: {answer}\nVerdict:",
        numbered_docs(docs)
    )
}
