//! Generators and independent reference implementations shared by the
//! property tests and the acceptance suite. Nothing here calls the code
//! under test except to construct inputs.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ragplan_core::policy::PolicyParams;
use ragplan_core::types::{
    DocArg, Document, OpKind, Operation, Phase, Plan, PlanDefaults, PlanSource, PreferenceTriple, QueryArg,
    Question, RagState, RefineInstruction, RewriteInstruction, Step, FINAL_ANSWER,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const WORDS: [&str; 16] = [
    "the", "a", "an", "river", "Paris", "paris", "1998", "u.s.", "capital", "of", "France!", "x-ray", "café",
    "river's", "42", "and",
];

/// Space-joined words with occasional punctuation and case noise.
pub fn random_text(rng: &mut impl Rng, max_words: usize) -> String {
    let n = rng.random_range(0..=max_words);
    let mut out: Vec<String> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut w = WORDS.choose(rng).unwrap().to_string();
        if rng.random_bool(0.15) {
            w.push([',', '.', '?', ';'][rng.random_range(0..4)]);
        }
        out.push(w);
    }
    let sep = if rng.random_bool(0.2) { "  " } else { " " };
    out.join(sep)
}

fn literal(rng: &mut impl Rng) -> String {
    const PIECES: [&str; 9] = ["who", "wrote", "it", "\"quoted\"", "back\\slash", "tab\there", "new\nline", "'single'", "é"];
    let n = rng.random_range(1..=4);
    (0..n).map(|_| *PIECES.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, PartialEq)]
enum Ty {
    Text,
    Queries,
    SubQueries,
    Docs,
}

/// A random well-typed straight-line plan of at most `max_len` steps.
pub fn random_plan(rng: &mut impl Rng, max_len: usize) -> Plan {
    let mut env: Vec<(String, Ty)> = vec![
        ("question".into(), Ty::Text),
        ("doc_list".into(), Ty::Docs),
        ("previous_pred".into(), Ty::Text),
    ];
    let mut fanned: BTreeSet<String> = BTreeSet::new();
    let mut steps = Vec::new();
    let body = rng.random_range(0..max_len);
    let pick_query = |rng: &mut ChaCha8Rng, env: &[(String, Ty)], allow_sub: bool| -> QueryArg {
        if rng.random_bool(0.15) {
            return QueryArg::Literal(literal(rng));
        }
        let names: Vec<&String> = env
            .iter()
            .filter(|(_, t)| *t != Ty::Docs && (allow_sub || *t != Ty::SubQueries))
            .map(|(n, _)| n)
            .collect();
        QueryArg::Var((*names.choose(rng).unwrap()).clone())
    };
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    let docs_of = |rng: &mut ChaCha8Rng, env: &[(String, Ty)]| -> String {
        let names: Vec<&String> = env.iter().filter(|(_, t)| *t == Ty::Docs).map(|(n, _)| n).collect();
        (*names.choose(rng).unwrap()).clone()
    };
    for i in 0..body {
        let kind = OpKind::ALL[local.random_range(0..4)];
        let (op, ty) = match kind {
            OpKind::Retrieval => {
                let mut q = pick_query(&mut local, &env, true);
                if let QueryArg::Var(name) = &q {
                    if fanned.contains(name) {
                        q = QueryArg::question();
                    }
                }
                if let QueryArg::Var(name) = &q {
                    if env.iter().rev().find(|(n, _)| n == name).map(|(_, t)| *t) == Some(Ty::SubQueries) {
                        fanned.insert(name.clone());
                    }
                }
                (Operation::Retrieval { query: q, topk: local.random_range(1..=10) }, Ty::Docs)
            }
            OpKind::RewriteQuery => (
                Operation::RewriteQuery {
                    query: pick_query(&mut local, &env, true),
                    instruction: *[RewriteInstruction::Clarify, RewriteInstruction::Expand].choose(&mut local).unwrap(),
                },
                Ty::Queries,
            ),
            OpKind::DecomposeQuery => (
                Operation::DecomposeQuery { query: pick_query(&mut local, &env, false) },
                Ty::SubQueries,
            ),
            _ => (
                Operation::RefineDoc {
                    query: pick_query(&mut local, &env, true),
                    doc: DocArg {
                        source: docs_of(&mut local, &env),
                        index: local.random_bool(0.5).then(|| local.random_range(0..4)),
                    },
                    instruction: *[RefineInstruction::Explain, RefineInstruction::Summarize].choose(&mut local).unwrap(),
                },
                Ty::Text,
            ),
        };
        let bind = if local.random_bool(0.1) {
            None
        } else if local.random_bool(0.2) && env.len() > 3 {
            // rebinding an existing name replaces its type
            Some(env[local.random_range(3..env.len())].0.clone())
        } else {
            Some(format!("v{i}_{}", kind.name().to_lowercase()))
        };
        if let Some(b) = &bind {
            fanned.remove(b);
            env.retain(|(n, _)| n != b);
            env.push((b.clone(), ty));
        }
        steps.push(Step { bind, op });
    }
    let extra = local.random_bool(0.25).then(|| literal(&mut local));
    steps.push(Step::new(
        Some(FINAL_ANSWER),
        Operation::GenerateAnswer {
            query: pick_query(&mut local, &env, true),
            docs: docs_of(&mut local, &env),
            additional_instruction: extra,
        },
    ));
    Plan::new(steps, PlanSource::Manual).expect("generator emits well-typed plans")
}

/// Breaks a valid program in one of several ways the parser must reject.
pub fn mutate_invalid(rng: &mut impl Rng, program: &str) -> (String, &'static str) {
    let lines: Vec<&str> = program.lines().collect();
    let last = lines.len() - 1;
    let mut out: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
    let label = match rng.random_range(0..9) {
        0 => {
            out[last] = out[last].replacen("GenerateAnswer", "GenerateAnswr", 1);
            "unknown function"
        }
        1 => {
            out[last] = out[last].replacen("final_answer = ", "answer = ", 1);
            "wrong terminal binding"
        }
        2 => {
            out.pop();
            out.push("x = DecomposeQuery(question)".into());
            "no terminal"
        }
        3 => {
            let (head, _) = out[last].split_at(out[last].rfind(')').unwrap());
            out[last] = head.to_string();
            "unbalanced parenthesis"
        }
        4 => {
            out[last] = out[last].replacen("GenerateAnswer(", "GenerateAnswer(undefined_zz_var, ", 1);
            "undefined variable"
        }
        5 => {
            out.insert(0, "question = RewriteQuery(question, \"clarify\")".into());
            "reserved binding"
        }
        6 => {
            out.insert(0, "d = Retrieval(question, 0)".into());
            "zero topk"
        }
        7 => {
            out.insert(0, "early = GenerateAnswer(question, doc_list)".into());
            "early terminal"
        }
        _ => {
            out.insert(0, "bad = RefineDoc(question, \"doc_list\" \"summarize\")".into());
            "missing comma"
        }
    };
    (out.join("\n"), label)
}

pub fn random_state(rng: &mut impl Rng) -> RagState {
    let n_docs = rng.random_range(1..=4);
    let docs = (0..n_docs)
        .map(|i| {
            let mut text = random_text(rng, 8);
            if text.trim().is_empty() {
                text = "filler".into();
            }
            let d = Document::new(format!("d{i}"), text);
            if rng.random_bool(0.7) {
                d.with_score(rng.random_range(0.0..20.0))
            } else {
                d
            }
        })
        .collect();
    let mut a0 = random_text(rng, 5);
    if a0.trim().is_empty() {
        a0 = "unknown".into();
    }
    let mut q = random_text(rng, 40);
    if q.trim().is_empty() {
        q = "what".into();
    }
    let correctness = [None, Some(true), Some(false)][rng.random_range(0..3)];
    RagState {
        question: Question::new("q", q),
        docs,
        initial_answer: a0,
        phase: Phase::OnPolicy,
        correctness,
        reasoning_trace: rng.random_bool(0.5).then(|| "trace".to_string()),
    }
}

pub fn random_params(rng: &mut impl Rng, max_len: usize, scale: f64) -> PolicyParams {
    let w = (0..5 * ragplan_core::FEATURE_DIM).map(|_| rng.random_range(-scale..scale)).collect();
    PolicyParams::from_weights(w, max_len).unwrap()
}

/// Every kind sequence a policy of horizon `max_len` can emit, enumerated
/// from scratch: any non-terminal prefix shorter than `max_len` followed by
/// `GenerateAnswer`.
pub fn enumerate_sequences(max_len: usize) -> Vec<Vec<OpKind>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<OpKind>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for prefix in frontier {
            let mut done = prefix.clone();
            done.push(OpKind::GenerateAnswer);
            out.push(done);
            for k in &OpKind::ALL[..4] {
                let mut p = prefix.clone();
                p.push(*k);
                next.push(p);
            }
        }
        frontier = next;
    }
    out
}

/// A triple over two distinct random kind sequences.
pub fn random_triple(rng: &mut impl Rng, max_len: usize) -> PreferenceTriple {
    let seqs = enumerate_sequences(max_len);
    let i = rng.random_range(0..seqs.len());
    let mut j = rng.random_range(0..seqs.len() - 1);
    if j >= i {
        j += 1;
    }
    let plan = |k: &[OpKind]| Plan::from_kinds(k, PlanDefaults::default(), PlanSource::Policy, max_len).unwrap();
    let hi = rng.random_range(0.5..=1.0);
    let lo = rng.random_range(0.0..0.5);
    PreferenceTriple::new(Arc::new(random_state(rng)), plan(&seqs[i]), plan(&seqs[j]), hi, lo).unwrap()
}

/// SQuAD answer normalization, written independently of the crate.
pub fn oracle_normalize(s: &str) -> Vec<String> {
    let lowered = s.to_lowercase();
    let mut kept = String::new();
    for c in lowered.chars() {
        if !"!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~".contains(c) {
            kept.push(c);
        }
    }
    kept.split_whitespace()
        .filter(|w| *w != "a" && *w != "an" && *w != "the")
        .map(String::from)
        .collect()
}

/// Token F1 by explicit multiset matching: each predicted token consumes one
/// unused equal gold token.
pub fn multiset_f1(pred: &str, gold: &str) -> f64 {
    let p = oracle_normalize(pred);
    let g = oracle_normalize(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; g.len()];
    let mut common = 0usize;
    for t in &p {
        if let Some(k) = (0..g.len()).find(|&k| !used[k] && &g[k] == t) {
            used[k] = true;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let prec = common as f64 / p.len() as f64;
    let rec = common as f64 / g.len() as f64;
    2.0 * prec * rec / (prec + rec)
}

fn oracle_tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in s.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// BM25 scored directly from raw texts:
/// `Σ_t idf(t)·tf·(k1+1)/(tf + k1·(1 − b + b·|d|/avgdl))` with
/// `idf(t) = ln(1 + (N − df + 0.5)/(df + 0.5))`, summed over distinct query
/// terms in lexicographic order. Only documents sharing a term are ranked;
/// order is score descending then id ascending.
pub fn oracle_bm25(docs: &[(String, String)], query: &str, k1: f64, b: f64, topk: usize) -> Vec<(String, f64)> {
    let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| oracle_tokens(t)).collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let terms: BTreeSet<String> = oracle_tokens(query).into_iter().collect();
    let mut scored: Vec<(String, f64)> = Vec::new();
    for (d, dt) in toks.iter().enumerate() {
        let tf: HashMap<&str, usize> = dt.iter().fold(HashMap::new(), |mut m, t| {
            *m.entry(t.as_str()).or_default() += 1;
            m
        });
        let mut score = 0.0;
        let mut hit = false;
        for t in &terms {
            let Some(&f) = tf.get(t.as_str()) else { continue };
            hit = true;
            let df = toks.iter().filter(|x| x.contains(t)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let f = f as f64;
            score += idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * dt.len() as f64 / avgdl));
        }
        if hit {
            scored.push((docs[d].0.clone(), score));
        }
    }
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    scored.truncate(topk);
    scored
}
