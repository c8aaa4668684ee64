//! Plan programs: a straight-line, one-call-per-line language.
//!
//! ```text
//! docs = Retrieval(question, 5)
//! final_answer = GenerateAnswer(question, docs)
//! ```
//!
//! Each line is `name = Function(args)` or a bare `Function(args)`. Arguments
//! are variables, `name[i]` (document arguments only), string literals in
//! single or double quotes, integers, or `None`. Keyword arguments use the
//! parameter names of the function signatures. Blank lines and `#` comments
//! are skipped. There are no expressions and no control flow.

use thiserror::Error;

use crate::types::{
    DocArg, OpKind, Operation, Plan, PlanError, PlanSource, QueryArg, RefineInstruction,
    RewriteInstruction, Step, DEFAULT_MAX_PLAN_LEN,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DslError {
    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown function `{name}`")]
    UnknownFunction { line: usize, name: String },
    #[error("program does not end with `final_answer = GenerateAnswer(...)`")]
    MissingTerminal,
    #[error("line {line}: undefined variable `{name}`")]
    UndefinedVariable { line: usize, name: String },
    #[error("line {line}: {message}")]
    InvalidArgument { line: usize, message: String },
    #[error("invalid plan: {0}")]
    Plan(PlanError),
}

/// Parses a program with the default plan-length limit.
pub fn parse_plan(text: &str) -> Result<Plan, DslError> {
    parse_plan_with(text, PlanSource::Manual, DEFAULT_MAX_PLAN_LEN)
}

pub fn parse_plan_with(text: &str, source: PlanSource, max_len: usize) -> Result<Plan, DslError> {
    let mut steps = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let line_no = i + 1;
        let stmt = Parser::new(trimmed, line_no).statement()?;
        steps.push(stmt.into_step(line_no)?);
        lines.push(line_no);
    }
    if steps.is_empty() {
        return Err(DslError::MissingTerminal);
    }
    Plan::with_max_len(steps, source, max_len).map_err(|e| match e {
        PlanError::MissingTerminal => DslError::MissingTerminal,
        PlanError::EarlyTerminal { .. } => DslError::MissingTerminal,
        PlanError::UndefinedVariable { step, name } => DslError::UndefinedVariable {
            line: lines[step],
            name,
        },
        PlanError::TypeMismatch { step, .. }
        | PlanError::InvalidTopk { step }
        | PlanError::ReservedName { step, .. }
        | PlanError::Argument { step, .. } => DslError::InvalidArgument {
            line: lines[step],
            message: e.to_string(),
        },
        other => DslError::Plan(other),
    })
}

/// Emits the canonical program text for a plan, one statement per line.
pub fn render_plan(plan: &Plan) -> String {
    let mut out = String::new();
    for step in plan.steps() {
        if let Some(bind) = &step.bind {
            out.push_str(bind);
            out.push_str(" = ");
        }
        out.push_str(step.op.kind().name());
        out.push('(');
        let args: Vec<String> = match &step.op {
            Operation::Retrieval { query, topk } => vec![render_query(query), topk.to_string()],
            Operation::RewriteQuery { query, instruction } => {
                vec![render_query(query), quote(instruction.as_str())]
            }
            Operation::DecomposeQuery { query } => vec![render_query(query)],
            Operation::RefineDoc {
                query,
                doc,
                instruction,
            } => vec![
                render_query(query),
                render_doc(doc),
                quote(instruction.as_str()),
            ],
            Operation::GenerateAnswer {
                query,
                docs,
                additional_instruction,
            } => {
                let mut v = vec![render_query(query), docs.clone()];
                if let Some(extra) = additional_instruction {
                    v.push(quote(extra));
                }
                v
            }
        };
        out.push_str(&args.join(", "));
        out.push_str(")\n");
    }
    out
}

/// Operation kinds of a plan in order, arguments stripped.
pub fn canonical_op_sequence(plan: &Plan) -> Vec<OpKind> {
    plan.kinds()
}

fn render_query(q: &QueryArg) -> String {
    match q {
        QueryArg::Var(name) => name.clone(),
        QueryArg::Literal(text) => quote(text),
    }
}

fn render_doc(d: &DocArg) -> String {
    match d.index {
        Some(i) => format!("{}[{}]", d.source, i),
        None => d.source.clone(),
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
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
    out.push('"');
    out
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Ident(String),
    Indexed(String, usize),
    Str(String),
    Int(i64),
    None,
}

#[derive(Debug)]
struct Statement {
    bind: Option<String>,
    function: String,
    positional: Vec<Value>,
    keyword: Vec<(String, Value)>,
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
    line: usize,
}

impl Parser {
    fn new(src: &str, line: usize) -> Self {
        Self {
            chars: src.chars().collect(),
            pos: 0,
            line,
        }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, DslError> {
        Err(DslError::Syntax {
            line: self.line,
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Option<String> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => self.pos += 1,
            _ => return None,
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        Some(self.chars[start..self.pos].iter().collect())
    }

    fn statement(mut self) -> Result<Statement, DslError> {
        let Some(first) = self.ident() else {
            return self.err("expected an identifier");
        };
        let (bind, function) = if self.eat('=') {
            match self.ident() {
                Some(f) => (Some(first), f),
                None => return self.err("expected a function call after `=`"),
            }
        } else {
            (None, first)
        };
        if !self.eat('(') {
            return self.err(format!("expected `(` after `{function}`"));
        }
        let mut positional = Vec::new();
        let mut keyword: Vec<(String, Value)> = Vec::new();
        if !self.eat(')') {
            loop {
                let save = self.pos;
                let mut kw = None;
                if let Some(name) = self.ident() {
                    if self.eat('=') {
                        kw = Some(name);
                    } else {
                        self.pos = save;
                    }
                }
                let value = self.value()?;
                match kw {
                    Some(name) => {
                        if keyword.iter().any(|(k, _)| *k == name) {
                            return self.err(format!("duplicate keyword argument `{name}`"));
                        }
                        keyword.push((name, value));
                    }
                    None if !keyword.is_empty() => {
                        return self.err("positional argument after keyword argument")
                    }
                    None => positional.push(value),
                }
                if self.eat(',') {
                    if self.eat(')') {
                        break;
                    }
                    continue;
                }
                if self.eat(')') {
                    break;
                }
                return self.err("expected `,` or `)`");
            }
        }
        self.skip_ws();
        if self.pos != self.chars.len() {
            return self.err("unexpected trailing input");
        }
        Ok(Statement {
            bind,
            function,
            positional,
            keyword,
        })
    }

    fn value(&mut self) -> Result<Value, DslError> {
        self.skip_ws();
        match self.peek() {
            Some('"') | Some('\'') => self.string(),
            Some(c) if c.is_ascii_digit() || c == '-' => self.int(),
            Some(_) => {
                let Some(name) = self.ident() else {
                    return self.err("expected an argument");
                };
                if name == "None" {
                    return Ok(Value::None);
                }
                if self.eat('[') {
                    self.skip_ws();
                    let Value::Int(i) = self.int()? else {
                        unreachable!()
                    };
                    if !self.eat(']') {
                        return self.err("expected `]`");
                    }
                    if i < 0 {
                        return self.err("negative index");
                    }
                    return Ok(Value::Indexed(name, i as usize));
                }
                Ok(Value::Ident(name))
            }
            None => self.err("unexpected end of line"),
        }
    }

    fn int(&mut self) -> Result<Value, DslError> {
        let start = self.pos;
        if self.peek() == Some('-') {
            self.pos += 1;
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        match text.parse::<i64>() {
            Ok(v) => Ok(Value::Int(v)),
            Err(_) => self.err(format!("invalid integer `{text}`")),
        }
    }

    fn string(&mut self) -> Result<Value, DslError> {
        let quote = self.peek().unwrap();
        self.pos += 1;
        let mut out = String::new();
        loop {
            match self.peek() {
                None => return self.err("unterminated string literal"),
                Some(c) if c == quote => {
                    self.pos += 1;
                    return Ok(Value::Str(out));
                }
                Some('\\') => {
                    self.pos += 1;
                    let esc = match self.peek() {
                        Some('n') => '\n',
                        Some('r') => '\r',
                        Some('t') => '\t',
                        Some('\\') => '\\',
                        Some('"') => '"',
                        Some('\'') => '\'',
                        Some(c) => return self.err(format!("unknown escape `\\{c}`")),
                        None => return self.err("unterminated string literal"),
                    };
                    out.push(esc);
                    self.pos += 1;
                }
                Some(c) => {
                    out.push(c);
                    self.pos += 1;
                }
            }
        }
    }
}

/// Positional-then-keyword binding of call arguments onto a fixed signature.
struct Args {
    slots: Vec<Option<Value>>,
    names: &'static [&'static str],
    line: usize,
}

impl Args {
    fn bind(stmt: &mut Statement, names: &'static [&'static str], line: usize) -> Result<Self, DslError> {
        if stmt.positional.len() > names.len() {
            return Err(DslError::InvalidArgument {
                line,
                message: format!(
                    "{} takes at most {} arguments, got {}",
                    stmt.function,
                    names.len(),
                    stmt.positional.len()
                ),
            });
        }
        let mut slots: Vec<Option<Value>> = vec![None; names.len()];
        for (i, v) in stmt.positional.drain(..).enumerate() {
            slots[i] = Some(v);
        }
        for (k, v) in stmt.keyword.drain(..) {
            let Some(i) = names.iter().position(|n| *n == k) else {
                return Err(DslError::InvalidArgument {
                    line,
                    message: format!("unexpected keyword argument `{k}` for {}", stmt.function),
                });
            };
            if slots[i].is_some() {
                return Err(DslError::InvalidArgument {
                    line,
                    message: format!("argument `{k}` given twice"),
                });
            }
            slots[i] = Some(v);
        }
        Ok(Self { slots, names, line })
    }

    fn bad<T>(&self, message: String) -> Result<T, DslError> {
        Err(DslError::InvalidArgument {
            line: self.line,
            message,
        })
    }

    fn required(&mut self, i: usize) -> Result<Value, DslError> {
        match self.slots[i].take() {
            Some(v) => Ok(v),
            None => self.bad(format!("missing argument `{}`", self.names[i])),
        }
    }

    fn query(&mut self, i: usize) -> Result<QueryArg, DslError> {
        match self.required(i)? {
            Value::Ident(name) => Ok(QueryArg::Var(name)),
            Value::Str(s) => Ok(QueryArg::Literal(s)),
            other => self.bad(format!("`{}` must be a variable or string, got {other:?}", self.names[i])),
        }
    }

    fn text(&mut self, i: usize) -> Result<String, DslError> {
        match self.required(i)? {
            Value::Str(s) => Ok(s),
            other => self.bad(format!("`{}` must be a string, got {other:?}", self.names[i])),
        }
    }
}

impl Statement {
    fn into_step(mut self, line: usize) -> Result<Step, DslError> {
        let Some(kind) = OpKind::from_name(&self.function) else {
            return Err(DslError::UnknownFunction {
                line,
                name: self.function,
            });
        };
        let op = match kind {
            OpKind::Retrieval => {
                let mut a = Args::bind(&mut self, &["query", "topk"], line)?;
                let query = a.query(0)?;
                let topk = match a.required(1)? {
                    Value::Int(k) if k >= 1 => k as usize,
                    other => return a.bad(format!("`topk` must be a positive integer, got {other:?}")),
                };
                Operation::Retrieval { query, topk }
            }
            OpKind::RewriteQuery => {
                let mut a = Args::bind(&mut self, &["query", "instruction"], line)?;
                let query = a.query(0)?;
                let text = a.text(1)?;
                let Some(instruction) = RewriteInstruction::parse(&text) else {
                    return a.bad(format!("RewriteQuery instruction must be \"clarify\" or \"expand\", got {text:?}"));
                };
                Operation::RewriteQuery { query, instruction }
            }
            OpKind::DecomposeQuery => {
                let mut a = Args::bind(&mut self, &["query"], line)?;
                Operation::DecomposeQuery { query: a.query(0)? }
            }
            OpKind::RefineDoc => {
                let mut a = Args::bind(&mut self, &["query", "doc", "instruction"], line)?;
                let query = a.query(0)?;
                let doc = match a.required(1)? {
                    Value::Ident(source) => DocArg { source, index: None },
                    Value::Indexed(source, i) => DocArg {
                        source,
                        index: Some(i),
                    },
                    other => return a.bad(format!("`doc` must reference a document, got {other:?}")),
                };
                let text = a.text(2)?;
                let Some(instruction) = RefineInstruction::parse(&text) else {
                    return a.bad(format!("RefineDoc instruction must be \"explain\" or \"summarize\", got {text:?}"));
                };
                Operation::RefineDoc {
                    query,
                    doc,
                    instruction,
                }
            }
            OpKind::GenerateAnswer => {
                let mut a = Args::bind(&mut self, &["query", "docs", "additional_instruction"], line)?;
                let query = a.query(0)?;
                let docs = match a.required(1)? {
                    Value::Ident(name) => name,
                    other => return a.bad(format!("`docs` must be a document list variable, got {other:?}")),
                };
                let additional_instruction = match a.slots[2].take() {
                    None | Some(Value::None) => None,
                    Some(Value::Str(s)) => Some(s),
                    Some(other) => {
                        return a.bad(format!("`additional_instruction` must be a string, got {other:?}"))
                    }
                };
                Operation::GenerateAnswer {
                    query,
                    docs,
                    additional_instruction,
                }
            }
        };
        Ok(Step { bind: self.bind, op })
    }
}
