//! Local corpus ingestion and BM25 top-k retrieval.
//!
//! ```text
//! score(D, Q) = Σ_{t ∈ distinct(Q)} idf(t) · tf(t,D)·(k1 + 1) / (tf(t,D) + k1·(1 − b + b·|D|/avgdl))
//! idf(t)      = ln(1 + (N − df(t) + 0.5) / (df(t) + 0.5))
//! ```
//!
//! Query terms are deduplicated and summed in lexicographic order. The idf
//! form is always positive, so every document sharing a term with the query
//! scores above zero and documents sharing none are not returned.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{self, BufRead, Read, Write};

use serde::Deserialize;
use thiserror::Error;

use crate::types::Document;

pub const DEFAULT_TOPK: usize = 5;

const INDEX_MAGIC: &[u8; 8] = b"RGPLIDX\0";
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate document id `{0}`")]
    DuplicateDocId(String),
    #[error("document `{0}` has empty text")]
    EmptyDocument(String),
    #[error("corpus has no indexable tokens")]
    NoTokens,
    #[error("query has no tokens")]
    EmptyQuery,
    #[error("topk must be at least 1")]
    InvalidTopk,
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Lowercases and splits on every non-alphanumeric character.
///
/// Punctuation is a separator, not deleted: `"A.B. c-d"` → `[a, b, c, d]`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<Document>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self, RetrievalError> {
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for d in &docs {
            if !seen.insert(d.id.as_str()) {
                return Err(RetrievalError::DuplicateDocId(d.id.clone()));
            }
            if d.text.trim().is_empty() {
                return Err(RetrievalError::EmptyDocument(d.id.clone()));
            }
        }
        Ok(Self { docs })
    }

    /// Reads `{"id": ..., "text": ...}` objects, one per line.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, RetrievalError> {
        #[derive(Deserialize)]
        struct Line {
            id: String,
            text: String,
        }
        let mut docs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| RetrievalError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            docs.push(Document::new(parsed.id, parsed.text));
        }
        Self::new(docs)
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexStats {
    pub doc_count: usize,
    pub avg_doc_len: f64,
    pub term_count: usize,
}

/// Immutable BM25 index; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    docs: Vec<Document>,
    doc_lengths: Vec<u32>,
    avg_doc_len: f64,
    postings: BTreeMap<String, Vec<Posting>>,
    by_id: HashMap<String, u32>,
    params: Bm25Params,
}

pub fn build_index(corpus: &Corpus) -> Result<InvertedIndex, RetrievalError> {
    InvertedIndex::build(corpus, Bm25Params::default())
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self, RetrievalError> {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (i, doc) in corpus.docs().iter().enumerate() {
            let tokens = tokenize(&doc.text);
            doc_lengths.push(tokens.len() as u32);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *counts.entry(t).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting {
                    doc: i as u32,
                    tf,
                });
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        if total == 0 {
            return Err(RetrievalError::NoTokens);
        }
        let docs: Vec<Document> = corpus
            .docs()
            .iter()
            .map(|d| Document::new(d.id.clone(), d.text.clone()))
            .collect();
        let by_id = docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), i as u32))
            .collect();
        Ok(Self {
            avg_doc_len: total as f64 / docs.len() as f64,
            docs,
            doc_lengths,
            postings,
            by_id,
            params,
        })
    }

    pub fn stats(&self) -> IndexStats {
        IndexStats {
            doc_count: self.docs.len(),
            avg_doc_len: self.avg_doc_len,
            term_count: self.postings.len(),
        }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i as usize])
    }

    pub fn doc_len(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).map(|&i| self.doc_lengths[i as usize] as usize)
    }

    /// `(doc id, term frequency)` pairs for a term, in corpus order.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|ps| {
                ps.iter()
                    .map(|p| (self.docs[p.doc as usize].id.as_str(), p.tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        let n = self.docs.len() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 top-k, score descending then doc id ascending.
    pub fn retrieve(&self, query: &str, topk: usize) -> Result<Vec<Document>, RetrievalError> {
        if topk == 0 {
            return Err(RetrievalError::InvalidTopk);
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        if terms.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let Bm25Params { k1, b } = self.params;
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for term in &terms {
            let Some(ps) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for p in ps {
                let tf = p.tf as f64;
                let dl = self.doc_lengths[p.doc as usize] as f64;
                let s = idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / self.avg_doc_len));
                *scores.entry(p.doc).or_insert(0.0) += s;
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.docs[a.0 as usize].id.cmp(&self.docs[b.0 as usize].id))
        });
        ranked.truncate(topk);
        Ok(ranked
            .into_iter()
            .map(|(i, s)| self.docs[i as usize].clone().with_score(s))
            .collect())
    }

    /// Versioned little-endian binary layout:
    ///
    /// ```text
    /// magic[8] version:u32 k1:f64 b:f64
    /// n_docs:u32 { id:str text:str len:u32 }*
    /// n_terms:u32 { term:str n:u32 { doc:u32 tf:u32 }* }*
    /// ```
    /// where `str` is `byte_len:u32` followed by UTF-8 bytes. Terms are sorted,
    /// so identical corpora produce identical bytes.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&self.params.k1.to_le_bytes())?;
        w.write_all(&self.params.b.to_le_bytes())?;
        write_u32(&mut w, self.docs.len())?;
        for (doc, len) in self.docs.iter().zip(&self.doc_lengths) {
            write_str(&mut w, &doc.id)?;
            write_str(&mut w, &doc.text)?;
            w.write_all(&len.to_le_bytes())?;
        }
        write_u32(&mut w, self.postings.len())?;
        for (term, ps) in &self.postings {
            write_str(&mut w, term)?;
            write_u32(&mut w, ps.len())?;
            for p in ps {
                w.write_all(&p.doc.to_le_bytes())?;
                w.write_all(&p.tf.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, RetrievalError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(RetrievalError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != INDEX_VERSION {
            return Err(RetrievalError::Format(format!(
                "unsupported version {version}, expected {INDEX_VERSION}"
            )));
        }
        let k1 = read_f64(&mut r)?;
        let b = read_f64(&mut r)?;
        let n_docs = read_u32(&mut r)? as usize;
        let mut docs = Vec::with_capacity(n_docs);
        let mut doc_lengths = Vec::with_capacity(n_docs);
        for _ in 0..n_docs {
            let id = read_str(&mut r)?;
            let text = read_str(&mut r)?;
            docs.push(Document::new(id, text));
            doc_lengths.push(read_u32(&mut r)?);
        }
        let n_terms = read_u32(&mut r)? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = read_str(&mut r)?;
            let n = read_u32(&mut r)? as usize;
            let mut ps = Vec::with_capacity(n);
            for _ in 0..n {
                let doc = read_u32(&mut r)?;
                let tf = read_u32(&mut r)?;
                if doc as usize >= n_docs || tf == 0 {
                    return Err(RetrievalError::Format(format!(
                        "corrupt posting for term `{term}`"
                    )));
                }
                ps.push(Posting { doc, tf });
            }
            postings.insert(term, ps);
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        if n_docs == 0 || total == 0 {
            return Err(RetrievalError::Format("empty index".into()));
        }
        let by_id = docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), i as u32))
            .collect();
        Ok(Self {
            avg_doc_len: total as f64 / n_docs as f64,
            docs,
            doc_lengths,
            postings,
            by_id,
            params: Bm25Params { k1, b },
        })
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> io::Result<()> {
    let v = u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "length overflow"))?;
    w.write_all(&v.to_le_bytes())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    write_u32(w, s.len())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, RetrievalError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| RetrievalError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(docs: &[(&str, &str)]) -> Corpus {
        Corpus::new(docs.iter().map(|(i, t)| Document::new(*i, *t)).collect()).unwrap()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(
            tokenize("Banking Regulation Act, 1949"),
            vec!["banking", "regulation", "act", "1949"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A.B. c-d"), vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn single_doc_postings() {
        let idx = build_index(&corpus(&[("d", "a b a")])).unwrap();
        assert_eq!(idx.postings("a"), vec![("d", 2)]);
        assert_eq!(idx.postings("b"), vec![("d", 1)]);
        assert_eq!(idx.terms().count(), 2);
    }

    #[test]
    fn corpus_errors() {
        assert!(matches!(Corpus::new(vec![]), Err(RetrievalError::EmptyCorpus)));
        let dup = Corpus::new(vec![Document::new("x", "a"), Document::new("x", "b")]);
        assert!(matches!(dup, Err(RetrievalError::DuplicateDocId(id)) if id == "x"));
        let punct = Corpus::new(vec![Document::new("x", "...")]).unwrap();
        assert!(matches!(build_index(&punct), Err(RetrievalError::NoTokens)));
    }

    #[test]
    fn postings_match_brute_force_counts() {
        let c = corpus(&[
            ("d1", "the cat sat on the mat"),
            ("d2", "The dog; the cat!"),
            ("d3", "mat mat mat"),
        ]);
        let idx = build_index(&c).unwrap();
        for doc in c.docs() {
            let toks = tokenize(&doc.text);
            for term in toks.iter().collect::<BTreeSet<_>>() {
                let expected = toks.iter().filter(|t| *t == term).count() as u32;
                let got = idx
                    .postings(term)
                    .into_iter()
                    .find(|(id, _)| *id == doc.id)
                    .map(|(_, tf)| tf);
                assert_eq!(got, Some(expected), "{term} in {}", doc.id);
            }
        }
        let total: usize = idx.terms().map(|t| idx.postings(t).len()).sum();
        let brute: usize = c
            .docs()
            .iter()
            .map(|d| tokenize(&d.text).into_iter().collect::<BTreeSet<_>>().len())
            .sum();
        assert_eq!(total, brute);
    }

    #[test]
    fn retrieve_single_match_and_no_match() {
        let idx = build_index(&corpus(&[("a", "apple pie"), ("b", "banana bread")])).unwrap();
        let hits = idx.retrieve("apple", 5).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "a");
        assert!(hits[0].score.unwrap() > 0.0);
        assert!(idx.retrieve("zebra", 5).unwrap().is_empty());
        assert!(matches!(idx.retrieve("?!", 5), Err(RetrievalError::EmptyQuery)));
        assert!(matches!(idx.retrieve("apple", 0), Err(RetrievalError::InvalidTopk)));
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = build_index(&corpus(&[("z", "same text"), ("a", "same text"), ("m", "other")])).unwrap();
        let ids: Vec<_> = idx.retrieve("same", 3).unwrap().into_iter().map(|d| d.id).collect();
        assert_eq!(ids, vec!["a", "z"]);
    }

    #[test]
    fn persisted_index_round_trips() {
        let idx = build_index(&corpus(&[("d1", "alpha beta"), ("d2", "beta gamma gamma")])).unwrap();
        let mut bytes = Vec::new();
        idx.write_to(&mut bytes).unwrap();
        let back = InvertedIndex::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, idx);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        bytes[0] = b'X';
        assert!(matches!(
            InvertedIndex::read_from(bytes.as_slice()),
            Err(RetrievalError::Format(_))
        ));
    }
}
