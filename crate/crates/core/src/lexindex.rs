//! Okapi BM25 over an in-memory inverted index.
//!
//! Per query term `t` with document frequency `df` in a collection of `N`
//! documents:
//!
//! ```text
//! idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//! score(q, d) = sum_t idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))
//! ```
//!
//! Repeated query terms count once per occurrence.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::DocumentCorpus;
use crate::error::{Error, Result};

/// Lowercases, then splits on every non-alphanumeric codepoint.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Term frequencies of a token sequence, keyed in lexicographic order.
pub fn term_counts<S: AsRef<str>>(tokens: &[S]) -> BTreeMap<&str, u32> {
    let mut counts = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.as_ref()).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        if !(k1 >= 0.0 && k1.is_finite()) {
            return Err(Error::validation(format!("k1 must be >= 0, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::validation(format!("b must be in [0, 1], got {b}")));
        }
        Ok(Bm25Params { k1, b })
    }

    pub const PROCIS: Bm25Params = Bm25Params { k1: 0.9, b: 0.4 };
    pub const WEBDISC_CC: Bm25Params = Bm25Params { k1: 8.0, b: 0.99 };
    pub const WEBDISC_IA: Bm25Params = Bm25Params { k1: 7.0, b: 0.99 };

    /// Named parameter profiles: `procis`, `webdisc-cc`, `webdisc-ia`.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "procis" => Ok(Self::PROCIS),
            "webdisc-cc" => Ok(Self::WEBDISC_CC),
            "webdisc-ia" => Ok(Self::WEBDISC_IA),
            other => Err(Error::validation(format!("unknown BM25 profile {other:?}"))),
        }
    }
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self::PROCIS
    }
}

impl FromStr for Bm25Params {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::profile(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
}

/// Top-k documents for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub qid: String,
    pub entries: Vec<RankedEntry>,
    pub k: usize,
}

impl RankedList {
    pub fn empty(qid: impl Into<String>, k: usize) -> Self {
        RankedList {
            qid: qid.into(),
            entries: Vec::new(),
            k,
        }
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `(score desc, doc_id asc)`.
pub fn rank_order(a: &RankedEntry, b: &RankedEntry) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    id_map: HashMap<String, u32>,
    corpus_checksum: String,
}

const MAGIC: &[u8; 8] = b"C2QIDX\0\0";
const INDEX_VERSION: u32 = 1;

impl InvertedIndex {
    /// Tokenizes documents in parallel and merges in corpus order.
    pub fn build(corpus: &DocumentCorpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::validation("cannot index an empty corpus"));
        }
        let docs: Vec<_> = corpus.iter().collect();
        let analyzed: Vec<(usize, Vec<(String, u32)>)> = docs
            .par_iter()
            .map(|d| {
                let tokens = tokenize(&d.text);
                let counts = term_counts(&tokens)
                    .into_iter()
                    .map(|(t, c)| (t.to_owned(), c))
                    .collect();
                (tokens.len(), counts)
            })
            .collect();

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for (i, (len, counts)) in analyzed.into_iter().enumerate() {
            if len == 0 {
                return Err(Error::validation(format!(
                    "document {} reduces to zero tokens",
                    docs[i].doc_id
                )));
            }
            doc_lengths.push(len as u32);
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting { doc: i as u32, tf });
            }
        }
        let doc_ids = docs.iter().map(|d| d.doc_id.clone()).collect();
        Ok(Self::assemble(postings, doc_ids, doc_lengths, corpus.checksum()))
    }

    fn assemble(
        postings: BTreeMap<String, Vec<Posting>>,
        doc_ids: Vec<String>,
        doc_lengths: Vec<u32>,
        corpus_checksum: String,
    ) -> Self {
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        let id_map = doc_ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), i as u32))
            .collect();
        InvertedIndex {
            postings,
            doc_ids,
            doc_lengths,
            avg_doc_length,
            id_map,
            corpus_checksum,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn corpus_checksum(&self) -> &str {
        &self.corpus_checksum
    }

    pub fn doc_id(&self, internal: u32) -> &str {
        &self.doc_ids[internal as usize]
    }

    pub fn internal_id(&self, doc_id: &str) -> Option<u32> {
        self.id_map.get(doc_id).copied()
    }

    pub fn doc_length(&self, internal: u32) -> u32 {
        self.doc_lengths[internal as usize]
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn df(&self, term: &str) -> u32 {
        self.postings(term).len() as u32
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`; positive for every `df <= N`.
    pub fn idf_for_df(&self, df: u32) -> f64 {
        let n = self.doc_count() as f64;
        let df = f64::from(df);
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn idf(&self, term: &str) -> f64 {
        self.idf_for_df(self.df(term))
    }

    fn tf_in(&self, term: &str, doc: u32) -> u32 {
        let ps = self.postings(term);
        ps.binary_search_by_key(&doc, |p| p.doc)
            .map_or(0, |i| ps[i].tf)
    }

    /// BM25 score of an indexed document.
    pub fn bm25_score<S: AsRef<str>>(
        &self,
        params: &Bm25Params,
        query_terms: &[S],
        doc_id: &str,
    ) -> Result<f64> {
        let doc = self
            .internal_id(doc_id)
            .ok_or_else(|| Error::validation(format!("unknown document {doc_id}")))?;
        let dl = f64::from(self.doc_length(doc));
        let mut score = 0.0;
        for term in query_terms {
            let term = term.as_ref();
            let tf = self.tf_in(term, doc);
            if tf > 0 {
                score += self.idf(term) * tf_part(params, tf, dl, self.avg_doc_length);
            }
        }
        Ok(score)
    }

    /// Scores arbitrary text as a one-document collection that borrows this
    /// index's IDF statistics. Length normalization is neutral (`dl = avgdl`);
    /// terms unseen in the indexed corpus contribute nothing.
    pub fn score_text<S: AsRef<str>>(&self, params: &Bm25Params, query_terms: &[S], text: &str) -> f64 {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return 0.0;
        }
        let counts = term_counts(&tokens);
        let dl = tokens.len() as f64;
        let mut score = 0.0;
        for term in query_terms {
            let term = term.as_ref();
            let df = self.df(term);
            if df == 0 {
                continue;
            }
            if let Some(&tf) = counts.get(term) {
                score += self.idf_for_df(df) * tf_part(params, tf, dl, dl);
            }
        }
        score
    }

    /// Top-`k` documents matching any query term. Zero scores are dropped and
    /// ties resolve by ascending doc_id.
    pub fn search(&self, params: &Bm25Params, qid: &str, query: &str, k: usize) -> RankedList {
        let terms = tokenize(query);
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let ps = self.postings(term);
            if ps.is_empty() {
                continue;
            }
            let idf = self.idf(term);
            for p in ps {
                let dl = f64::from(self.doc_lengths[p.doc as usize]);
                *acc.entry(p.doc).or_insert(0.0) += idf * tf_part(params, p.tf, dl, self.avg_doc_length);
            }
        }
        let mut entries: Vec<RankedEntry> = acc
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(doc, score)| RankedEntry {
                doc_id: self.doc_ids[doc as usize].clone(),
                score,
            })
            .collect();
        if entries.len() > k {
            entries.select_nth_unstable_by(k, rank_order);
            entries.truncate(k);
        }
        entries.sort_by(rank_order);
        RankedList {
            qid: qid.to_owned(),
            entries,
            k,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        put_u32(&mut body, self.doc_ids.len() as u32);
        for (id, &len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            put_str(&mut body, id);
            put_u32(&mut body, len);
        }
        put_u32(&mut body, self.postings.len() as u32);
        for (term, ps) in &self.postings {
            put_str(&mut body, term);
            put_u32(&mut body, ps.len() as u32);
            for p in ps {
                put_u32(&mut body, p.doc);
                put_u32(&mut body, p.tf);
            }
        }

        let mut out = Vec::with_capacity(body.len() + 112);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, INDEX_VERSION);
        put_str(&mut out, &self.corpus_checksum);
        out.extend_from_slice(&Sha256::digest(&body));
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::validation("not an index file (bad magic)"));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::validation(format!("unsupported index version {version}")));
        }
        let corpus_checksum = r.string()?;
        let body_sum = r.take(32)?.to_vec();
        if Sha256::digest(&bytes[r.pos..]).as_slice() != body_sum.as_slice() {
            return Err(Error::validation("index body checksum mismatch"));
        }

        let n = r.u32()? as usize;
        let mut doc_ids = Vec::with_capacity(n);
        let mut doc_lengths = Vec::with_capacity(n);
        for _ in 0..n {
            doc_ids.push(r.string()?);
            doc_lengths.push(r.u32()?);
        }
        let nterms = r.u32()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..nterms {
            let term = r.string()?;
            let np = r.u32()? as usize;
            let mut ps = Vec::with_capacity(np);
            for _ in 0..np {
                let doc = r.u32()?;
                if doc as usize >= n {
                    return Err(Error::validation("index posting references unknown document"));
                }
                ps.push(Posting { doc, tf: r.u32()? });
            }
            postings.insert(term, ps);
        }
        if n == 0 {
            return Err(Error::validation("index holds no documents"));
        }
        Ok(Self::assemble(postings, doc_ids, doc_lengths, corpus_checksum))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads an index and checks it was built from `corpus`.
    pub fn load_for_corpus(path: &Path, corpus: &DocumentCorpus) -> Result<Self> {
        let idx = Self::load(path)?;
        idx.verify_corpus(corpus)?;
        Ok(idx)
    }

    pub fn verify_corpus(&self, corpus: &DocumentCorpus) -> Result<()> {
        let actual = corpus.checksum();
        if actual != self.corpus_checksum {
            return Err(Error::validation(format!(
                "index was built from a different corpus (index {}, corpus {actual})",
                self.corpus_checksum
            )));
        }
        Ok(())
    }
}

/// `tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))`.
pub fn tf_part(params: &Bm25Params, tf: u32, dl: f64, avgdl: f64) -> f64 {
    let tf = f64::from(tf);
    tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * dl / avgdl))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::validation("truncated index file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::validation("index contains invalid UTF-8"))
    }
}
