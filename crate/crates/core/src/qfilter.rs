//! Picking one query target per (turn, document) out of its candidates.
//!
//! Each candidate gets a query-document score `s_qd` and a query-context
//! score `s_qc` from the same [`RelevanceScorer`]. `QF-DC` keeps the
//! candidate with the largest `s_qd + s_qc`, `QF-D` the largest `s_qd`, and
//! `Random` a seeded uniform pick. Ties go to the smallest index.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Document, DocumentCorpus, TaskSetting};
use crate::error::{Error, Result};
use crate::lexindex::{tokenize, Bm25Params, InvertedIndex};
use crate::qgen::CandidateSet;
use crate::records;
use crate::rng::keyed_rng;
use crate::service::ServiceClient;

/// Query-text relevance on the backend's own scale; larger is more relevant.
pub trait RelevanceScorer: Sync {
    fn score(&self, query: &str, text: &str) -> Result<f64>;

    fn score_document(&self, query: &str, doc: &Document) -> Result<f64> {
        self.score(query, &doc.text)
    }

    fn score_batch(&self, queries: &[String], text: &str) -> Result<Vec<f64>> {
        queries.iter().map(|q| self.score(q, text)).collect()
    }

    fn score_document_batch(&self, queries: &[String], doc: &Document) -> Result<Vec<f64>> {
        queries.iter().map(|q| self.score_document(q, doc)).collect()
    }
}

/// BM25 against the main index. Indexed documents are scored with their
/// collection statistics; any other text is scored as a one-document
/// collection sharing the index's IDF.
pub struct Bm25Scorer<'a> {
    index: &'a InvertedIndex,
    params: Bm25Params,
}

impl<'a> Bm25Scorer<'a> {
    pub fn new(index: &'a InvertedIndex, params: Bm25Params) -> Self {
        Bm25Scorer { index, params }
    }
}

impl RelevanceScorer for Bm25Scorer<'_> {
    fn score(&self, query: &str, text: &str) -> Result<f64> {
        Ok(self.index.score_text(&self.params, &tokenize(query), text))
    }

    fn score_document(&self, query: &str, doc: &Document) -> Result<f64> {
        if self.index.internal_id(&doc.doc_id).is_some() {
            self.index.bm25_score(&self.params, &tokenize(query), &doc.doc_id)
        } else {
            self.score(query, &doc.text)
        }
    }
}

/// Client for an external reranker: `POST /score` and `POST /score_batch`.
pub struct RerankerClient {
    client: ServiceClient,
}

impl RerankerClient {
    pub fn new(client: ServiceClient) -> Self {
        RerankerClient { client }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    query: &'a str,
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

#[derive(Serialize)]
struct ScoreBatchRequest<'a> {
    queries: &'a [String],
    texts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct ScoreBatchResponse {
    scores: Vec<f64>,
}

impl RelevanceScorer for RerankerClient {
    fn score(&self, query: &str, text: &str) -> Result<f64> {
        let r: ScoreResponse = self.client.post_json("/score", &ScoreRequest { query, text })?;
        Ok(r.score)
    }

    fn score_batch(&self, queries: &[String], text: &str) -> Result<Vec<f64>> {
        let r: ScoreBatchResponse = self.client.post_json(
            "/score_batch",
            &ScoreBatchRequest {
                queries,
                texts: vec![text; queries.len()],
            },
        )?;
        if r.scores.len() != queries.len() {
            return Err(Error::Protocol(format!(
                "reranker returned {} scores for {} queries",
                r.scores.len(),
                queries.len()
            )));
        }
        Ok(r.scores)
    }

    fn score_document_batch(&self, queries: &[String], doc: &Document) -> Result<Vec<f64>> {
        self.score_batch(queries, &doc.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    QfDc,
    QfD,
    Random(u64),
}

impl FilterMode {
    /// Parses `qf-dc`, `qf-d` or `random`; `seed` only matters for `random`.
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        match name {
            "qf-dc" | "qfdc" => Ok(FilterMode::QfDc),
            "qf-d" | "qfd" => Ok(FilterMode::QfD),
            "random" => Ok(FilterMode::Random(seed)),
            other => Err(Error::validation(format!("unknown filter mode {other:?}"))),
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterMode::QfDc => f.write_str("qf-dc"),
            FilterMode::QfD => f.write_str("qf-d"),
            FilterMode::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("random", seed)) => seed
                .parse()
                .map(FilterMode::Random)
                .map_err(|_| Error::validation(format!("bad random seed {seed:?}"))),
            _ => FilterMode::parse(s, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub query: String,
    pub s_qd: f64,
    pub s_qc: f64,
    pub s_agg: f64,
}

impl ScoredCandidate {
    pub fn new(query: impl Into<String>, s_qd: f64, s_qc: f64, mode: FilterMode) -> Self {
        let s_agg = match mode {
            FilterMode::QfD => s_qd,
            FilterMode::QfDc | FilterMode::Random(_) => s_qd + s_qc,
        };
        ScoredCandidate {
            query: query.into(),
            s_qd,
            s_qc,
            s_agg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub conv_id: String,
    pub turn_index: u32,
    pub doc_id: String,
    pub mode: String,
    /// 0-based position of the chosen candidate.
    pub selected_index: usize,
    pub selected_query: String,
    pub candidates: Vec<ScoredCandidate>,
}

pub fn score_qd(scorer: &dyn RelevanceScorer, query: &str, doc: &Document) -> Result<f64> {
    scorer.score_document(query, doc)
}

pub fn score_qc(scorer: &dyn RelevanceScorer, query: &str, context: &str) -> Result<f64> {
    scorer.score(query, context)
}

/// Index of the winning candidate. Score modes take the first maximum of
/// `s_agg`; `Random` draws from a stream keyed by `(seed, conv_id, turn, doc_id)`.
pub fn select_index(
    scored: &[ScoredCandidate],
    mode: FilterMode,
    conv_id: &str,
    turn_index: u32,
    doc_id: &str,
) -> Result<usize> {
    if scored.is_empty() {
        return Err(Error::validation(format!(
            "empty candidate set for {conv_id}.{turn_index} / {doc_id}"
        )));
    }
    Ok(match mode {
        FilterMode::Random(seed) => {
            let mut rng = keyed_rng(
                "qfilter-random",
                seed,
                &[conv_id.as_bytes(), &turn_index.to_le_bytes(), doc_id.as_bytes()],
            );
            rng.gen_range(0..scored.len())
        }
        FilterMode::QfDc | FilterMode::QfD => {
            let mut best = 0;
            for (i, c) in scored.iter().enumerate().skip(1) {
                if c.s_agg > scored[best].s_agg {
                    best = i;
                }
            }
            best
        }
    })
}

fn min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Scores every candidate against the document and the context, then selects.
/// With `normalize`, `s_qd` and `s_qc` are each min-max scaled over the set first.
pub fn filter(
    cands: &CandidateSet,
    doc: &Document,
    context: &str,
    scorer: &dyn RelevanceScorer,
    mode: FilterMode,
    normalize: bool,
) -> Result<FilterResult> {
    if cands.candidates.is_empty() {
        return Err(Error::validation(format!(
            "empty candidate set for {}.{} / {}",
            cands.conv_id, cands.turn_index, cands.doc_id
        )));
    }
    let mut qd = scorer.score_document_batch(&cands.candidates, doc)?;
    let mut qc = scorer.score_batch(&cands.candidates, context)?;
    if normalize {
        min_max(&mut qd);
        min_max(&mut qc);
    }
    let scored: Vec<ScoredCandidate> = cands
        .candidates
        .iter()
        .zip(qd.into_iter().zip(qc))
        .map(|(q, (d, c))| ScoredCandidate::new(q.clone(), d, c, mode))
        .collect();
    let i = select_index(&scored, mode, &cands.conv_id, cands.turn_index, &cands.doc_id)?;
    Ok(FilterResult {
        conv_id: cands.conv_id.clone(),
        turn_index: cands.turn_index,
        doc_id: cands.doc_id.clone(),
        mode: mode.to_string(),
        selected_index: i,
        selected_query: scored[i].query.clone(),
        candidates: scored,
    })
}

/// Filters every candidate set, using the context the given setting exposes
/// at that turn. Output keeps the input order.
pub fn filter_all(
    sets: &[CandidateSet],
    convs: &[Conversation],
    corpus: &DocumentCorpus,
    scorer: &dyn RelevanceScorer,
    mode: FilterMode,
    setting: TaskSetting,
    normalize: bool,
) -> Result<Vec<FilterResult>> {
    let by_id: HashMap<&str, &Conversation> = convs.iter().map(|c| (c.conv_id.as_str(), c)).collect();
    sets.par_iter()
        .map(|set| {
            let conv = by_id.get(set.conv_id.as_str()).ok_or_else(|| {
                Error::validation(format!("candidates reference unknown conversation {}", set.conv_id))
            })?;
            let doc = corpus.get(&set.doc_id).ok_or_else(|| {
                Error::validation(format!(
                    "conversation {} turn {}: unknown document {}",
                    set.conv_id, set.turn_index, set.doc_id
                ))
            })?;
            let context = conv.assemble_context(set.turn_index, setting)?;
            filter(set, doc, &context, scorer, mode, normalize)
        })
        .collect()
}

/// Joins the selected queries of one turn with `"; "`, in doc_id order.
pub fn merge_turn_targets(results: &[&FilterResult]) -> Result<String> {
    let first = results
        .first()
        .ok_or_else(|| Error::validation("no filter results to merge"))?;
    if let Some(r) = results
        .iter()
        .find(|r| r.conv_id != first.conv_id || r.turn_index != first.turn_index)
    {
        return Err(Error::validation(format!(
            "cannot merge targets across turns ({}.{} vs {}.{})",
            first.conv_id, first.turn_index, r.conv_id, r.turn_index
        )));
    }
    let mut sorted: Vec<&FilterResult> = results.to_vec();
    sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    Ok(sorted
        .iter()
        .map(|r| r.selected_query.as_str())
        .collect::<Vec<_>>()
        .join("; "))
}

pub fn write_filter_results(path: &Path, results: &[FilterResult]) -> Result<()> {
    records::write_jsonl(path, results)
}

pub fn load_filter_results(path: &Path) -> Result<Vec<FilterResult>> {
    records::read_jsonl(path)
}
