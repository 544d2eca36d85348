//! Ad-hoc query candidates for relevant documents.
//!
//! The built-in generator draws terms from the document itself: terms are
//! ranked by within-document tf·IDF and each candidate is built by repeated
//! weighted sampling without replacement from the current top-`top_k`
//! remaining terms. Candidate `i` depends only on the document, the seed and
//! `i`, so asking for more candidates only appends to the list.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Document, DocumentCorpus};
use crate::error::{Error, Result};
use crate::lexindex::{term_counts, tokenize, InvertedIndex};
use crate::records;
use crate::rng::keyed_rng;
use crate::service::ServiceClient;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenBackend {
    Builtin,
    ExternalService(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenConfig {
    pub n: usize,
    pub top_k: usize,
    pub seed: u64,
    pub max_query_terms: usize,
    pub backend: GenBackend,
    /// Concurrent requests allowed against an external service.
    pub max_in_flight: usize,
    pub request_timeout: Duration,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 100,
            top_k: 10,
            seed: 0,
            max_query_terms: 8,
            backend: GenBackend::Builtin,
            max_in_flight: 4,
            request_timeout: Duration::from_secs(60),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.top_k == 0 || self.max_query_terms == 0 || self.max_in_flight == 0 {
            return Err(Error::validation(
                "n, top_k, max_query_terms and max_in_flight must all be >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub conv_id: String,
    pub turn_index: u32,
    pub doc_id: String,
    pub candidates: Vec<String>,
    /// `"builtin"` or `"service:<endpoint>"`.
    pub provenance: String,
}

/// Draws `cfg.n` candidates from the document's own terms.
pub fn generate_builtin(doc: &Document, index: &InvertedIndex, cfg: &GenConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let tokens = tokenize(&doc.text);
    if tokens.is_empty() {
        return Err(Error::validation(format!(
            "document {} has no terms to generate queries from",
            doc.doc_id
        )));
    }
    let mut ranked: Vec<(&str, f64)> = term_counts(&tokens)
        .into_iter()
        .map(|(term, tf)| (term, f64::from(tf) * index.idf(term)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let len = cfg.max_query_terms.min(ranked.len());

    Ok((0..cfg.n)
        .map(|ordinal| {
            let mut rng = keyed_rng(
                "qgen",
                cfg.seed,
                &[doc.doc_id.as_bytes(), &(ordinal as u64).to_le_bytes()],
            );
            let mut remaining = ranked.clone();
            let mut picked = Vec::with_capacity(len);
            for _ in 0..len {
                let window = &remaining[..cfg.top_k.min(remaining.len())];
                let total: f64 = window.iter().map(|(_, w)| w).sum();
                let mut u = rng.gen::<f64>() * total;
                let mut choice = window.len() - 1;
                for (i, (_, w)) in window.iter().enumerate() {
                    if u < *w {
                        choice = i;
                        break;
                    }
                    u -= w;
                }
                picked.push(remaining.remove(choice).0);
            }
            picked.join(" ")
        })
        .collect())
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    input: &'a str,
    n: usize,
    top_k: usize,
}

#[derive(Deserialize)]
struct GenerateResponse {
    queries: Vec<String>,
}

/// One `POST /generate` per document; the reply must hold exactly `n` non-blank queries.
pub fn generate_external(doc: &Document, cfg: &GenConfig, client: &ServiceClient) -> Result<Vec<String>> {
    cfg.validate()?;
    let resp: GenerateResponse = client.post_json(
        "/generate",
        &GenerateRequest {
            input: &doc.text,
            n: cfg.n,
            top_k: cfg.top_k,
        },
    )?;
    if resp.queries.len() != cfg.n {
        return Err(Error::Protocol(format!(
            "generation service returned {} queries for {}, expected {}",
            resp.queries.len(),
            doc.doc_id,
            cfg.n
        )));
    }
    if let Some(i) = resp.queries.iter().position(|q| q.trim().is_empty()) {
        return Err(Error::Protocol(format!(
            "generation service returned a blank query at position {i} for {}",
            doc.doc_id
        )));
    }
    Ok(resp.queries)
}

/// One candidate set per (judged turn, positive document), ordered by
/// `(conv_id, turn_index, doc_id)` whatever order generation finishes in.
/// Each distinct document is generated for once.
pub fn generate_for_judged_turns(
    convs: &[Conversation],
    corpus: &DocumentCorpus,
    index: &InvertedIndex,
    cfg: &GenConfig,
) -> Result<Vec<CandidateSet>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    let mut docs: BTreeMap<&str, &Document> = BTreeMap::new();
    for conv in convs {
        for t in conv.judged_turns() {
            for j in conv.positives(t) {
                let doc = corpus.get(&j.doc_id).ok_or_else(|| {
                    Error::validation(format!(
                        "conversation {} turn {t}: unknown document {}",
                        conv.conv_id, j.doc_id
                    ))
                })?;
                docs.insert(&doc.doc_id, doc);
                jobs.push((conv.conv_id.as_str(), t, doc.doc_id.as_str()));
            }
        }
    }
    let unique: Vec<&Document> = docs.into_values().collect();

    let (generated, provenance) = match &cfg.backend {
        GenBackend::Builtin => (
            unique
                .par_iter()
                .map(|d| generate_builtin(d, index, cfg))
                .collect::<Result<Vec<_>>>()?,
            "builtin".to_owned(),
        ),
        GenBackend::ExternalService(endpoint) => {
            let client = ServiceClient::with_timeout(endpoint, cfg.request_timeout);
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.max_in_flight)
                .build()
                .expect("thread pool");
            let out = pool.install(|| {
                unique
                    .par_iter()
                    .map(|d| generate_external(d, cfg, &client))
                    .collect::<Result<Vec<_>>>()
            })?;
            (out, format!("service:{endpoint}"))
        }
    };
    let by_doc: BTreeMap<&str, Vec<String>> = unique
        .iter()
        .map(|d| d.doc_id.as_str())
        .zip(generated)
        .collect();

    let mut sets: Vec<CandidateSet> = jobs
        .into_iter()
        .map(|(conv_id, turn_index, doc_id)| CandidateSet {
            conv_id: conv_id.to_owned(),
            turn_index,
            doc_id: doc_id.to_owned(),
            candidates: by_doc[doc_id].clone(),
            provenance: provenance.clone(),
        })
        .collect();
    sets.sort_by(|a, b| {
        (&a.conv_id, a.turn_index, &a.doc_id).cmp(&(&b.conv_id, b.turn_index, &b.doc_id))
    });
    Ok(sets)
}

pub fn write_candidates(path: &Path, sets: &[CandidateSet]) -> Result<()> {
    records::write_jsonl(path, sets)
}

pub fn load_candidates(path: &Path) -> Result<Vec<CandidateSet>> {
    let sets: Vec<CandidateSet> = records::read_jsonl(path)?;
    for s in &sets {
        if s.candidates.is_empty() || s.candidates.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::validation(format!(
                "candidate set {}.{} / {} has empty candidates",
                s.conv_id, s.turn_index, s.doc_id
            )));
        }
    }
    Ok(sets)
}
