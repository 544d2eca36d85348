//! Inference-time retrieval: one query per judged turn, BM25 search, run files.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{qid, ContextParts, Conversation, TaskSetting};
use crate::error::{Error, Result};
use crate::lexindex::{Bm25Params, InvertedIndex, RankedEntry, RankedList};
use crate::records;
use crate::service::ServiceClient;
use crate::traindata::PromptTemplate;

/// Where the query for a judged turn comes from.
pub enum QuerySource {
    /// The serialized context itself, untruncated.
    RawContext,
    /// Precomputed qid -> query, e.g. the output of an external mapper.
    Mapping(HashMap<String, String>),
    /// `POST /conv2query` with the rendered prompt.
    Service {
        client: ServiceClient,
        template: PromptTemplate,
        max_in_flight: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingRecord {
    pub qid: String,
    /// Training pair files load directly: their `target` is the query.
    #[serde(alias = "target")]
    pub query: String,
}

pub fn load_mapping(path: &Path) -> Result<HashMap<String, String>> {
    let recs: Vec<MappingRecord> = records::read_jsonl(path)?;
    let mut out = HashMap::with_capacity(recs.len());
    for r in recs {
        if out.insert(r.qid.clone(), r.query).is_some() {
            return Err(Error::validation(format!("duplicate qid {} in mapping file", r.qid)));
        }
    }
    Ok(out)
}

pub fn write_mapping(path: &Path, records: &[MappingRecord]) -> Result<()> {
    records::write_jsonl(path, records)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSet {
    pub tag: String,
    pub lists: BTreeMap<String, RankedList>,
}

impl RunSet {
    pub fn new(tag: impl Into<String>) -> Self {
        RunSet {
            tag: tag.into(),
            lists: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

#[derive(Serialize)]
struct Conv2QueryRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct Conv2QueryResponse {
    query: String,
}

/// Renders the prompt, asks the service, and keeps the first non-empty line.
pub fn query_via_service(client: &ServiceClient, template: &PromptTemplate, parts: &ContextParts) -> Result<String> {
    let prompt = template.render(parts)?;
    let resp: Conv2QueryResponse = client.post_json("/conv2query", &Conv2QueryRequest { prompt: &prompt })?;
    resp.query
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(str::to_owned)
        .ok_or_else(|| Error::Protocol("query service returned an empty query".into()))
}

fn parts_for(conv: &Conversation, t: u32, setting: TaskSetting) -> Result<ContextParts> {
    let mut parts = conv.context_parts(t)?;
    if setting == TaskSetting::Anticipation {
        parts.current = None;
    }
    Ok(parts)
}

/// Resolves the query for every judged turn, in `(conv order, turn)` order.
pub fn resolve_queries(
    convs: &[Conversation],
    setting: TaskSetting,
    source: &QuerySource,
) -> Result<Vec<(String, String)>> {
    let turns: Vec<(&Conversation, u32)> = convs
        .iter()
        .flat_map(|c| c.judged_turns().into_iter().map(move |t| (c, t)))
        .collect();
    if let QuerySource::Mapping(map) = source {
        let missing: Vec<String> = turns
            .iter()
            .map(|(c, t)| qid(&c.conv_id, *t))
            .filter(|q| !map.contains_key(q))
            .collect();
        if !missing.is_empty() {
            return Err(Error::validation(format!(
                "mapping file is missing {} judged qid(s): {}",
                missing.len(),
                missing.join(", ")
            )));
        }
    }
    let one = |(conv, t): &(&Conversation, u32)| -> Result<(String, String)> {
        let q = qid(&conv.conv_id, *t);
        let query = match source {
            QuerySource::RawContext => conv.assemble_context(*t, setting)?,
            QuerySource::Mapping(map) => map[&q].clone(),
            QuerySource::Service { client, template, .. } => {
                query_via_service(client, template, &parts_for(conv, *t, setting)?)?
            }
        };
        log::debug!("{q}: query {query:?}");
        Ok((q, query))
    };
    match source {
        QuerySource::Service { max_in_flight, .. } => rayon::ThreadPoolBuilder::new()
            .num_threads((*max_in_flight).max(1))
            .build()
            .expect("thread pool")
            .install(|| turns.par_iter().map(one).collect()),
        _ => turns.par_iter().map(one).collect(),
    }
}

/// Retrieves at exactly the judged turns. An empty query yields an empty list.
pub fn run_retrieval(
    convs: &[Conversation],
    index: &InvertedIndex,
    params: &Bm25Params,
    setting: TaskSetting,
    source: &QuerySource,
    k: usize,
    tag: &str,
) -> Result<RunSet> {
    let queries = resolve_queries(convs, setting, source)?;
    retrieve_queries(&queries, index, params, k, tag)
}

pub fn retrieve_queries(
    queries: &[(String, String)],
    index: &InvertedIndex,
    params: &Bm25Params,
    k: usize,
    tag: &str,
) -> Result<RunSet> {
    if k == 0 {
        return Err(Error::validation("k must be >= 1"));
    }
    let lists: Vec<RankedList> = queries
        .par_iter()
        .map(|(q, query)| index.search(params, q, query, k))
        .collect();
    let mut run = RunSet::new(tag);
    for list in lists {
        if run.lists.insert(list.qid.clone(), list).is_some() {
            return Err(Error::validation("duplicate qid in run"));
        }
    }
    Ok(run)
}

/// Six-column run text: `qid Q0 doc_id rank score tag`, qids sorted, ranks from 1.
pub fn run_text(run: &RunSet) -> String {
    let mut out = String::new();
    for (q, list) in &run.lists {
        for (i, e) in list.entries.iter().enumerate() {
            let _ = writeln!(out, "{q} Q0 {} {} {:.6} {}", e.doc_id, i + 1, e.score, run.tag);
        }
    }
    out
}

pub fn write_run(path: &Path, run: &RunSet) -> Result<()> {
    records::write_text(path, &run_text(run))
}

pub fn parse_run(text: &str, origin: &str) -> Result<RunSet> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_owned(),
        line,
        message,
    };
    let mut run = RunSet::default();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(parse_err(n, format!("expected 6 columns, found {}", cols.len())));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| parse_err(n, format!("bad rank {:?}", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| parse_err(n, format!("bad score {:?}", cols[4])))?;
        if run.tag.is_empty() {
            run.tag = cols[5].to_owned();
        }
        if !seen.insert((cols[0].to_owned(), cols[2].to_owned())) {
            return Err(parse_err(n, format!("document {} repeated for {}", cols[2], cols[0])));
        }
        let list = run
            .lists
            .entry(cols[0].to_owned())
            .or_insert_with(|| RankedList::empty(cols[0], 0));
        if rank != list.entries.len() + 1 {
            return Err(parse_err(n, format!("rank {rank} out of sequence for {}", cols[0])));
        }
        list.entries.push(RankedEntry {
            doc_id: cols[2].to_owned(),
            score,
        });
        list.k = list.entries.len();
    }
    Ok(run)
}

pub fn read_run(path: &Path) -> Result<RunSet> {
    parse_run(&records::read_text(path)?, &path.display().to_string())
}
