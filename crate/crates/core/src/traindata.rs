//! Training data export: (prompt, target) pairs for the conversation-to-query
//! mapper and (query, positive, hard negatives) triples for retriever tuning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{qid, ContextParts, Conversation, TaskSetting};
use crate::error::{Error, Result};
use crate::lexindex::{Bm25Params, InvertedIndex};
use crate::qfilter::{merge_turn_targets, FilterResult};
use crate::records::{self, ensure_format};
use crate::rng::keyed_rng;

pub const PAIRS_FORMAT: u32 = 1;
pub const TRIPLES_FORMAT: u32 = 1;

/// BM25 depth of each of the two hard-negative runs.
pub const HARD_NEGATIVE_DEPTH: usize = 200;
pub const DEFAULT_NEGATIVES: usize = 7;

const CONTEXTUALISATION_TEMPLATE: &str = "Instruction: Based on the following conversation history and the current user utterance, please generate a search query that retrieves documents relevant to the current user utterance.\nConversational history: {history}\nCurrent user utterance: {current}\nGenerated query:";

const ANTICIPATION_TEMPLATE: &str = "Instruction: Based on the following conversation history, please generate a search query that retrieves documents relevant to the next expected utterance.\nConversational history: {history}\nGenerated query:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub setting: TaskSetting,
    pub text: &'static str,
}

impl PromptTemplate {
    pub fn for_setting(setting: TaskSetting) -> Self {
        let text = match setting {
            TaskSetting::Contextualisation => CONTEXTUALISATION_TEMPLATE,
            TaskSetting::Anticipation => ANTICIPATION_TEMPLATE,
        };
        PromptTemplate { setting, text }
    }

    /// Fills `{history}` and `{current}` in one pass, so braces inside the
    /// substituted text are never re-expanded.
    pub fn render(&self, parts: &ContextParts) -> Result<String> {
        let current = match (self.setting, parts.current.as_deref()) {
            (TaskSetting::Contextualisation, Some(c)) if !c.trim().is_empty() => c,
            (TaskSetting::Contextualisation, _) => {
                return Err(Error::validation(
                    "contextualisation prompt needs a current utterance",
                ))
            }
            (TaskSetting::Anticipation, _) => "",
        };
        let mut out = String::with_capacity(self.text.len() + parts.history.len() + current.len());
        let mut rest = self.text;
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let tail = &rest[start..];
            if let Some(after) = tail.strip_prefix("{history}") {
                out.push_str(&parts.history);
                rest = after;
            } else if let Some(after) = tail.strip_prefix("{current}") {
                out.push_str(current);
                rest = after;
            } else {
                out.push('{');
                rest = &tail[1..];
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

pub fn render_prompt(parts: &ContextParts, setting: TaskSetting) -> Result<String> {
    PromptTemplate::for_setting(setting).render(parts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub qid: String,
    pub prompt: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<TrainingPair>,
    /// Number of judged turns across all conversations; equals `pairs.len()`.
    pub judged_turns: usize,
}

/// One pair per judged turn, sorted by `(conv_id, turn_index)`.
pub fn build_pairs(convs: &[Conversation], results: &[FilterResult], setting: TaskSetting) -> Result<PairSet> {
    let mut by_turn: HashMap<(&str, u32), Vec<&FilterResult>> = HashMap::new();
    for r in results {
        by_turn.entry((r.conv_id.as_str(), r.turn_index)).or_default().push(r);
    }
    let mut keyed = BTreeMap::new();
    for conv in convs {
        for t in conv.judged_turns() {
            let rs = by_turn.get(&(conv.conv_id.as_str(), t)).ok_or_else(|| {
                Error::validation(format!("judged turn {} has no filter result", qid(&conv.conv_id, t)))
            })?;
            let pair = TrainingPair {
                qid: qid(&conv.conv_id, t),
                prompt: render_prompt(&conv.context_parts(t)?, setting)?,
                target: merge_turn_targets(rs)?,
            };
            keyed.insert((conv.conv_id.clone(), t), pair);
        }
    }
    let pairs: Vec<TrainingPair> = keyed.into_values().collect();
    Ok(PairSet {
        judged_turns: pairs.len(),
        pairs,
    })
}

/// Union of the top-200 BM25 results for the history alone and for history
/// plus the current utterance, minus `positives`, in doc_id order.
pub fn negative_pool(
    index: &InvertedIndex,
    params: &Bm25Params,
    conv: &Conversation,
    t: u32,
    positives: &[&str],
) -> Result<Vec<String>> {
    let history = conv.assemble_context(t, TaskSetting::Anticipation)?;
    let full = conv.assemble_context(t, TaskSetting::Contextualisation)?;
    let mut pool = BTreeSet::new();
    for query in [&history, &full] {
        let run = index.search(params, "", query, HARD_NEGATIVE_DEPTH);
        pool.extend(run.entries.into_iter().map(|e| e.doc_id));
    }
    for p in positives {
        pool.remove(*p);
    }
    Ok(pool.into_iter().collect())
}

/// Samples `m` hard negatives without replacement, keyed by `(seed, conv_id, t)`.
/// A pool no larger than `m` is returned whole.
pub fn mine_negatives(
    index: &InvertedIndex,
    params: &Bm25Params,
    conv: &Conversation,
    t: u32,
    positives: &[&str],
    m: usize,
    seed: u64,
) -> Result<Vec<String>> {
    if m == 0 {
        return Err(Error::validation("number of negatives must be >= 1"));
    }
    let mut pool = negative_pool(index, params, conv, t, positives)?;
    if pool.is_empty() {
        return Err(Error::validation(format!(
            "empty hard-negative pool for {}",
            qid(&conv.conv_id, t)
        )));
    }
    if pool.len() <= m {
        return Ok(pool);
    }
    let mut rng = keyed_rng("negatives", seed, &[conv.conv_id.as_bytes(), &t.to_le_bytes()]);
    let (picked, _) = pool.partial_shuffle(&mut rng, m);
    Ok(picked.to_vec())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalTriple {
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmptyPoolPolicy {
    #[default]
    Fail,
    Skip,
}

#[derive(Debug, Clone)]
pub struct TripleConfig {
    pub params: Bm25Params,
    pub negatives: usize,
    pub seed: u64,
    pub on_empty_pool: EmptyPoolPolicy,
}

/// One triple per (judged turn, positive). The query is the turn's merged
/// target; negatives are mined once per turn and exclude all its positives.
pub fn build_triples(
    convs: &[Conversation],
    pairs: &[TrainingPair],
    index: &InvertedIndex,
    cfg: &TripleConfig,
) -> Result<(Vec<RetrievalTriple>, Vec<String>)> {
    let targets: HashMap<&str, &str> = pairs.iter().map(|p| (p.qid.as_str(), p.target.as_str())).collect();
    let mut keyed: BTreeMap<(String, u32), Vec<RetrievalTriple>> = BTreeMap::new();
    let mut skipped = Vec::new();
    for conv in convs {
        for t in conv.judged_turns() {
            let q = qid(&conv.conv_id, t);
            let target = *targets
                .get(q.as_str())
                .ok_or_else(|| Error::validation(format!("no training pair for {q}")))?;
            let positives: Vec<&str> = conv.positives(t).map(|j| j.doc_id.as_str()).collect();
            if cfg.negatives == 0 {
                return Err(Error::validation("number of negatives must be >= 1"));
            }
            if cfg.on_empty_pool == EmptyPoolPolicy::Skip
                && negative_pool(index, &cfg.params, conv, t, &positives)?.is_empty()
            {
                log::warn!("skipping {q}: empty hard-negative pool");
                skipped.push(q);
                continue;
            }
            let negatives = mine_negatives(index, &cfg.params, conv, t, &positives, cfg.negatives, cfg.seed)?;
            let triples = positives
                .iter()
                .map(|p| RetrievalTriple {
                    query: target.to_owned(),
                    positive: (*p).to_owned(),
                    negatives: negatives.clone(),
                })
                .collect();
            keyed.insert((conv.conv_id.clone(), t), triples);
        }
    }
    Ok((keyed.into_values().flatten().collect(), skipped))
}

#[derive(Serialize, Deserialize)]
struct PairLine {
    format: u32,
    #[serde(flatten)]
    pair: TrainingPair,
}

#[derive(Serialize, Deserialize)]
struct TripleLine {
    format: u32,
    #[serde(flatten)]
    triple: RetrievalTriple,
}

pub fn export_pairs(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    let lines: Vec<_> = pairs
        .iter()
        .map(|p| PairLine {
            format: PAIRS_FORMAT,
            pair: p.clone(),
        })
        .collect();
    records::write_jsonl(path, &lines)
}

pub fn load_pairs(path: &Path) -> Result<Vec<TrainingPair>> {
    let lines: Vec<PairLine> = records::read_jsonl(path)?;
    lines
        .into_iter()
        .map(|l| ensure_format(l.format, PAIRS_FORMAT, "pairs").map(|_| l.pair))
        .collect()
}

pub fn export_triples(path: &Path, triples: &[RetrievalTriple]) -> Result<()> {
    let lines: Vec<_> = triples
        .iter()
        .map(|t| TripleLine {
            format: TRIPLES_FORMAT,
            triple: t.clone(),
        })
        .collect();
    records::write_jsonl(path, &lines)
}

pub fn load_triples(path: &Path) -> Result<Vec<RetrievalTriple>> {
    let lines: Vec<TripleLine> = records::read_jsonl(path)?;
    lines
        .into_iter()
        .map(|l| ensure_format(l.format, TRIPLES_FORMAT, "triples").map(|_| l.triple))
        .collect()
}
