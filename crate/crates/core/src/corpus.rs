//! Conversations, documents and relevance judgments.
//!
//! Conversation files hold one JSON record per line:
//!
//! ```text
//! {"format":1,"conv_id":"c1",
//!  "turns":[{"turn":1,"speaker":"alice","text":"..."}, ...],
//!  "judgments":[{"turn":3,"doc_id":"d7","grade":1}, ...]}
//! ```
//!
//! Corpus files hold one `{"doc_id": ..., "text": ...}` record per line.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{self, ensure_format};

pub const CONVERSATION_FORMAT: u32 = 1;

/// Which part of the conversation is visible when retrieving at turn `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSetting {
    /// History plus the current utterance `u_t`.
    Contextualisation,
    /// History only, turns `1..t-1`.
    Anticipation,
}

impl TaskSetting {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskSetting::Contextualisation => "contextualisation",
            TaskSetting::Anticipation => "anticipation",
        }
    }
}

impl FromStr for TaskSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contextualisation" | "contextualization" | "cc" => Ok(TaskSetting::Contextualisation),
            "anticipation" | "ia" => Ok(TaskSetting::Anticipation),
            other => Err(Error::validation(format!("unknown task setting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    #[serde(rename = "turn")]
    pub turn_index: u32,
    #[serde(rename = "speaker")]
    pub speaker_id: String,
    pub text: String,
}

impl Utterance {
    /// `"<speaker_id>: <text>"`.
    pub fn render(&self) -> String {
        format!("{}: {}", self.speaker_id, self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub doc_id: String,
    pub grade: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub conv_id: String,
    pub turns: Vec<Utterance>,
    /// turn_index -> judgments, in file order.
    pub judgments: BTreeMap<u32, Vec<Judgment>>,
}

#[derive(Serialize, Deserialize)]
struct JudgmentRecord {
    turn: u32,
    doc_id: String,
    grade: u32,
}

#[derive(Serialize, Deserialize)]
struct ConversationRecord {
    format: u32,
    conv_id: String,
    turns: Vec<Utterance>,
    #[serde(default)]
    judgments: Vec<JudgmentRecord>,
}

impl Conversation {
    pub fn new(conv_id: impl Into<String>, turns: Vec<Utterance>) -> Self {
        Conversation {
            conv_id: conv_id.into(),
            turns,
            judgments: BTreeMap::new(),
        }
    }

    pub fn with_judgment(mut self, turn: u32, doc_id: impl Into<String>, grade: u32) -> Self {
        self.judgments.entry(turn).or_default().push(Judgment {
            doc_id: doc_id.into(),
            grade,
        });
        self
    }

    pub fn num_turns(&self) -> u32 {
        self.turns.len() as u32
    }

    pub fn utterance(&self, t: u32) -> Result<&Utterance> {
        if t == 0 || t > self.num_turns() {
            return Err(Error::validation(format!(
                "turn {t} out of range for conversation {} with {} turns",
                self.conv_id,
                self.turns.len()
            )));
        }
        Ok(&self.turns[(t - 1) as usize])
    }

    /// Judgments at `t` with grade >= 1.
    pub fn positives(&self, t: u32) -> impl Iterator<Item = &Judgment> {
        self.judgments
            .get(&t)
            .into_iter()
            .flatten()
            .filter(|j| j.grade >= 1)
    }

    /// Ascending indices of turns carrying at least one positive judgment.
    /// These are the only turns retrieval happens at.
    pub fn judged_turns(&self) -> Vec<u32> {
        self.judgments
            .keys()
            .copied()
            .filter(|&t| self.positives(t).next().is_some())
            .collect()
    }

    /// Serializes the visible context at turn `t` under `setting`.
    pub fn assemble_context(&self, t: u32, setting: TaskSetting) -> Result<String> {
        self.utterance(t)?;
        let end = match setting {
            TaskSetting::Contextualisation => t,
            TaskSetting::Anticipation => t - 1,
        };
        Ok(render_turns(&self.turns[..end as usize]))
    }

    /// History (`1..t-1`) and current utterance, rendered separately for prompts.
    pub fn context_parts(&self, t: u32) -> Result<ContextParts> {
        let current = self.utterance(t)?.render();
        Ok(ContextParts {
            history: render_turns(&self.turns[..(t - 1) as usize]),
            current: Some(current),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.conv_id.trim().is_empty() {
            return Err(Error::validation("empty conv_id"));
        }
        for (i, u) in self.turns.iter().enumerate() {
            if u.turn_index as usize != i + 1 {
                return Err(Error::validation(format!(
                    "conversation {}: non-contiguous turns (expected turn {}, found {})",
                    self.conv_id,
                    i + 1,
                    u.turn_index
                )));
            }
            if u.text.trim().is_empty() {
                return Err(Error::validation(format!(
                    "conversation {}: turn {} has empty text",
                    self.conv_id, u.turn_index
                )));
            }
        }
        for (&t, js) in &self.judgments {
            if t == 0 || t > self.num_turns() {
                return Err(Error::validation(format!(
                    "conversation {}: judgment on nonexistent turn {t}",
                    self.conv_id
                )));
            }
            let mut seen = HashSet::new();
            for j in js {
                if !seen.insert(j.doc_id.as_str()) {
                    return Err(Error::validation(format!(
                        "conversation {}: turn {t} judges {} twice",
                        self.conv_id, j.doc_id
                    )));
                }
            }
        }
        Ok(())
    }

    fn from_record(rec: ConversationRecord) -> Result<Self> {
        ensure_format(rec.format, CONVERSATION_FORMAT, "conversation")?;
        let mut conv = Conversation::new(rec.conv_id, rec.turns);
        for j in rec.judgments {
            conv = conv.with_judgment(j.turn, j.doc_id, j.grade);
        }
        conv.validate()?;
        Ok(conv)
    }

    fn to_record(&self) -> ConversationRecord {
        ConversationRecord {
            format: CONVERSATION_FORMAT,
            conv_id: self.conv_id.clone(),
            turns: self.turns.clone(),
            judgments: self
                .judgments
                .iter()
                .flat_map(|(&turn, js)| {
                    js.iter().map(move |j| JudgmentRecord {
                        turn,
                        doc_id: j.doc_id.clone(),
                        grade: j.grade,
                    })
                })
                .collect(),
        }
    }
}

/// Context split for prompt rendering. `current` is absent under anticipation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextParts {
    pub history: String,
    pub current: Option<String>,
}

pub fn render_turns(turns: &[Utterance]) -> String {
    let mut out = String::new();
    for (i, u) in turns.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(out, "{}: {}", u.speaker_id, u.text);
    }
    out
}

/// Query id for a turn: `"<conv_id>.<turn_index>"`.
pub fn qid(conv_id: &str, turn: u32) -> String {
    format!("{conv_id}.{turn}")
}

/// Splits a qid at its last `.`.
pub fn parse_qid(qid: &str) -> Option<(&str, u32)> {
    let (conv, turn) = qid.rsplit_once('.')?;
    Some((conv, turn.parse().ok()?))
}

pub fn load_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let recs: Vec<ConversationRecord> = records::read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(recs.len());
    for rec in recs {
        let conv = Conversation::from_record(rec)?;
        if !seen.insert(conv.conv_id.clone()) {
            return Err(Error::validation(format!(
                "duplicate conv_id {}",
                conv.conv_id
            )));
        }
        out.push(conv);
    }
    Ok(out)
}

pub fn write_conversations(path: &Path, convs: &[Conversation]) -> Result<()> {
    let recs: Vec<_> = convs.iter().map(Conversation::to_record).collect();
    records::write_jsonl(path, &recs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            text: text.into(),
        }
    }
}

/// Immutable id -> text store in insertion order.
#[derive(Debug, Clone, Default)]
pub struct DocumentCorpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl DocumentCorpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(docs.len());
        let mut dups = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            if d.text.trim().is_empty() {
                return Err(Error::validation(format!("document {} has empty text", d.doc_id)));
            }
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                dups.push(d.doc_id.clone());
            }
        }
        if !dups.is_empty() {
            return Err(Error::validation(format!(
                "duplicate doc_id(s): {}",
                dups.join(", ")
            )));
        }
        Ok(DocumentCorpus { docs, by_id })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.docs.iter()
    }

    /// SHA-256 over `doc_id \t text \n` for every document in order.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in &self.docs {
            h.update(d.doc_id.as_bytes());
            h.update(b"\t");
            h.update(d.text.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

pub fn load_corpus(path: &Path) -> Result<DocumentCorpus> {
    DocumentCorpus::from_documents(records::read_jsonl(path)?)
}

pub fn write_corpus(path: &Path, corpus: &DocumentCorpus) -> Result<()> {
    records::write_jsonl(path, corpus.iter())
}

/// Four-column qrels text, `"<qid> 0 <doc_id> <grade>"`, positives only,
/// ordered by conversation then turn then file order.
pub fn qrels_text(convs: &[Conversation]) -> String {
    let mut out = String::new();
    for conv in convs {
        for t in conv.judged_turns() {
            for j in conv.positives(t) {
                let _ = writeln!(out, "{} 0 {} {}", qid(&conv.conv_id, t), j.doc_id, j.grade);
            }
        }
    }
    out
}

pub fn write_qrels(path: &Path, convs: &[Conversation]) -> Result<()> {
    records::write_text(path, &qrels_text(convs))
}
