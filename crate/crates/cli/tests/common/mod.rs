//! Shared fixture and brute-force oracles for the CLI-level tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use conv2query::corpus::{Conversation, Document, DocumentCorpus, Utterance};
use conv2query::qgen::CandidateSet;

pub const CLUSTERS: usize = 20;
pub const PER_CLUSTER: usize = 5;

pub fn brute_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            cur.push(c);
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Exhaustive Okapi BM25 over raw texts: every document is scored against
/// every query token occurrence.
pub struct BruteBm25 {
    docs: Vec<(String, Vec<String>)>,
    df: BTreeMap<String, usize>,
    avgdl: f64,
    k1: f64,
    b: f64,
}

impl BruteBm25 {
    pub fn new(docs: &[(String, String)], k1: f64, b: f64) -> Self {
        let docs: Vec<(String, Vec<String>)> = docs.iter().map(|(id, t)| (id.clone(), brute_tokens(t))).collect();
        let mut df = BTreeMap::new();
        for (_, toks) in &docs {
            for t in toks.iter().collect::<BTreeSet<_>>() {
                *df.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let avgdl = docs.iter().map(|(_, t)| t.len()).sum::<usize>() as f64 / docs.len() as f64;
        BruteBm25 { docs, df, avgdl, k1, b }
    }

    pub fn score(&self, query: &str, doc: usize) -> f64 {
        let n = self.docs.len() as f64;
        let toks = &self.docs[doc].1;
        let dl = toks.len() as f64;
        let mut s = 0.0;
        for q in brute_tokens(query) {
            let tf = toks.iter().filter(|t| **t == q).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = self.df[&q] as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            s += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * dl / self.avgdl));
        }
        s
    }

    /// Positive-score documents, score descending then id ascending, cut at `k`.
    pub fn search(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = (0..self.docs.len())
            .map(|i| (self.docs[i].0.clone(), self.score(query, i)))
            .filter(|(_, s)| *s > 0.0)
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }
}

pub fn doc_id(cluster: usize, slot: usize) -> String {
    format!("d{cluster:02}{slot}")
}

fn topic(c: usize) -> String {
    format!("topic{c}")
}

fn fill(c: usize) -> String {
    format!("fill{c}")
}

/// The two terms only this document contains.
pub fn own_terms(c: usize, j: usize) -> (String, String) {
    (format!("u{c}k{j}a"), format!("u{c}k{j}b"))
}

/// 20 clusters of 5 equal-length documents. Cluster terms are frequent inside
/// the cluster; each document also has two terms of its own.
pub fn corpus() -> DocumentCorpus {
    let mut docs = Vec::new();
    for c in 0..CLUSTERS {
        for j in 0..PER_CLUSTER {
            let (t, f) = (topic(c), fill(c));
            let (ua, ub) = own_terms(c, j);
            let text = format!("{t} {f} {t} {ua} {f} {t} {f} {t} {ub} {f} {t} {f} {t}");
            docs.push(Document::new(doc_id(c, j), text));
        }
    }
    DocumentCorpus::from_documents(docs).unwrap()
}

pub struct Target {
    pub turn: u32,
    pub cluster: usize,
    pub slot: usize,
    /// Documents whose own terms are mentioned in the conversation as noise.
    pub noise: Vec<(usize, usize)>,
}

/// Two judged turns per conversation (2 and 4). Targets sit at slots 1..=4 so
/// a cluster-term query never ranks them first by id.
pub fn targets(i: usize) -> [Target; 2] {
    let noise = |base: usize| -> Vec<(usize, usize)> { (0..6).map(|k| ((base + 1 + 3 * k) % CLUSTERS, 0)).collect() };
    let c2 = i;
    let c4 = (i + 7) % CLUSTERS;
    [
        Target { turn: 2, cluster: c2, slot: 1 + i % 4, noise: noise(c2) },
        Target { turn: 4, cluster: c4, slot: 1 + (i + 2) % 4, noise: noise(c4) },
    ]
}

fn pair(c: usize, j: usize) -> String {
    let (a, b) = own_terms(c, j);
    format!("{a} {b}")
}

pub fn conversations() -> Vec<Conversation> {
    (0..CLUSTERS)
        .map(|i| {
            let [t2, t4] = targets(i);
            let n = |t: &Target, k: usize| pair(t.noise[k].0, t.noise[k].1);
            let texts = [
                format!("i was reading about {} and then {} and also {} yesterday", n(&t2, 0), n(&t2, 1), n(&t2, 2)),
                format!("that made me think of {} but mostly {} and {} too", n(&t2, 3), pair(t2.cluster, t2.slot), n(&t2, 4)),
                format!("right, and what about {} or {} or even {}", n(&t2, 5), n(&t4, 0), n(&t4, 1)),
                format!("honestly {} then {} and {} plus {} and {}", n(&t4, 2), n(&t4, 3), pair(t4.cluster, t4.slot), n(&t4, 4), n(&t4, 5)),
            ];
            let turns = texts
                .into_iter()
                .enumerate()
                .map(|(k, text)| Utterance {
                    turn_index: k as u32 + 1,
                    speaker_id: if k % 2 == 0 { "user".into() } else { "agent".into() },
                    text,
                })
                .collect();
            Conversation::new(format!("c{i:02}"), turns)
                .with_judgment(t2.turn, doc_id(t2.cluster, t2.slot), 1)
                .with_judgment(t4.turn, doc_id(t4.cluster, t4.slot), 1)
        })
        .collect()
}

/// Ten candidates per judged turn: one built from the document's own terms
/// (which the context mentions), three from cluster terms (strong for the
/// document, absent from the context, shared by the whole cluster) and six
/// from noise terms in the context that the document lacks.
pub fn candidate_sets() -> Vec<CandidateSet> {
    let mut out = Vec::new();
    for i in 0..CLUSTERS {
        for t in targets(i) {
            let (tp, fl) = (topic(t.cluster), fill(t.cluster));
            let mut cands = vec![
                pair(t.cluster, t.slot),
                format!("{tp} {fl}"),
                format!("{fl} {tp}"),
                tp.clone(),
            ];
            cands.extend(t.noise.iter().map(|&(c, j)| pair(c, j)));
            let shift = (i + t.turn as usize) % cands.len();
            cands.rotate_left(shift);
            out.push(CandidateSet {
                conv_id: format!("c{i:02}"),
                turn_index: t.turn,
                doc_id: doc_id(t.cluster, t.slot),
                candidates: cands,
                provenance: "fixture".into(),
            });
        }
    }
    out
}

/// Three turns; prompts are rendered for turn 3.
pub fn golden_conversation() -> Conversation {
    let u = |t: u32, s: &str, text: &str| Utterance {
        turn_index: t,
        speaker_id: s.into(),
        text: text.into(),
    };
    Conversation::new(
        "golden",
        vec![
            u(1, "user", "I just got back from Stoke."),
            u(2, "agent", "How was the trip? Any {food} worth mentioning?"),
            u(3, "user", "We ate oatcakes every single morning."),
        ],
    )
}
