//! P@1, MRR@k and npDCG@k over run files and qrels.
//!
//! npDCG scores a whole conversation. Turns are walked in order; a relevant
//! document earns its grade (discounted by `log2(rank + 1)`) only the first
//! time the system surfaces it at a turn it is relevant to, after which it is
//! credited and earns nothing more in that conversation. The normalizer is
//! the best total any system could reach under the same crediting rule.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::corpus::parse_qid;
use crate::error::{Error, Result};
use crate::lexindex::RankedList;
use crate::pipeline::RunSet;
use crate::records;

/// qid -> doc_id -> grade (>= 1).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    pub judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    /// Parses `qid 0 doc_id grade` lines. Grade-0 lines are dropped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut q = Qrels::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_owned(),
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(err(format!("expected 4 columns, found {}", cols.len())));
            }
            let grade: u32 = cols[3].parse().map_err(|_| err(format!("bad grade {:?}", cols[3])))?;
            if grade == 0 {
                continue;
            }
            if q.judgments
                .entry(cols[0].to_owned())
                .or_default()
                .insert(cols[2].to_owned(), grade)
                .is_some()
            {
                return Err(err(format!("document {} judged twice for {}", cols[2], cols[0])));
            }
        }
        Ok(q)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&records::read_text(path)?, &path.display().to_string())
    }

    pub fn get(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }
}

fn relevant(rels: &BTreeMap<String, u32>, doc: &str) -> bool {
    rels.get(doc).is_some_and(|&g| g >= 1)
}

/// 1 if the top document is relevant, else 0 (including an empty list).
pub fn precision_at_1(run: &RankedList, rels: &BTreeMap<String, u32>) -> f64 {
    match run.entries.first() {
        Some(e) if relevant(rels, &e.doc_id) => 1.0,
        _ => 0.0,
    }
}

/// `1 / r` for the first relevant rank `r <= k`, else 0.
pub fn reciprocal_rank_at(run: &RankedList, rels: &BTreeMap<String, u32>, k: usize) -> f64 {
    run.entries
        .iter()
        .take(k)
        .position(|e| relevant(rels, &e.doc_id))
        .map_or(0.0, |i| 1.0 / (i as f64 + 1.0))
}

pub fn mrr_at_10(run: &RankedList, rels: &BTreeMap<String, u32>) -> f64 {
    reciprocal_rank_at(run, rels, 10)
}

pub fn discount(rank: usize) -> f64 {
    1.0 / (rank as f64 + 1.0).log2()
}

/// Per-conversation npDCG totals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NpdcgTotals {
    pub dcg: f64,
    pub ideal: f64,
}

impl NpdcgTotals {
    /// `None` when no system could gain anything (ideal total 0).
    pub fn value(&self) -> Option<f64> {
        (self.ideal > 0.0).then(|| self.dcg / self.ideal)
    }
}

/// System DCG summed over the judged turns of one conversation.
///
/// `turn_runs` are `(turn, ranked doc ids)` in strictly ascending turn order;
/// turns without judgments earn nothing, judged turns without a run count as
/// empty lists.
pub fn system_dcg(turn_runs: &[(u32, Vec<&str>)], conv_qrels: &BTreeMap<u32, BTreeMap<String, u32>>, k: usize) -> Result<f64> {
    check_order(turn_runs)?;
    let mut credited: HashSet<&str> = HashSet::new();
    let mut total = 0.0;
    for (turn, docs) in turn_runs {
        let Some(rels) = conv_qrels.get(turn) else { continue };
        for (r, doc) in docs.iter().take(k).enumerate() {
            let grade = rels.get(*doc).copied().unwrap_or(0);
            if grade >= 1 && credited.insert(doc) {
                total += f64::from(grade) * discount(r + 1);
            }
        }
    }
    Ok(total)
}

/// Best achievable total DCG under the crediting rule: a maximum-weight
/// assignment of documents to `(turn, rank)` slots where each document is
/// used at most once and earns `grade_at_turn * discount(rank)`.
pub fn ideal_dcg(conv_qrels: &BTreeMap<u32, BTreeMap<String, u32>>, k: usize) -> f64 {
    let docs: Vec<&str> = conv_qrels
        .values()
        .flat_map(|r| r.iter().filter(|(_, &g)| g >= 1).map(|(d, _)| d.as_str()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if docs.is_empty() {
        return 0.0;
    }
    let mut slots: Vec<(&BTreeMap<String, u32>, usize)> = Vec::new();
    for rels in conv_qrels.values() {
        let useful = rels.values().filter(|&&g| g >= 1).count().min(k);
        slots.extend((1..=useful).map(|r| (rels, r)));
    }
    let weight = |d: &str, (rels, r): (&BTreeMap<String, u32>, usize)| {
        f64::from(rels.get(d).copied().unwrap_or(0)) * discount(r)
    };
    let cols = slots.len().max(docs.len());
    let cost: Vec<Vec<f64>> = docs
        .iter()
        .map(|d| {
            (0..cols)
                .map(|c| slots.get(c).map_or(0.0, |&s| -weight(d, s)))
                .collect()
        })
        .collect();
    let assignment = min_cost_assignment(&cost);
    assignment
        .iter()
        .enumerate()
        .filter_map(|(row, &col)| slots.get(col).map(|&s| weight(docs[row], s)))
        .sum()
}

/// Hungarian algorithm (shortest augmenting paths with potentials) for an
/// `n x m` cost matrix, `n <= m`. Returns the column assigned to each row.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    assert!(n <= m, "assignment needs at least as many columns as rows");
    // 1-based internally; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for c in 1..=m {
                if used[c] {
                    continue;
                }
                let cur = cost[r - 1][c - 1] - u[r] - v[c];
                if cur < minv[c] {
                    minv[c] = cur;
                    way[c] = col0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    next = c;
                }
            }
            for c in 0..=m {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = next;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for c in 1..=m {
        if owner[c] != 0 {
            out[owner[c] - 1] = c - 1;
        }
    }
    out
}

fn check_order(turn_runs: &[(u32, Vec<&str>)]) -> Result<()> {
    if let Some(w) = turn_runs.windows(2).find(|w| w[0].0 >= w[1].0) {
        return Err(Error::validation(format!(
            "npDCG turns out of order ({} before {})",
            w[0].0, w[1].0
        )));
    }
    Ok(())
}

pub fn npdcg_at_k(
    turn_runs: &[(u32, Vec<&str>)],
    conv_qrels: &BTreeMap<u32, BTreeMap<String, u32>>,
    k: usize,
) -> Result<NpdcgTotals> {
    if k == 0 {
        return Err(Error::validation("npDCG cutoff must be >= 1"));
    }
    Ok(NpdcgTotals {
        dcg: system_dcg(turn_runs, conv_qrels, k)?,
        ideal: ideal_dcg(conv_qrels, k),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    P1,
    Mrr(usize),
    Npdcg(usize),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::P1 => f.write_str("p1"),
            Metric::Mrr(k) => write!(f, "mrr{k}"),
            Metric::Npdcg(k) => write!(f, "npdcg{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation(format!("unknown metric {s:?} (expected p1, mrr<k>, npdcg<k>)"));
        let cutoff = |rest: &str| -> Result<usize> {
            rest.parse().ok().filter(|&k: &usize| k >= 1).ok_or_else(bad)
        };
        if s == "p1" {
            Ok(Metric::P1)
        } else if let Some(rest) = s.strip_prefix("npdcg") {
            Ok(Metric::Npdcg(cutoff(rest)?))
        } else if let Some(rest) = s.strip_prefix("mrr") {
            Ok(Metric::Mrr(cutoff(rest)?))
        } else {
            Err(bad())
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub metric: String,
    /// Mean of `breakdown`.
    pub value: f64,
    pub count: usize,
    /// Per qid, or per conversation for npDCG.
    pub breakdown: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metrics: Vec<MetricSummary>,
    /// Run qids with no judgments; ignored.
    pub unjudged_run_qids: Vec<String>,
    /// Judged qids absent from the run; scored as empty lists.
    pub missing_run_qids: Vec<String>,
    /// Conversations skipped by npDCG because nothing could be gained.
    pub excluded_conversations: Vec<String>,
}

fn mean(values: &BTreeMap<String, f64>) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.values().sum::<f64>() / values.len() as f64
    }
}

pub fn evaluate(run: &RunSet, qrels: &Qrels, metrics: &[Metric]) -> Result<MetricReport> {
    if qrels.is_empty() {
        return Err(Error::validation("qrels are empty"));
    }
    let empty = RankedList::empty("", 0);
    let list_for = |q: &str| run.lists.get(q).unwrap_or(&empty);
    let unjudged_run_qids = run.lists.keys().filter(|q| qrels.get(q).is_none()).cloned().collect();
    let missing_run_qids = qrels.judgments.keys().filter(|q| !run.lists.contains_key(*q)).cloned().collect();

    // conv_id -> turn -> rels, for npDCG
    let mut by_conv: BTreeMap<&str, BTreeMap<u32, BTreeMap<String, u32>>> = BTreeMap::new();
    if metrics.iter().any(|m| matches!(m, Metric::Npdcg(_))) {
        for (q, rels) in &qrels.judgments {
            let (conv, turn) = parse_qid(q)
                .ok_or_else(|| Error::validation(format!("qid {q:?} is not <conv_id>.<turn_index>")))?;
            by_conv.entry(conv).or_default().insert(turn, rels.clone());
        }
    }

    let mut excluded = BTreeSet::new();
    let mut summaries = Vec::with_capacity(metrics.len());
    for &metric in metrics {
        let mut breakdown = BTreeMap::new();
        match metric {
            Metric::P1 | Metric::Mrr(_) => {
                for (q, rels) in &qrels.judgments {
                    let list = list_for(q);
                    let v = match metric {
                        Metric::P1 => precision_at_1(list, rels),
                        Metric::Mrr(k) => reciprocal_rank_at(list, rels, k),
                        Metric::Npdcg(_) => unreachable!(),
                    };
                    breakdown.insert(q.clone(), v);
                }
            }
            Metric::Npdcg(k) => {
                for (conv, turns) in &by_conv {
                    let turn_runs: Vec<(u32, Vec<&str>)> = turns
                        .keys()
                        .map(|&t| (t, list_for(&crate::corpus::qid(conv, t)).doc_ids().collect()))
                        .collect();
                    match npdcg_at_k(&turn_runs, turns, k)?.value() {
                        Some(v) => {
                            breakdown.insert((*conv).to_owned(), v);
                        }
                        None => {
                            excluded.insert((*conv).to_owned());
                        }
                    }
                }
            }
        }
        summaries.push(MetricSummary {
            metric: metric.to_string(),
            value: mean(&breakdown),
            count: breakdown.len(),
            breakdown,
        });
    }
    Ok(MetricReport {
        metrics: summaries,
        unjudged_run_qids,
        missing_run_qids,
        excluded_conversations: excluded.into_iter().collect(),
    })
}

impl MetricReport {
    pub fn value(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == metric).map(|m| m.value)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>10} {:>8}", "metric", "value", "count");
        for m in &self.metrics {
            let _ = writeln!(out, "{:<12} {:>10.6} {:>8}", m.metric, m.value, m.count);
        }
        if !self.unjudged_run_qids.is_empty() {
            let _ = writeln!(out, "unjudged run qids (ignored): {}", self.unjudged_run_qids.len());
        }
        if !self.missing_run_qids.is_empty() {
            let _ = writeln!(out, "judged qids missing from run (scored 0): {}", self.missing_run_qids.len());
        }
        if !self.excluded_conversations.is_empty() {
            let _ = writeln!(
                out,
                "conversations excluded from npDCG: {}",
                self.excluded_conversations.len()
            );
        }
        out
    }

    /// Line-delimited records: one summary per metric, one line per unit,
    /// then the bookkeeping lists.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.metrics {
            let summary = serde_json::json!({"metric": m.metric, "value": m.value, "count": m.count});
            let _ = writeln!(out, "{summary}");
        }
        for m in &self.metrics {
            for (unit, v) in &m.breakdown {
                let _ = writeln!(out, "{}", serde_json::json!({"metric": m.metric, "unit": unit, "value": v}));
            }
        }
        let _ = writeln!(
            out,
            "{}",
            serde_json::json!({
                "unjudged_run_qids": self.unjudged_run_qids,
                "missing_run_qids": self.missing_run_qids,
                "excluded_conversations": self.excluded_conversations,
            })
        );
        out
    }
}
