//! Text-window baseline: slide a fixed-size token window over the context,
//! predict each window's retrieval quality with NQC, and query with the best.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lexindex::{tokenize, Bm25Params, InvertedIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    /// Tokens per window.
    pub window_size: usize,
    pub stride: usize,
    /// Number of top scores NQC looks at.
    pub nqc_depth: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_size: 5,
            stride: 1,
            nqc_depth: 100,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.stride == 0 || self.nqc_depth < 2 {
            return Err(Error::validation(
                "window_size and stride must be >= 1 and nqc_depth >= 2",
            ));
        }
        Ok(())
    }
}

/// Windows of `window_size` consecutive tokens; a context shorter than one
/// window yields a single window of everything.
pub fn enumerate_windows(context: &str, cfg: &WindowConfig) -> Vec<String> {
    let tokens = tokenize(context);
    if tokens.is_empty() {
        return Vec::new();
    }
    if tokens.len() <= cfg.window_size {
        return vec![tokens.join(" ")];
    }
    (0..=tokens.len() - cfg.window_size)
        .step_by(cfg.stride.max(1))
        .map(|start| tokens[start..start + cfg.window_size].join(" "))
        .collect()
}

/// Population standard deviation of `scores` over `mu`; 0 with fewer than two
/// scores or a zero normalizer.
pub fn nqc_from_scores(scores: &[f64], mu: f64) -> f64 {
    if scores.len() < 2 || mu == 0.0 {
        return 0.0;
    }
    let d = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / d;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / d;
    var.sqrt() / mu
}

/// Sum of IDF over query terms (per occurrence) that occur in the corpus.
pub fn collection_score_proxy(index: &InvertedIndex, terms: &[String]) -> f64 {
    terms
        .iter()
        .map(|t| index.df(t))
        .filter(|&df| df > 0)
        .map(|df| index.idf_for_df(df))
        .sum()
}

pub fn nqc(index: &InvertedIndex, params: &Bm25Params, query: &str, depth: usize) -> f64 {
    let run = index.search(params, "", query, depth);
    let scores: Vec<f64> = run.entries.iter().map(|e| e.score).collect();
    nqc_from_scores(&scores, collection_score_proxy(index, &tokenize(query)))
}

/// The window with the highest NQC, earliest on ties; `""` for an empty context.
pub fn best_window_query(context: &str, index: &InvertedIndex, params: &Bm25Params, cfg: &WindowConfig) -> String {
    let windows = enumerate_windows(context, cfg);
    let scores: Vec<f64> = windows
        .par_iter()
        .map(|w| nqc(index, params, w, cfg.nqc_depth))
        .collect();
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best.map(|i| windows[i].clone()).unwrap_or_default()
}
