//! Pseudo ad-hoc query targets for proactive search in conversations.
//!
//! Documents judged relevant at a conversational turn are turned into
//! ad-hoc query candidates ([`qgen`]), one candidate per (turn, document) is
//! kept by scoring it against both the document and the conversation
//! ([`qfilter`]), and the kept queries become training targets
//! ([`traindata`]) or retrieval queries over a BM25 index ([`lexindex`],
//! [`pipeline`]). Runs are scored with P@1, MRR@10 and npDCG ([`evalkit`]);
//! [`textwin`] provides a text-window baseline.

pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod lexindex;
pub mod pipeline;
pub mod qfilter;
pub mod qgen;
pub mod records;
mod rng;
pub mod service;
pub mod textwin;
pub mod traindata;

pub use error::{Error, Result};
