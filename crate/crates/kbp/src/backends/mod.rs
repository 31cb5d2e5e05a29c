//! Contracts for the external capabilities the pipeline depends on.
//!
//! Each capability is a trait with two implementations: an HTTP client
//! ([`http`]) and a deterministic table-driven fixture ([`fixture`]). Both
//! run their outputs through the same `check_*` functions in this module, so
//! they satisfy identical postconditions. [`retry::Retry`] wraps either kind
//! with the transport retry policy.

pub mod fixture;
pub mod http;
pub mod retry;

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::NerLabel;
use crate::template::MASK_MARKER;
use crate::text::{char_len, char_slice};

pub use fixture::FixtureBackends;
pub use http::{HttpModelClient, HttpSearch, SparqlEndpoint};
pub use retry::{Retry, RetryPolicy};

/// Number of fill-mask results requested when a caller does not say.
pub const DEFAULT_TOP_N: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Connection-level failure; worth retrying.
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    /// The request or response violates the capability contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Fixture has no entry for this input.
    #[error("no fixture entry for {0}")]
    UnknownKey(String),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

fn contract(msg: impl Into<String>) -> BackendError {
    BackendError::Contract(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFillResult {
    pub token: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentLogits {
    pub entail: f64,
    pub contradiction: f64,
    pub neutral: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerSpan {
    pub surface: String,
    pub label: NerLabel,
    /// Character offsets into the input text, end exclusive.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaAnswer {
    pub answer: String,
    pub score: f64,
    /// Character offsets into the context; both −1 for no answer.
    pub start: i64,
    pub end: i64,
}

impl QaAnswer {
    pub fn no_answer(score: f64) -> Self {
        QaAnswer {
            answer: String::new(),
            score,
            start: -1,
            end: -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedTriple {
    pub subject: String,
    #[serde(rename = "relation")]
    pub relation_label: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub url: String,
    pub snippet: String,
}

/// A backend's identity for run manifests.
pub trait Describe {
    fn describe(&self) -> String;
}

pub trait MaskFill: Describe + Send + Sync {
    fn fill_mask(&self, prompt: &str, top_n: usize) -> BackendResult<Vec<MaskFillResult>>;
}

pub trait Entailment: Describe + Send + Sync {
    fn entail(&self, premise: &str, hypothesis: &str) -> BackendResult<EntailmentLogits>;
}

pub trait Ner: Describe + Send + Sync {
    fn ner(&self, text: &str) -> BackendResult<Vec<NerSpan>>;
}

pub trait QuestionAnswering: Describe + Send + Sync {
    fn qa(&self, question: &str, context: &str) -> BackendResult<QaAnswer>;
}

pub trait RelationExtractor: Describe + Send + Sync {
    fn extract_relations(&self, text: &str) -> BackendResult<Vec<ExtractedTriple>>;
}

pub trait KnowledgeGraph: Describe + Send + Sync {
    /// Labels of the instances of `class_name`; unknown classes yield `[]`.
    fn sparql_instances(&self, class_name: &str) -> BackendResult<Vec<String>>;
}

pub trait WebSearch: Describe + Send + Sync {
    fn web_search(&self, query: &str, k: usize) -> BackendResult<Vec<SearchHit>>;
}

/// One implementation of every capability, shared across pipeline workers.
#[derive(Clone)]
pub struct Backends {
    pub search: Arc<dyn WebSearch>,
    pub mask_fill: Arc<dyn MaskFill>,
    pub entailment: Arc<dyn Entailment>,
    pub ner: Arc<dyn Ner>,
    pub qa: Arc<dyn QuestionAnswering>,
    pub relext: Arc<dyn RelationExtractor>,
    pub kg: Arc<dyn KnowledgeGraph>,
}

impl Backends {
    pub fn describe(&self) -> std::collections::BTreeMap<&'static str, String> {
        [
            ("search", self.search.describe()),
            ("fill_mask", self.mask_fill.describe()),
            ("entail", self.entailment.describe()),
            ("ner", self.ner.describe()),
            ("qa", self.qa.describe()),
            ("relext", self.relext.describe()),
            ("kg", self.kg.describe()),
        ]
        .into_iter()
        .collect()
    }
}

// Contract checks shared by every implementation.

pub fn check_prompt(prompt: &str, top_n: usize) -> BackendResult<()> {
    let n = prompt.matches(MASK_MARKER).count();
    if n != 1 {
        return Err(contract(format!(
            "prompt must contain exactly one {MASK_MARKER}, found {n}: {prompt:?}"
        )));
    }
    if top_n == 0 {
        return Err(contract("top_n must be positive"));
    }
    Ok(())
}

/// Validates scores, then orders by descending score (stable) and truncates.
pub fn normalize_fill_mask(
    mut results: Vec<MaskFillResult>,
    top_n: usize,
) -> BackendResult<Vec<MaskFillResult>> {
    if let Some(r) = results
        .iter()
        .find(|r| !(0.0..=1.0).contains(&r.score))
    {
        return Err(contract(format!("score {} for {:?} outside [0, 1]", r.score, r.token)));
    }
    results.sort_by(|a, b| b.score.total_cmp(&a.score));
    results.truncate(top_n);
    Ok(results)
}

pub fn check_entail_input(premise: &str, hypothesis: &str) -> BackendResult<()> {
    if premise.trim().is_empty() || hypothesis.trim().is_empty() {
        return Err(contract("premise and hypothesis must be non-empty"));
    }
    Ok(())
}

pub fn check_logits(l: &EntailmentLogits) -> BackendResult<()> {
    if !(l.entail.is_finite() && l.contradiction.is_finite() && l.neutral.is_finite()) {
        return Err(contract(format!("non-finite logits {l:?}")));
    }
    Ok(())
}

pub fn check_non_empty_text(text: &str) -> BackendResult<()> {
    if text.trim().is_empty() {
        return Err(contract("text must be non-empty"));
    }
    Ok(())
}

pub fn check_spans(text: &str, spans: &[NerSpan]) -> BackendResult<()> {
    let len = char_len(text);
    for s in spans {
        if !(s.start < s.end && s.end <= len) {
            return Err(contract(format!("span offsets {}..{} invalid for length {len}", s.start, s.end)));
        }
        if char_slice(text, s.start, s.end) != Some(s.surface.as_str()) {
            return Err(contract(format!(
                "span surface {:?} does not match text at {}..{}",
                s.surface, s.start, s.end
            )));
        }
    }
    Ok(())
}

pub fn check_qa_input(question: &str, context: &str) -> BackendResult<()> {
    if question.trim().is_empty() || context.trim().is_empty() {
        return Err(contract("question and context must be non-empty"));
    }
    Ok(())
}

pub fn check_qa_answer(context: &str, a: &QaAnswer) -> BackendResult<()> {
    if !(0.0..=1.0).contains(&a.score) {
        return Err(contract(format!("QA score {} outside [0, 1]", a.score)));
    }
    if a.answer.is_empty() {
        if (a.start, a.end) != (-1, -1) {
            return Err(contract("empty answer must have offsets (-1, -1)"));
        }
        return Ok(());
    }
    let slice = if a.start >= 0 && a.end >= a.start {
        char_slice(context, a.start as usize, a.end as usize)
    } else {
        None
    };
    if slice != Some(a.answer.as_str()) {
        return Err(contract(format!(
            "answer {:?} does not match context at {}..{}",
            a.answer, a.start, a.end
        )));
    }
    Ok(())
}

pub fn check_triples(triples: &[ExtractedTriple]) -> BackendResult<()> {
    if let Some(t) = triples.iter().find(|t| {
        t.subject.trim().is_empty() || t.relation_label.trim().is_empty() || t.object.trim().is_empty()
    }) {
        return Err(contract(format!("extracted triple has an empty field: {t:?}")));
    }
    Ok(())
}

/// Removes exact duplicates, keeping first occurrences.
pub fn dedup_labels(labels: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    labels
        .into_iter()
        .filter(|l| !l.trim().is_empty() && seen.insert(l.clone()))
        .collect()
}

pub fn check_search(k: usize) -> BackendResult<()> {
    if k == 0 {
        return Err(contract("k must be positive"));
    }
    Ok(())
}
