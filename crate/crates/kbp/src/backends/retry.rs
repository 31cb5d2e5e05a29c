use std::time::Duration;

use super::*;

/// Retries retriable errors with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(&self, mut op: impl FnMut() -> BackendResult<T>) -> BackendResult<T> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retriable() && attempt < self.max_retries => {
                    let delay = self.base_delay * 2u32.pow(attempt);
                    log::debug!("retriable backend error ({e}); retry {} in {delay:?}", attempt + 1);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Wraps any backend with a [`RetryPolicy`].
#[derive(Debug, Clone)]
pub struct Retry<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B> Retry<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Retry { inner, policy }
    }
}

impl<B: Describe> Describe for Retry<B> {
    fn describe(&self) -> String {
        self.inner.describe()
    }
}

impl<B: MaskFill> MaskFill for Retry<B> {
    fn fill_mask(&self, prompt: &str, top_n: usize) -> BackendResult<Vec<MaskFillResult>> {
        self.policy.run(|| self.inner.fill_mask(prompt, top_n))
    }
}

impl<B: Entailment> Entailment for Retry<B> {
    fn entail(&self, premise: &str, hypothesis: &str) -> BackendResult<EntailmentLogits> {
        self.policy.run(|| self.inner.entail(premise, hypothesis))
    }
}

impl<B: Ner> Ner for Retry<B> {
    fn ner(&self, text: &str) -> BackendResult<Vec<NerSpan>> {
        self.policy.run(|| self.inner.ner(text))
    }
}

impl<B: QuestionAnswering> QuestionAnswering for Retry<B> {
    fn qa(&self, question: &str, context: &str) -> BackendResult<QaAnswer> {
        self.policy.run(|| self.inner.qa(question, context))
    }
}

impl<B: RelationExtractor> RelationExtractor for Retry<B> {
    fn extract_relations(&self, text: &str) -> BackendResult<Vec<ExtractedTriple>> {
        self.policy.run(|| self.inner.extract_relations(text))
    }
}

impl<B: KnowledgeGraph> KnowledgeGraph for Retry<B> {
    fn sparql_instances(&self, class_name: &str) -> BackendResult<Vec<String>> {
        self.policy.run(|| self.inner.sparql_instances(class_name))
    }
}

impl<B: WebSearch> WebSearch for Retry<B> {
    fn web_search(&self, query: &str, k: usize) -> BackendResult<Vec<SearchHit>> {
        self.policy.run(|| self.inner.web_search(query, k))
    }
}
