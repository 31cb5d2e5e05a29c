//! HTTP clients for the model server, a search service and a SPARQL endpoint.
//!
//! Model server protocol (all POST, JSON bodies):
//!
//! ```text
//! /fill-mask {"prompt", "top_n"}         -> {"results": [{"token", "score"}]}
//! /entail    {"premise", "hypothesis"}   -> {"entail", "contradiction", "neutral"}
//! /ner       {"text"}                    -> {"spans": [{"surface", "label", "start", "end"}]}
//! /qa        {"question", "context"}     -> {"answer", "score", "start", "end"}
//! /relext    {"text"}                    -> {"triples": [{"subject", "relation", "object"}]}
//! ```
//!
//! The search service takes `{"query", "k"}` and answers
//! `{"results": [{"title", "url", "snippet"}]}`.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::*;

const TIMEOUT: Duration = Duration::from_secs(60);

/// Extra header carrying an API key, e.g. `("Authorization", "Bearer ...")`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiKey {
    pub header: String,
    pub value: String,
}

fn agent() -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(TIMEOUT).build()
}

fn classify(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Status(status, resp) => BackendError::Status {
            status,
            body: resp.into_string().unwrap_or_default(),
        },
        ureq::Error::Transport(t) => BackendError::Transport(t.to_string()),
    }
}

fn read_json<T: DeserializeOwned>(resp: ureq::Response) -> BackendResult<T> {
    resp.into_json()
        .map_err(|e| BackendError::Contract(format!("malformed response body: {e}")))
}

fn post_json<T: DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    api_key: Option<&ApiKey>,
    body: serde_json::Value,
) -> BackendResult<T> {
    let mut req = agent.post(url);
    if let Some(k) = api_key {
        req = req.set(&k.header, &k.value);
    }
    let resp = req.send_json(body).map_err(classify)?;
    read_json(resp)
}

fn join(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

/// Client for a model server implementing all five model endpoints.
#[derive(Clone)]
pub struct HttpModelClient {
    base_url: String,
    agent: ureq::Agent,
    api_key: Option<ApiKey>,
}

impl HttpModelClient {
    pub fn new(base_url: &str) -> Self {
        HttpModelClient {
            base_url: base_url.to_string(),
            agent: agent(),
            api_key: None,
        }
    }

    pub fn with_api_key(mut self, key: ApiKey) -> Self {
        self.api_key = Some(key);
        self
    }

    fn call<T: DeserializeOwned>(&self, path: &str, body: serde_json::Value) -> BackendResult<T> {
        post_json(&self.agent, &join(&self.base_url, path), self.api_key.as_ref(), body)
    }
}

impl Describe for HttpModelClient {
    fn describe(&self) -> String {
        format!("http:{}", self.base_url)
    }
}

#[derive(Deserialize)]
struct FillMaskResponse {
    results: Vec<MaskFillResult>,
}

#[derive(Deserialize)]
struct NerResponse {
    spans: Vec<NerSpan>,
}

#[derive(Deserialize)]
struct RelextResponse {
    triples: Vec<ExtractedTriple>,
}

impl MaskFill for HttpModelClient {
    fn fill_mask(&self, prompt: &str, top_n: usize) -> BackendResult<Vec<MaskFillResult>> {
        check_prompt(prompt, top_n)?;
        let r: FillMaskResponse = self.call("/fill-mask", json!({"prompt": prompt, "top_n": top_n}))?;
        normalize_fill_mask(r.results, top_n)
    }
}

impl Entailment for HttpModelClient {
    fn entail(&self, premise: &str, hypothesis: &str) -> BackendResult<EntailmentLogits> {
        check_entail_input(premise, hypothesis)?;
        let l: EntailmentLogits =
            self.call("/entail", json!({"premise": premise, "hypothesis": hypothesis}))?;
        check_logits(&l)?;
        Ok(l)
    }
}

impl Ner for HttpModelClient {
    fn ner(&self, text: &str) -> BackendResult<Vec<NerSpan>> {
        check_non_empty_text(text)?;
        let r: NerResponse = self.call("/ner", json!({"text": text}))?;
        check_spans(text, &r.spans)?;
        Ok(r.spans)
    }
}

impl QuestionAnswering for HttpModelClient {
    fn qa(&self, question: &str, context: &str) -> BackendResult<QaAnswer> {
        check_qa_input(question, context)?;
        let a: QaAnswer = self.call("/qa", json!({"question": question, "context": context}))?;
        check_qa_answer(context, &a)?;
        Ok(a)
    }
}

impl RelationExtractor for HttpModelClient {
    fn extract_relations(&self, text: &str) -> BackendResult<Vec<ExtractedTriple>> {
        check_non_empty_text(text)?;
        let r: RelextResponse = self.call("/relext", json!({"text": text}))?;
        check_triples(&r.triples)?;
        Ok(r.triples)
    }
}

/// JSON search service client.
#[derive(Clone)]
pub struct HttpSearch {
    url: String,
    agent: ureq::Agent,
    api_key: Option<ApiKey>,
}

#[derive(Deserialize)]
struct SearchResponse {
    results: Vec<SearchHit>,
}

impl HttpSearch {
    pub fn new(url: &str) -> Self {
        HttpSearch {
            url: url.to_string(),
            agent: agent(),
            api_key: None,
        }
    }

    pub fn with_api_key(mut self, key: ApiKey) -> Self {
        self.api_key = Some(key);
        self
    }
}

impl Describe for HttpSearch {
    fn describe(&self) -> String {
        format!("http:{}", self.url)
    }
}

impl WebSearch for HttpSearch {
    fn web_search(&self, query: &str, k: usize) -> BackendResult<Vec<SearchHit>> {
        check_search(k)?;
        let mut r: SearchResponse =
            post_json(&self.agent, &self.url, self.api_key.as_ref(), json!({"query": query, "k": k}))?;
        r.results.truncate(k);
        Ok(r.results)
    }
}

pub const RDF_TYPE: &str = "rdf:type";
const RDF_PREFIX: &str = "PREFIX rdf: <http://www.w3.org/1999/02/22-rdf-syntax-ns#>";

/// SPARQL endpoint queried with `SELECT ?y WHERE { ?y rdf:type <class> }`.
///
/// Class names are resolved to IRIs through `class_iris`; a name that is
/// already an absolute IRI is used directly, anything else counts as an
/// unknown class. The typing predicate defaults to `rdf:type` and can be
/// swapped for graphs that use their own property. When `label_predicate`
/// is set, the query hops from each instance to its label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparqlConfig {
    pub url: String,
    #[serde(default)]
    pub class_iris: BTreeMap<String, String>,
    #[serde(default = "default_typing")]
    pub typing_predicate: String,
    #[serde(default)]
    pub label_predicate: Option<String>,
}

fn default_typing() -> String {
    RDF_TYPE.to_string()
}

#[derive(Clone)]
pub struct SparqlEndpoint {
    config: SparqlConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct SparqlResults {
    results: SparqlBindings,
}

#[derive(Deserialize)]
struct SparqlBindings {
    bindings: Vec<BTreeMap<String, SparqlTerm>>,
}

#[derive(Deserialize)]
struct SparqlTerm {
    #[serde(rename = "type")]
    kind: String,
    value: String,
}

fn term(t: &str) -> String {
    if t.starts_with("http://") || t.starts_with("https://") {
        format!("<{t}>")
    } else {
        t.to_string()
    }
}

/// Human-readable label for an IRI: its last path or fragment segment.
fn iri_label(iri: &str) -> String {
    iri.rsplit(['/', '#']).next().unwrap_or(iri).replace('_', " ")
}

impl SparqlEndpoint {
    pub fn new(config: SparqlConfig) -> Self {
        SparqlEndpoint { config, agent: agent() }
    }

    fn class_iri(&self, class_name: &str) -> Option<String> {
        if let Some(iri) = self.config.class_iris.get(class_name) {
            return Some(iri.clone());
        }
        if class_name.starts_with("http://") || class_name.starts_with("https://") {
            return Some(class_name.to_string());
        }
        None
    }

    /// The query sent for a class, or `None` for an unknown class.
    pub fn instance_query(&self, class_name: &str) -> Option<String> {
        let class = term(&self.class_iri(class_name)?);
        let typing = term(&self.config.typing_predicate);
        let prefix = if typing.starts_with("rdf:") { RDF_PREFIX } else { "" };
        let body = match &self.config.label_predicate {
            None => format!("SELECT ?y WHERE {{ ?y {typing} {class} }}"),
            Some(label) => format!(
                "SELECT ?y WHERE {{ ?e {typing} {class} . ?e {} ?y }}",
                term(label)
            ),
        };
        Some(if prefix.is_empty() { body } else { format!("{prefix}\n{body}") })
    }
}

impl Describe for SparqlEndpoint {
    fn describe(&self) -> String {
        format!("sparql:{}", self.config.url)
    }
}

impl KnowledgeGraph for SparqlEndpoint {
    fn sparql_instances(&self, class_name: &str) -> BackendResult<Vec<String>> {
        let Some(query) = self.instance_query(class_name) else {
            log::warn!("no IRI configured for class {class_name:?}; treating as unknown");
            return Ok(Vec::new());
        };
        let resp = self
            .agent
            .get(&self.config.url)
            .query("query", &query)
            .set("Accept", "application/sparql-results+json")
            .call()
            .map_err(classify)?;
        let r: SparqlResults = read_json(resp)?;
        let labels = r
            .results
            .bindings
            .into_iter()
            .filter_map(|mut b| b.remove("y"))
            .map(|t| if t.kind == "uri" { iri_label(&t.value) } else { t.value })
            .collect();
        Ok(dedup_labels(labels))
    }
}
