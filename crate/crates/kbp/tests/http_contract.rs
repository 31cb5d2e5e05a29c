//! Wire-level tests of the HTTP clients against a local server.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::{corpus_dir, MockServer, Recorded};
use kbp::backends::http::{ApiKey, SparqlConfig};
use kbp::backends::*;
use kbp::schema::NerLabel;
use serde_json::{json, Value};

fn reply(v: Value) -> (u16, String) {
    (200, v.to_string())
}

fn only_request(server: &MockServer) -> Recorded {
    let reqs = server.requests();
    assert_eq!(reqs.len(), 1, "{reqs:?}");
    reqs.into_iter().next().unwrap()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(1) }
}

fn query_param(url: &str, name: &str) -> Option<String> {
    let parsed = url::Url::parse(&format!("http://localhost{url}")).ok()?;
    parsed.query_pairs().find(|(k, _)| k == name).map(|(_, v)| v.into_owned())
}

#[test]
fn fill_mask_wire_format() {
    let server = MockServer::start(|_| {
        reply(json!({"results": [
            {"token": "piano", "score": 0.1},
            {"token": "guitar", "score": 0.6},
            {"token": "drums", "score": 0.3},
        ]}))
    });
    let client = HttpModelClient::new(&server.url);
    let out = client.fill_mask("John Lennon plays {MASK}.", 2).unwrap();
    let tokens: Vec<_> = out.iter().map(|r| r.token.as_str()).collect();
    assert_eq!(tokens, ["guitar", "drums"]);

    let req = only_request(&server);
    assert_eq!(req.method, "POST");
    assert_eq!(req.url, "/fill-mask");
    assert_eq!(req.json(), json!({"prompt": "John Lennon plays {MASK}.", "top_n": 2}));
    assert!(req.header("content-type").unwrap().starts_with("application/json"));
}

#[test]
fn fill_mask_rejects_bad_prompt_before_sending() {
    let server = MockServer::start(|_| reply(json!({"results": []})));
    let client = HttpModelClient::new(&server.url);
    for prompt in ["no marker", "{MASK} and {MASK}"] {
        assert!(matches!(client.fill_mask(prompt, 5), Err(BackendError::Contract(_))));
    }
    assert!(matches!(client.fill_mask("x {MASK}", 0), Err(BackendError::Contract(_))));
    assert!(server.requests().is_empty());
}

#[test]
fn fill_mask_score_out_of_range() {
    let server = MockServer::start(|_| reply(json!({"results": [{"token": "x", "score": 1.5}]})));
    let err = HttpModelClient::new(&server.url).fill_mask("a {MASK}", 5).unwrap_err();
    assert!(matches!(err, BackendError::Contract(_)), "{err}");
}

#[test]
fn entail_wire_format() {
    let server = MockServer::start(|_| reply(json!({"entail": 2.5, "contradiction": -1.0, "neutral": 0.25})));
    let client = HttpModelClient::new(&format!("{}/", server.url));
    let l = client.entail("John Lennon played guitar.", "John Lennon plays guitar").unwrap();
    assert_eq!(l, EntailmentLogits { entail: 2.5, contradiction: -1.0, neutral: 0.25 });
    let req = only_request(&server);
    assert_eq!(req.url, "/entail");
    assert_eq!(
        req.json(),
        json!({"premise": "John Lennon played guitar.", "hypothesis": "John Lennon plays guitar"})
    );
}

#[test]
fn entail_malformed_body_is_contract_error() {
    let server = MockServer::start(|_| reply(json!({"entail": 1.0})));
    let err = HttpModelClient::new(&server.url).entail("p", "h").unwrap_err();
    assert!(matches!(err, BackendError::Contract(_)), "{err}");
    assert!(matches!(
        HttpModelClient::new(&server.url).entail(" ", "h"),
        Err(BackendError::Contract(_))
    ));
}

#[test]
fn ner_offsets_are_characters() {
    let text = "Frida Kahlo died in Coyoacán, Mexico City.";
    let server = MockServer::start(|_| {
        reply(json!({"spans": [
            {"surface": "Frida Kahlo", "label": "PER", "start": 0, "end": 11},
            {"surface": "Coyoacán", "label": "LOC", "start": 20, "end": 28},
            {"surface": "Mexico City", "label": "LOC", "start": 30, "end": 41},
        ]}))
    });
    let spans = HttpModelClient::new(&server.url).ner(text).unwrap();
    assert_eq!(spans.len(), 3);
    assert_eq!(spans[1].label, NerLabel::Loc);
    assert_eq!(only_request(&server).json(), json!({"text": text}));
}

#[test]
fn ner_rejects_mismatched_span() {
    let server = MockServer::start(|_| {
        reply(json!({"spans": [{"surface": "Kahlo", "label": "PER", "start": 0, "end": 5}]}))
    });
    let err = HttpModelClient::new(&server.url).ner("Frida Kahlo").unwrap_err();
    assert!(matches!(err, BackendError::Contract(_)), "{err}");
}

#[test]
fn ner_rejects_unknown_label() {
    let server = MockServer::start(|_| {
        reply(json!({"spans": [{"surface": "Frida", "label": "MISC", "start": 0, "end": 5}]}))
    });
    assert!(HttpModelClient::new(&server.url).ner("Frida Kahlo").is_err());
}

#[test]
fn qa_wire_format_and_no_answer() {
    let context = "John Lennon plays guitar, keyboard and harmonica.";
    let answers = Arc::new(AtomicUsize::new(0));
    let n = answers.clone();
    let server = MockServer::start(move |_| {
        if n.fetch_add(1, Ordering::SeqCst) == 0 {
            reply(json!({"answer": "guitar, keyboard and harmonica", "score": 0.8, "start": 18, "end": 48}))
        } else {
            reply(json!({"answer": "", "score": 0.9, "start": -1, "end": -1}))
        }
    });
    let client = HttpModelClient::new(&server.url);
    let a = client.qa("What instruments does John Lennon play?", context).unwrap();
    assert_eq!(a.answer, "guitar, keyboard and harmonica");
    assert_eq!((a.start, a.end), (18, 48));
    let none = client.qa("What instruments does John Lennon play?", context).unwrap();
    assert_eq!(none, QaAnswer::no_answer(0.9));
    let req = &server.requests()[0];
    assert_eq!(req.url, "/qa");
    assert_eq!(
        req.json(),
        json!({"question": "What instruments does John Lennon play?", "context": context})
    );
}

#[test]
fn qa_rejects_offsets_that_do_not_match() {
    let server = MockServer::start(|_| reply(json!({"answer": "guitar", "score": 0.8, "start": 0, "end": 6})));
    let err = HttpModelClient::new(&server.url).qa("q?", "He plays guitar").unwrap_err();
    assert!(matches!(err, BackendError::Contract(_)), "{err}");

    let server = MockServer::start(|_| reply(json!({"answer": "", "score": 0.8, "start": 0, "end": 0})));
    assert!(HttpModelClient::new(&server.url).qa("q?", "ctx").is_err());
}

#[test]
fn relext_wire_format() {
    let server = MockServer::start(|_| {
        reply(json!({"triples": [{"subject": "Belgium", "relation": "official language", "object": "Dutch"}]}))
    });
    let t = HttpModelClient::new(&server.url).extract_relations("Belgium speaks Dutch.").unwrap();
    assert_eq!(t[0].relation_label, "official language");
    let req = only_request(&server);
    assert_eq!(req.url, "/relext");
    assert_eq!(req.json(), json!({"text": "Belgium speaks Dutch."}));

    let server = MockServer::start(|_| {
        reply(json!({"triples": [{"subject": "Belgium", "relation": "", "object": "Dutch"}]}))
    });
    assert!(matches!(
        HttpModelClient::new(&server.url).extract_relations("x"),
        Err(BackendError::Contract(_))
    ));
}

#[test]
fn search_sends_query_and_key_and_truncates() {
    let server = MockServer::start(|_| {
        let hits: Vec<_> = (1..=5)
            .map(|i| json!({"title": format!("t{i}"), "url": format!("https://e.org/{i}"), "snippet": format!("s{i}")}))
            .collect();
        reply(json!({"results": hits}))
    });
    let key = ApiKey { header: "X-Api-Key".into(), value: "secret".into() };
    let search = HttpSearch::new(&format!("{}/search", server.url)).with_api_key(key);
    let hits = search.web_search("John Lennon plays instrument", 3).unwrap();
    assert_eq!(hits.iter().map(|h| h.snippet.as_str()).collect::<Vec<_>>(), ["s1", "s2", "s3"]);
    let req = only_request(&server);
    assert_eq!(req.url, "/search");
    assert_eq!(req.json(), json!({"query": "John Lennon plays instrument", "k": 3}));
    assert_eq!(req.header("X-Api-Key"), Some("secret"));
}

#[test]
fn model_client_sends_api_key() {
    let server = MockServer::start(|_| reply(json!({"triples": []})));
    let key = ApiKey { header: "Authorization".into(), value: "Bearer t0k".into() };
    HttpModelClient::new(&server.url).with_api_key(key).extract_relations("x").unwrap();
    assert_eq!(only_request(&server).header("authorization"), Some("Bearer t0k"));
}

#[test]
fn retries_server_errors_then_succeeds() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = MockServer::start(move |_| match c.fetch_add(1, Ordering::SeqCst) {
        0 => (503, "busy".into()),
        1 => (429, "slow down".into()),
        _ => reply(json!({"entail": 1.0, "contradiction": 0.0, "neutral": 0.0})),
    });
    let client = Retry::new(HttpModelClient::new(&server.url), fast_retry());
    assert!(client.entail("p", "h").is_ok());
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn does_not_retry_client_errors() {
    let server = MockServer::start(|_| (404, "no such route".into()));
    let client = Retry::new(HttpModelClient::new(&server.url), fast_retry());
    let err = client.entail("p", "h").unwrap_err();
    assert_eq!(err, BackendError::Status { status: 404, body: "no such route".into() });
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn gives_up_after_max_retries() {
    let server = MockServer::start(|_| (500, "down".into()));
    let client = Retry::new(HttpModelClient::new(&server.url), fast_retry());
    assert!(matches!(client.entail("p", "h"), Err(BackendError::Status { status: 500, .. })));
    assert_eq!(server.requests().len(), 4);
}

#[test]
fn transport_failure_is_retriable() {
    let err = HttpModelClient::new("http://127.0.0.1:9").entail("p", "h").unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err}");
    assert!(err.is_retriable());
}

fn sparql_config(url: &str) -> SparqlConfig {
    SparqlConfig {
        url: format!("{url}/sparql"),
        class_iris: [("MusicalInstrument".to_string(), "http://www.wikidata.org/entity/Q34379".to_string())]
            .into_iter()
            .collect(),
        typing_predicate: "http://www.wikidata.org/prop/direct/P31".into(),
        label_predicate: None,
    }
}

#[test]
fn sparql_wire_format() {
    let server = MockServer::start(|_| {
        reply(json!({"head": {"vars": ["y"]}, "results": {"bindings": [
            {"y": {"type": "uri", "value": "http://example.org/bass_guitar"}},
            {"y": {"type": "literal", "value": "piano"}},
            {"y": {"type": "literal", "value": "piano"}},
        ]}}))
    });
    let kg = SparqlEndpoint::new(sparql_config(&server.url));
    assert_eq!(kg.sparql_instances("MusicalInstrument").unwrap(), ["bass guitar", "piano"]);
    let req = only_request(&server);
    assert_eq!(req.method, "GET");
    assert!(req.url.starts_with("/sparql?"));
    assert_eq!(req.header("accept"), Some("application/sparql-results+json"));
    assert_eq!(
        query_param(&req.url, "query").unwrap(),
        "SELECT ?y WHERE { ?y <http://www.wikidata.org/prop/direct/P31> <http://www.wikidata.org/entity/Q34379> }"
    );
}

#[test]
fn sparql_unknown_class_sends_nothing() {
    let server = MockServer::start(|_| reply(json!({})));
    let kg = SparqlEndpoint::new(sparql_config(&server.url));
    assert!(kg.sparql_instances("Spaceship").unwrap().is_empty());
    assert!(server.requests().is_empty());
}

/// Serves the corpus fixture tables over the HTTP protocol.
fn fixture_server() -> MockServer {
    let f = FixtureBackends::load_dir(corpus_dir().join("fixtures")).unwrap();
    let wire = |r: BackendResult<Value>| match r {
        Ok(v) => (200, v.to_string()),
        Err(e) => (422, e.to_string()),
    };
    MockServer::start(move |req| {
        let path = req.url.split('?').next().unwrap_or_default().to_string();
        if req.method == "GET" {
            let q = query_param(&req.url, "query").unwrap_or_default();
            let class = q.rsplit("<http://kb.test/class/").next().unwrap().trim_end_matches(" }").trim_end_matches('>');
            let labels = f.kg.sparql_instances(class).unwrap();
            let bindings: Vec<_> = labels.iter().map(|l| json!({"y": {"type": "literal", "value": l}})).collect();
            return reply(json!({"results": {"bindings": bindings}}));
        }
        let b = req.json();
        let s = |k: &str| b[k].as_str().unwrap_or_default().to_string();
        match path.as_str() {
            "/search" => wire(
                f.search.web_search(&s("query"), b["k"].as_u64().unwrap() as usize).map(|h| json!({"results": h})),
            ),
            "/fill-mask" => wire(
                f.mask_fill
                    .fill_mask(&s("prompt"), b["top_n"].as_u64().unwrap() as usize)
                    .map(|r| json!({"results": r})),
            ),
            "/entail" => wire(f.entailment.entail(&s("premise"), &s("hypothesis")).map(|l| json!(l))),
            "/ner" => wire(f.ner.ner(&s("text")).map(|spans| json!({"spans": spans}))),
            "/qa" => wire(f.qa.qa(&s("question"), &s("context")).map(|a| json!(a))),
            "/relext" => wire(f.relext.extract_relations(&s("text")).map(|t| json!({"triples": t}))),
            other => (404, format!("no route {other}")),
        }
    })
}

#[test]
fn http_mode_reproduces_fixture_golden() {
    let server = fixture_server();
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus_dir();
    let mut classes = String::new();
    for c in ["MusicalInstrument", "Language", "CauseOfDeath", "Country", "ChemicalElement", "Profession"] {
        classes.push_str(&format!("{c} = \"http://kb.test/class/{c}\"\n"));
    }
    let config = format!(
        r#"
relations = "{corpus}/relations.json"
dataset = "{corpus}/test.jsonl"
premise_cache = "premises.jsonl"
output_dir = "out"

[backends]
mode = "http"
model_url = "{url}"
search_url = "{url}/search"
retries = 0

[backends.sparql]
url = "{url}/sparql"
typing_predicate = "rdf:type"

[backends.sparql.class_iris]
{classes}"#,
        corpus = corpus.display(),
        url = server.url,
    );
    let path = dir.path().join("kbp.toml");
    std::fs::write(&path, config).unwrap();

    let code = kbp::cli::main_with_args(["kbp", "--config", path.to_str().unwrap(), "predict", "--system", "satori"]);
    assert_eq!(code, 0);
    let got = std::fs::read_to_string(dir.path().join("out/predictions.satori.jsonl")).unwrap();
    let want = std::fs::read_to_string(corpus.join("golden/predictions.satori.jsonl")).unwrap();
    assert_eq!(got, want);

    let paths: std::collections::BTreeSet<_> = server
        .requests()
        .iter()
        .map(|r| r.url.split('?').next().unwrap().to_string())
        .collect();
    for p in ["/search", "/fill-mask", "/entail", "/ner", "/sparql"] {
        assert!(paths.contains(p), "{p} not called: {paths:?}");
    }
}
