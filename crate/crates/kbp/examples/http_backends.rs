//! Talk to a model server over HTTP. A throwaway server on a local port
//! answers `/fill-mask` and `/entail` from the corpus tables, and the
//! pipeline reaches it through `HttpModelClient` with retries.
//!
//! ```text
//! cargo run --example http_backends
//! ```

use std::error::Error;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;

use kbp::backends::{
    Entailment, FixtureBackends, HttpModelClient, MaskFill, Retry, RetryPolicy,
};
use kbp::cli::{Context, RunConfig};
use kbp::types::InputPair;
use serde_json::{json, Value};
use tiny_http::{Header, Response, Server};

fn serve(server: Server, models: FixtureBackends) {
    for mut req in server.incoming_requests() {
        let mut body = String::new();
        let _ = req.as_reader().read_to_string(&mut body);
        let b: Value = serde_json::from_str(&body).unwrap_or_default();
        let s = |k: &str| b[k].as_str().unwrap_or_default().to_string();
        let reply = match req.url() {
            "/fill-mask" => models
                .mask_fill
                .fill_mask(&s("prompt"), b["top_n"].as_u64().unwrap_or(10) as usize)
                .map(|r| json!({ "results": r })),
            "/entail" => models.entailment.entail(&s("premise"), &s("hypothesis")).map(|l| json!(l)),
            _ => {
                let _ = req.respond(Response::from_string("not found").with_status_code(404));
                continue;
            }
        };
        let response = match reply {
            Ok(v) => Response::from_string(v.to_string())
                .with_header("Content-Type: application/json".parse::<Header>().unwrap()),
            Err(e) => Response::from_string(e.to_string()).with_status_code(422),
        };
        let _ = req.respond(response);
    }
}

fn main() -> Result<(), Box<dyn Error>> {
    let corpus = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus");
    let server = Server::http("127.0.0.1:0").map_err(|e| e.to_string())?;
    let url = format!("http://{}", server.server_addr());
    let models = FixtureBackends::load_dir(corpus.join("fixtures"))?;
    thread::spawn(move || serve(server, models));
    println!("model server at {url}");

    let ctx = Context::new(RunConfig::load(corpus.join("kbp.toml"))?);
    let mut pipeline = ctx.pipeline(ctx.registry()?)?;
    let client = Retry::new(HttpModelClient::new(&url), RetryPolicy::default());
    pipeline.backends.mask_fill = Arc::new(client.clone());
    pipeline.backends.entailment = Arc::new(client);

    for (subject, relation) in [("Alicia Keys", "PersonInstrument"), ("Niue", "CountryOfficialLanguage")] {
        let run = pipeline.predict_objects(&InputPair::new(subject, relation)?)?;
        println!("{subject} / {relation}: {:?}", run.record.surfaces());
    }

    let bad = HttpModelClient::new(&url).fill_mask("no mask here", 5);
    println!("prompt without a mask: {}", bad.unwrap_err());
    Ok(())
}
