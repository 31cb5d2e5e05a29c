#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus")
}

#[derive(Debug, Clone)]
pub struct Recorded {
    pub method: String,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Recorded {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).expect("request body is JSON")
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

type Responder = dyn Fn(&Recorded) -> (u16, String) + Send + Sync;

/// Local HTTP server answering every request with `respond`.
pub struct MockServer {
    pub url: String,
    server: Arc<tiny_http::Server>,
    requests: Arc<Mutex<Vec<Recorded>>>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(respond: impl Fn(&Recorded) -> (u16, String) + Send + Sync + 'static) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind"));
        let url = format!("http://{}", server.server_addr().to_ip().expect("ip address"));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let respond: Arc<Responder> = Arc::new(respond);
        let handle = {
            let server = server.clone();
            let requests = requests.clone();
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let mut body = String::new();
                    let _ = std::io::Read::read_to_string(req.as_reader(), &mut body);
                    let rec = Recorded {
                        method: req.method().to_string(),
                        url: req.url().to_string(),
                        headers: req
                            .headers()
                            .iter()
                            .map(|h| (h.field.to_string(), h.value.to_string()))
                            .collect(),
                        body,
                    };
                    let (status, text) = respond(&rec);
                    requests.lock().unwrap().push(rec);
                    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                    let _ = req.respond(
                        tiny_http::Response::from_string(text)
                            .with_status_code(status)
                            .with_header(header),
                    );
                }
            })
        };
        MockServer { url, server, requests, handle: Some(handle) }
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}


/// Writes a copy of the corpus config into `dir` with outputs under `dir/out`.
pub fn corpus_config(dir: &Path) -> PathBuf {
    let corpus = corpus_dir();
    let text = std::fs::read_to_string(corpus.join("kbp.toml")).unwrap();
    let mut out = String::new();
    for line in text.lines() {
        let resolved = match line.split_once(" = \"") {
            Some((key, _)) if key == "output_dir" => format!("{key} = \"{}\"", dir.join("out").display()),
            Some((key, value)) if key != "mode" && !key.starts_with('#') => {
                format!("{key} = \"{}\"", corpus.join(value.trim_end_matches('"')).display())
            }
            _ => line.to_string(),
        };
        out.push_str(&resolved);
        out.push('\n');
    }
    let path = dir.join("kbp.toml");
    std::fs::write(&path, out).unwrap();
    path
}

pub fn kbp(config: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["kbp", "--config", config.to_str().unwrap()];
    argv.extend_from_slice(args);
    kbp::cli::main_with_args(argv)
}
