#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::routing::post;
use axum::Json;
use router_service::api::{app, AppState};
use router_service::config::{build, ServiceConfig};
use serde_json::{json, Value};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

fn runtime() -> &'static tokio::runtime::Runtime {
    static RT: std::sync::OnceLock<tokio::runtime::Runtime> = std::sync::OnceLock::new();
    RT.get_or_init(|| tokio::runtime::Runtime::new().unwrap())
}

fn spawn(router: axum::Router) -> SocketAddr {
    let rt = runtime();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(async move { axum::serve(listener, router).await.unwrap() });
    addr
}

/// Expert stand-in speaking the dispatch wire schema. Records each request.
pub struct MockExpert {
    pub url: String,
    pub log: Arc<Mutex<Vec<Value>>>,
}

pub fn mock_expert() -> MockExpert {
    let log = Arc::new(Mutex::new(Vec::new()));
    let seen = log.clone();
    let router = axum::Router::new().route(
        "/execute",
        post(move |Json(req): Json<Value>| {
            let seen = seen.clone();
            async move {
                let ok = !req["text"].as_str().unwrap_or("").contains("fail");
                seen.lock().unwrap().push(req);
                Json(json!({
                    "status": if ok { "success" } else { "failure" },
                    "metric_name": "sr",
                    "metric_value": if ok { 1.0 } else { 0.0 },
                    "trajectory_b64": "AQID",
                }))
            }
        }),
    );
    MockExpert { url: format!("http://{}/execute", spawn(router)), log }
}

/// The bundled registry with every endpoint pointed at `endpoint`.
pub fn registry_file(dir: &Path, endpoint: &str) -> PathBuf {
    let mut reg: Value = serde_json::from_slice(&std::fs::read(fixture("registry.json")).unwrap()).unwrap();
    for e in reg.as_array_mut().unwrap() {
        e["endpoint"] = endpoint.into();
    }
    let path = dir.join("registry.json");
    std::fs::write(&path, serde_json::to_string_pretty(&reg).unwrap()).unwrap();
    path
}

pub fn config(registry: Option<PathBuf>) -> ServiceConfig {
    let mut cfg = ServiceConfig { registry, ..Default::default() };
    cfg.lm.backend = fixture("rules.json").to_string_lossy().into_owned();
    cfg.lm.examples = Some(fixture("examples.json"));
    cfg
}

pub fn start(cfg: &ServiceConfig) -> String {
    let state = AppState::new(build(cfg).unwrap(), cfg).unwrap();
    format!("http://{}", spawn(app(Arc::new(state))))
}

/// (status, body) for any response, including 4xx/5xx.
pub fn call(method: &str, url: &str, body: Option<Value>) -> (u16, Value) {
    let req = ureq::request(method, url);
    let res = match body {
        Some(b) => req.send_json(b),
        None => req.call(),
    };
    let resp = match res {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => panic!("{method} {url}: {e}"),
    };
    let status = resp.status();
    (status, resp.into_json().unwrap())
}
