#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use refineir::{
    generate_corpus, train_random_cav, CavRegistry, Corpus, SyntheticSpec, TrainerConfig,
};
use refineir_service::{router, AppState, Config};
use serde_json::Value;
use tower::ServiceExt;

pub const SLIDER_CONCEPT: &str = "concept_1";

pub fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_full_images: 150,
        seed: 11,
        ..SyntheticSpec::default()
    }
}

pub fn corpus_and_registry(spec: &SyntheticSpec) -> (Corpus, CavRegistry) {
    let corpus = generate_corpus(spec).unwrap().corpus;
    let cav = train_random_cav(
        &corpus,
        SLIDER_CONCEPT,
        Some(100),
        &TrainerConfig::default(),
        0,
    )
    .unwrap();
    (corpus, [cav].into_iter().collect())
}

pub fn app_with(corpus: Corpus, registry: CavRegistry, config: Config) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(corpus, registry, config).unwrap());
    (router(Arc::clone(&state)), state)
}

pub fn app() -> (Router, Arc<AppState>) {
    let (corpus, registry) = corpus_and_registry(&small_spec());
    app_with(corpus, registry, Config::default())
}

pub async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

pub async fn call_json(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|e| panic!("{uri}: {e}: {}", String::from_utf8_lossy(&bytes)))
    };
    (status, value)
}
