use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use rand::SeedableRng;
use serde_json::{json, Value};
use tower::ServiceExt;
use trialign_cli::serve::router;
use trialign_core::encoder::{EncoderConfig, ModelState};
use trialign_core::retrieval::{build_index, QueryService};

fn service(with_model: bool) -> QueryService {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let index = build_index(
        vec![
            ("x".into(), vec![1.0, 0.0]),
            ("xy".into(), vec![h, h]),
            ("y".into(), vec![0.0, 1.0]),
        ],
        BTreeMap::new(),
    )
    .unwrap();
    let model = with_model.then(|| {
        let cfg = EncoderConfig {
            point_feature_dims: vec![4],
            head_dims: vec![2],
            embed_dim: 2,
            scale_multiplier: 1.0,
            input_channels: 3,
        };
        ModelState::init(&cfg, 3, 5, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap()
    });
    QueryService::new(index, model)
}

async fn call(svc: QueryService, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(svc).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn healthz_reports_index() {
    let (status, v) = call(service(false), "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "rows": 3, "dim": 2, "model": false}));
}

#[tokio::test]
async fn query_by_vector_and_shape_id() {
    let (status, v) = call(
        service(false),
        "POST",
        "/query",
        Some(json!({"vector": [0.0, 2.0], "k": 2})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["results"][0]["id"], "y");
    assert_eq!(v["results"][1]["id"], "xy");
    let (_, v) = call(service(false), "POST", "/query", Some(json!({"shape_id": "x", "k": 1}))).await;
    assert_eq!(v["results"][0]["id"], "x");
}

#[tokio::test]
async fn joint_query_returns_bisector() {
    let body = json!({"a": [1.0, 0.0], "b": {"vector": [0.0, 1.0]}, "k": 3});
    let (status, v) = call(service(false), "POST", "/query_joint", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["results"][0]["id"], "xy");
}

#[tokio::test]
async fn raw_vector_queries_need_a_model() {
    let body = json!({"modality": "text", "raw_vector": [0.1, 0.2, 0.3], "k": 1});
    let (status, v) = call(service(false), "POST", "/query", Some(body.clone())).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["code"], "no_model");
    let (status, v) = call(service(true), "POST", "/query", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["results"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn errors_are_structured() {
    let cases = [
        (
            json!({"vector": [1.0, 0.0, 0.0], "k": 1}),
            StatusCode::BAD_REQUEST,
            "dim_mismatch",
        ),
        (json!({"shape_id": "nope", "k": 1}), StatusCode::NOT_FOUND, "unknown_id"),
        (
            json!({"vector": [1.0, 0.0], "k": 0}),
            StatusCode::BAD_REQUEST,
            "bad_request",
        ),
        (
            json!({"vector": [1.0, 0.0], "shape_id": "x", "k": 1}),
            StatusCode::BAD_REQUEST,
            "bad_request",
        ),
        (json!({"k": "three"}), StatusCode::BAD_REQUEST, "bad_request"),
    ];
    for (body, want_status, want_code) in cases {
        let (status, v) = call(service(false), "POST", "/query", Some(body.clone())).await;
        assert_eq!(
            (status, v["code"].as_str().unwrap()),
            (want_status, want_code),
            "{body}"
        );
        assert!(v["message"].is_string());
    }
}
