use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use trialign_core::retrieval::{JointQueryRequest, QueryRequest, QueryResponse, QueryService, ServiceError};

type Reply = Result<Json<QueryResponse>, (StatusCode, Json<ServiceError>)>;

fn status_of(e: &ServiceError) -> StatusCode {
    match e.code.as_str() {
        "unknown_id" => StatusCode::NOT_FOUND,
        "no_model" => StatusCode::CONFLICT,
        "bad_request" | "dim_mismatch" | "non_finite" | "zero_norm" | "invalid_config" => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn reply<T>(body: Result<Json<T>, JsonRejection>, run: impl FnOnce(T) -> Result<QueryResponse, ServiceError>) -> Reply {
    let Json(req) = body.map_err(|e| {
        (
            StatusCode::BAD_REQUEST,
            Json(ServiceError::new("bad_request", e.body_text())),
        )
    })?;
    run(req).map(Json).map_err(|e| (status_of(&e), Json(e)))
}

async fn query(State(svc): State<Arc<QueryService>>, body: Result<Json<QueryRequest>, JsonRejection>) -> Reply {
    reply(body, |r| svc.query(&r))
}

async fn query_joint(
    State(svc): State<Arc<QueryService>>,
    body: Result<Json<JointQueryRequest>, JsonRejection>,
) -> Reply {
    reply(body, |r| svc.query_joint(&r))
}

async fn healthz(State(svc): State<Arc<QueryService>>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "rows": svc.index.len(),
        "dim": svc.index.dim(),
        "model": svc.model.is_some(),
    }))
}

pub fn router(service: QueryService) -> Router {
    Router::new()
        .route("/query", post(query))
        .route("/query_joint", post(query_joint))
        .route("/healthz", get(healthz))
        .with_state(Arc::new(service))
}

/// Binds `addr`, prints `{"listening": <addr>}` and serves until Ctrl-C.
pub fn run(service: QueryService, addr: &str) -> Result<(), ServiceError> {
    let io = |e: std::io::Error| ServiceError::new("io", e.to_string());
    let rt = tokio::runtime::Runtime::new().map_err(io)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(io)?;
        let local = listener.local_addr().map_err(io)?;
        println!("{}", json!({ "listening": local.to_string() }));
        log::info!("serving {} rows on {local}", service.index.len());
        axum::serve(listener, router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(io)
    })
}
