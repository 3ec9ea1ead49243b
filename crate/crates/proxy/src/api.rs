//! Control and context-feed endpoints, served in origin form on the proxy port.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cellgate_core::ValueType;
use http_body_util::{BodyExt, Limited};
use hyper::body::Incoming;
use hyper::{Method, Request, StatusCode};
use serde::Deserialize;
use serde_json::{json, Value as Json};

use crate::server::{json_response, ProxyState, Resp};
use crate::session::SessionLoad;

pub const TOKEN_HEADER: &str = "x-cellgate-token";
const MAX_API_BODY: usize = 16 << 20;
const MAX_SETTLE_WAIT: Duration = Duration::from_secs(30);

/// Body of `POST /ctx/report`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextReport {
    pub session_id: String,
    pub arg_name: String,
    pub value: Json,
    pub value_type: ValueType,
    pub source_url: String,
    pub seq: u64,
}

fn token_ok(given: Option<&[u8]>, expected: &str) -> bool {
    let Some(given) = given else { return false };
    let expected = expected.as_bytes();
    if given.len() != expected.len() || expected.is_empty() {
        return false;
    }
    given.iter().zip(expected).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
}

fn query(req: &Request<Incoming>) -> HashMap<String, String> {
    req.uri()
        .query()
        .map(|q| form_urlencoded::parse(q.as_bytes()).into_owned().collect())
        .unwrap_or_default()
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Resp {
    json_response(status, &json!({"error": msg.to_string()}))
}

pub(crate) async fn route(state: Arc<ProxyState>, peer: SocketAddr, req: Request<Incoming>) -> Resp {
    if !peer.ip().is_loopback() {
        return error(StatusCode::FORBIDDEN, "control API is loopback-only");
    }
    let path = req.uri().path().to_owned();
    if path == "/healthz" && req.method() == Method::GET {
        return json_response(StatusCode::OK, &json!({"status": "ok"}));
    }
    if !token_ok(req.headers().get(TOKEN_HEADER).map(|v| v.as_bytes()), &state.config.token) {
        return error(StatusCode::UNAUTHORIZED, "missing or wrong X-Cellgate-Token");
    }
    let q = query(&req);
    let method = req.method().clone();
    let body = match Limited::new(req.into_body(), MAX_API_BODY).collect().await {
        Ok(b) => b.to_bytes(),
        Err(e) => return error(StatusCode::PAYLOAD_TOO_LARGE, e),
    };
    match (method, path.as_str()) {
        (Method::POST, "/ctl/session") => {
            let load: SessionLoad = match serde_json::from_slice(&body) {
                Ok(l) => l,
                Err(e) => return error(StatusCode::BAD_REQUEST, e),
            };
            match state.sessions.load_documents(&load) {
                Ok(s) => json_response(
                    StatusCode::OK,
                    &json!({"session_id": s.id, "generation": s.generation, "domains": s.domains()}),
                ),
                Err(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e),
            }
        }
        (Method::DELETE, "/ctl/session") => {
            let Some(id) = q.get("session_id") else {
                return error(StatusCode::BAD_REQUEST, "session_id required");
            };
            json_response(StatusCode::OK, &json!({"removed": state.sessions.remove(id)}))
        }
        (Method::GET, "/ctl/records") => {
            let Some(id) = q.get("session_id") else {
                return error(StatusCode::BAD_REQUEST, "session_id required");
            };
            json_response(StatusCode::OK, &json!(state.audit.records(id)))
        }
        (Method::POST, "/ctx/report") => {
            let r: ContextReport = match serde_json::from_slice(&body) {
                Ok(r) => r,
                Err(e) => return error(StatusCode::BAD_REQUEST, e),
            };
            let Some(s) = state.sessions.get(&r.session_id) else {
                return error(StatusCode::NOT_FOUND, format!("unknown session {}", r.session_id));
            };
            match s.cache.ingest(&r.arg_name, &r.value, r.value_type, &r.source_url, r.seq) {
                Ok(accepted) => json_response(StatusCode::OK, &json!({"accepted": accepted})),
                Err(e) => json_response(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    &json!({"accepted": false, "error": e.to_string()}),
                ),
            }
        }
        (Method::GET, "/ctx/settled") => {
            let Some(s) = q.get("session_id").and_then(|id| state.sessions.get(id)) else {
                return error(StatusCode::NOT_FOUND, "unknown session");
            };
            let wait = q
                .get("wait_ms")
                .and_then(|w| w.parse().ok())
                .map(Duration::from_millis)
                .unwrap_or_default()
                .min(MAX_SETTLE_WAIT);
            let deadline = Instant::now() + wait;
            loop {
                match s.cache.is_settled() {
                    Ok(true) => return json_response(StatusCode::OK, &json!({"settled": true})),
                    Ok(false) if Instant::now() < deadline => {
                        tokio::time::sleep(Duration::from_millis(10)).await;
                    }
                    Ok(false) => return json_response(StatusCode::OK, &json!({"settled": false})),
                    Err(t) => {
                        return json_response(
                            StatusCode::OK,
                            &json!({"settled": false, "stale": true, "error": t.to_string()}),
                        )
                    }
                }
            }
        }
        _ => error(StatusCode::NOT_FOUND, format!("no route for {path}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_comparison() {
        assert!(token_ok(Some(b"abc"), "abc"));
        assert!(!token_ok(Some(b"abd"), "abc"));
        assert!(!token_ok(Some(b"ab"), "abc"));
        assert!(!token_ok(None, "abc"));
        assert!(!token_ok(Some(b""), ""));
    }
}
