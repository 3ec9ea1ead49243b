//! Scripted traces replayed through a running proxy.
//!
//! A trace is JSON lines. Each step is either an HTTP request sent through
//! the proxy or a context report posted to its context feed, and names the
//! outcome it expects.

use std::collections::BTreeMap;
use std::net::SocketAddr;

use base64::Engine;
use bytes::Bytes;
use cellgate_core::{assemble_composite, Effect, Policy, PolicySet, ValueType};
use http_body_util::{BodyExt, Full};
use hyper::{Request, StatusCode};
use hyper_util::rt::TokioIo;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use tokio::net::TcpStream;

use crate::api::TOKEN_HEADER;
use crate::config::{Mode, ProxyConfig};
use crate::mock_upstream::MockUpstream;
use crate::server::{start, VERDICT_HEADER};
use crate::session::DomainBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expect {
    Allow,
    Deny,
    Refused,
    Accepted,
    Rejected,
}

impl Expect {
    pub fn as_str(self) -> &'static str {
        match self {
            Expect::Allow => "allow",
            Expect::Deny => "deny",
            Expect::Refused => "refused",
            Expect::Accepted => "accepted",
            Expect::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceStep {
    Request {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
        method: String,
        url: String,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        headers: BTreeMap<String, String>,
        /// A JSON value is sent as JSON; a string is sent verbatim.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        body: Option<Json>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        content_type: Option<String>,
        expect: Expect,
    },
    CtxReport {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
        arg_name: String,
        value: Json,
        value_type: ValueType,
        source_url: String,
        seq: u64,
        expect: Expect,
    },
}

impl TraceStep {
    pub fn expect(&self) -> Expect {
        match self {
            TraceStep::Request { expect, .. } | TraceStep::CtxReport { expect, .. } => *expect,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            TraceStep::Request { note: Some(n), .. } | TraceStep::CtxReport { note: Some(n), .. } => n.clone(),
            TraceStep::Request { method, url, .. } => format!("{method} {url}"),
            TraceStep::CtxReport { arg_name, value, seq, .. } => format!("report {arg_name}={value} seq {seq}"),
        }
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceStep>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepOutcome {
    pub index: usize,
    pub step: String,
    pub expected: String,
    pub observed: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub scenario: String,
    pub baseline: bool,
    pub steps: Vec<StepOutcome>,
    /// Requests that reached the mock upstream.
    pub upstream_arrivals: usize,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(|s| s.passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "scenario {}{}\n",
            self.scenario,
            if self.baseline { " (allow-all baseline)" } else { "" }
        );
        for s in &self.steps {
            out.push_str(&format!(
                "  [{}] {:>2} {:<60} expected {:<8} observed {}\n",
                if s.passed { "ok" } else { "FAIL" },
                s.index,
                s.step,
                s.expected,
                s.observed
            ));
        }
        out.push_str(&format!(
            "  {} of {} steps passed, {} upstream arrivals\n",
            self.steps.iter().filter(|s| s.passed).count(),
            self.steps.len(),
            self.upstream_arrivals
        ));
        out
    }
}

#[derive(Debug, Clone)]
pub struct ReplayTarget {
    pub proxy: SocketAddr,
    pub token: String,
    pub session_id: String,
}

async fn send(proxy: SocketAddr, req: Request<Full<Bytes>>) -> Result<(StatusCode, hyper::HeaderMap, Bytes), String> {
    let stream = TcpStream::connect(proxy).await.map_err(|e| format!("connect {proxy}: {e}"))?;
    let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream))
        .await
        .map_err(|e| e.to_string())?;
    tokio::spawn(async move {
        let _ = conn.await;
    });
    let resp = sender.send_request(req).await.map_err(|e| e.to_string())?;
    let (parts, body) = resp.into_parts();
    let body = body.collect().await.map_err(|e| e.to_string())?.to_bytes();
    Ok((parts.status, parts.headers, body))
}

/// Calls a control or context endpoint on the proxy.
pub async fn api_call(
    proxy: SocketAddr,
    token: &str,
    method: &str,
    path: &str,
    body: Option<&Json>,
) -> Result<(StatusCode, Json), String> {
    let bytes = body.map(|b| Bytes::from(b.to_string())).unwrap_or_default();
    let req = Request::builder()
        .method(method)
        .uri(path)
        .header(hyper::header::HOST, proxy.to_string())
        .header(TOKEN_HEADER, token)
        .header(hyper::header::CONTENT_TYPE, "application/json")
        .body(Full::new(bytes))
        .map_err(|e| e.to_string())?;
    let (status, _, body) = send(proxy, req).await?;
    let json = serde_json::from_slice(&body).unwrap_or(Json::Null);
    Ok((status, json))
}

/// Sends one request through the proxy in absolute form.
pub async fn proxied_request(
    proxy: SocketAddr,
    session_id: &str,
    method: &str,
    url: &str,
    headers: &BTreeMap<String, String>,
    body: Option<&Json>,
    content_type: Option<&str>,
) -> Result<(StatusCode, hyper::HeaderMap, Bytes), String> {
    let uri: hyper::Uri = url.parse().map_err(|e| format!("{url}: {e}"))?;
    let host = uri.authority().map(|a| a.to_string()).ok_or("url without host")?;
    let cred = base64::engine::general_purpose::STANDARD.encode(format!("{session_id}:"));
    let (bytes, default_ct) = match body {
        None => (Bytes::new(), None),
        Some(Json::String(s)) => (Bytes::from(s.clone()), Some("application/x-www-form-urlencoded")),
        Some(v) => (Bytes::from(v.to_string()), Some("application/json")),
    };
    let mut b = Request::builder()
        .method(method)
        .uri(uri)
        .header(hyper::header::HOST, host)
        .header(hyper::header::PROXY_AUTHORIZATION, format!("Basic {cred}"));
    if let Some(ct) = content_type.or(default_ct) {
        b = b.header(hyper::header::CONTENT_TYPE, ct);
    }
    for (k, v) in headers {
        b = b.header(k.as_str(), v.as_str());
    }
    send(proxy, b.body(Full::new(bytes)).map_err(|e| e.to_string())?).await
}

pub async fn replay(steps: &[TraceStep], target: &ReplayTarget) -> Vec<StepOutcome> {
    let mut out = Vec::with_capacity(steps.len());
    for (index, step) in steps.iter().enumerate() {
        let observed = match step {
            TraceStep::Request {
                method,
                url,
                headers,
                body,
                content_type,
                ..
            } => match proxied_request(
                target.proxy,
                &target.session_id,
                method,
                url,
                headers,
                body.as_ref(),
                content_type.as_deref(),
            )
            .await
            {
                Ok((_, h, _)) => match h.get(VERDICT_HEADER).and_then(|v| v.to_str().ok()) {
                    Some("allow") => "allow".to_owned(),
                    Some("deny") | Some("deny_by_error") => "deny".to_owned(),
                    Some("refused") => "refused".to_owned(),
                    other => format!("error: verdict header {other:?}"),
                },
                Err(e) => format!("error: {e}"),
            },
            TraceStep::CtxReport {
                arg_name,
                value,
                value_type,
                source_url,
                seq,
                ..
            } => {
                let report = json!({
                    "session_id": target.session_id, "arg_name": arg_name, "value": value,
                    "value_type": value_type, "source_url": source_url, "seq": seq,
                });
                match api_call(target.proxy, &target.token, "POST", "/ctx/report", Some(&report)).await {
                    Ok((_, body)) if body["accepted"] == json!(true) => "accepted".to_owned(),
                    Ok((s, _)) if s.is_success() || s == StatusCode::UNPROCESSABLE_ENTITY => "rejected".to_owned(),
                    Ok((s, body)) => format!("error: {s} {body}"),
                    Err(e) => format!("error: {e}"),
                }
            }
        };
        let expected = step.expect().as_str().to_owned();
        out.push(StepOutcome {
            index,
            step: step.describe(),
            passed: observed == expected,
            expected,
            observed,
        });
    }
    out
}

/// The same bundle with a single allow policy over every action selected:
/// the status quo of an agent with no restrictions.
pub fn allow_all(bundle: &DomainBundle) -> Result<DomainBundle, String> {
    let set = PolicySet {
        domain: bundle.sitemap.domain.clone(),
        policies: vec![Policy {
            name: "allow_all".into(),
            effect: Effect::Allow,
            actions: bundle.sitemap.entries.iter().map(|e| e.semantic_action.clone()).collect(),
            description: "Every action in the sitemap".into(),
            condition: None,
        }],
        allowlist: bundle.policies.allowlist.clone(),
    };
    let composite = assemble_composite(&set, &[("allow_all".into(), None)], &bundle.composite.allowlist)
        .map_err(|e| e.to_string())?;
    DomainBundle::new(bundle.sitemap.clone(), set, composite)
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub bundles: Vec<DomainBundle>,
    pub steps: Vec<TraceStep>,
}

/// Runs a scenario against a fresh in-process proxy whose upstream is a
/// local echo server. The baseline run loads allow-all bundles in observe
/// mode and expects every request to be forwarded.
pub async fn run_hermetic(scenario: &Scenario, baseline: bool) -> Result<ReplayReport, String> {
    let mock = MockUpstream::start().await.map_err(|e| e.to_string())?;
    let mut config = ProxyConfig::new("127.0.0.1:0".parse().unwrap(), "replay-token");
    config.upstream_overrides.insert("*".into(), mock.addr);
    let (bundles, steps) = if baseline {
        config.mode = Mode::Observe;
        let bundles = scenario.bundles.iter().map(allow_all).collect::<Result<Vec<_>, _>>()?;
        let steps = scenario
            .steps
            .iter()
            .cloned()
            .map(|mut s| {
                if let TraceStep::Request { expect, .. } = &mut s {
                    *expect = Expect::Allow;
                }
                s
            })
            .collect();
        (bundles, steps)
    } else {
        (scenario.bundles.clone(), scenario.steps.clone())
    };
    let proxy = start(config).await.map_err(|e| e.to_string())?;
    proxy.state.sessions.load("replay", bundles)?;
    let target = ReplayTarget {
        proxy: proxy.addr,
        token: "replay-token".into(),
        session_id: "replay".into(),
    };
    let outcomes = replay(&steps, &target).await;
    let arrivals = mock.arrivals().len();
    proxy.shutdown().await;
    Ok(ReplayReport {
        scenario: scenario.name.clone(),
        baseline,
        steps: outcomes,
        upstream_arrivals: arrivals,
    })
}
