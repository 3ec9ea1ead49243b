//! Listener, CONNECT handling and per-request mediation.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use base64::Engine;
use bytes::Bytes;
use cellgate_core::context::SystemClock;
use cellgate_core::{decide, RequestView, RouteKind};
use http_body_util::{BodyExt, Full, Limited};
use hyper::body::Incoming;
use hyper::header::{HeaderValue, CONTENT_TYPE, HOST, PROXY_AUTHORIZATION};
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Method, Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use serde_json::{json, Value as Json};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::audit::{AuditLog, EnforcementRecord};
use crate::config::{Mode, ProxyConfig};
use crate::session::{HostClass, SessionRegistry};
use crate::upstream::Upstream;

pub type Resp = Response<Full<Bytes>>;

/// Header carrying the proxy's verdict on every mediated response:
/// `allow`, `deny`, `deny_by_error` or `refused`.
pub const VERDICT_HEADER: &str = "x-cellgate-verdict";
pub const DEFAULT_SESSION: &str = "default";
/// Bodies above this are not buffered at all.
const MAX_BUFFERED_BODY: usize = 32 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ProxyError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("cannot open audit log: {0}")]
    Audit(std::io::Error),
    #[error("upstream TLS setup: {0}")]
    Tls(#[from] rustls::Error),
}

pub struct ProxyState {
    pub config: Arc<ProxyConfig>,
    pub sessions: Arc<SessionRegistry>,
    pub audit: AuditLog,
    upstream: Upstream,
}

impl std::fmt::Debug for ProxyState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProxyState").field("config", &self.config).finish_non_exhaustive()
    }
}

pub struct RunningProxy {
    pub addr: SocketAddr,
    pub state: Arc<ProxyState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl RunningProxy {
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = self.task.await;
    }

    /// Runs until the accept loop ends.
    pub async fn wait(self) {
        let _ = self.task.await;
    }
}

pub async fn start(config: ProxyConfig) -> Result<RunningProxy, ProxyError> {
    let sessions = Arc::new(SessionRegistry::new(config.lockout, Arc::new(SystemClock::default())));
    start_with(config, sessions).await
}

pub async fn start_with(config: ProxyConfig, sessions: Arc<SessionRegistry>) -> Result<RunningProxy, ProxyError> {
    let listener = TcpListener::bind(config.listen)
        .await
        .map_err(|source| ProxyError::Bind { addr: config.listen, source })?;
    let addr = listener.local_addr().map_err(|source| ProxyError::Bind { addr: config.listen, source })?;
    let audit = match &config.audit_path {
        Some(p) => AuditLog::with_file(p).map_err(ProxyError::Audit)?,
        None => AuditLog::in_memory(),
    };
    let config = Arc::new(config);
    let state = Arc::new(ProxyState {
        upstream: Upstream::new(config.clone())?,
        config,
        sessions,
        audit,
    });
    let (tx, mut rx) = oneshot::channel();
    let st = state.clone();
    let task = tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = &mut rx => break,
                acc = listener.accept() => match acc {
                    Ok((stream, peer)) => {
                        let st = st.clone();
                        tokio::spawn(serve_connection(st, stream, peer));
                    }
                    Err(e) => {
                        tracing::warn!("accept failed: {e}");
                        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
                    }
                }
            }
        }
    });
    tracing::info!(%addr, mode = state.config.mode.as_str(), "proxy listening");
    Ok(RunningProxy {
        addr,
        state,
        shutdown: Some(tx),
        task,
    })
}

async fn serve_connection(state: Arc<ProxyState>, stream: TcpStream, peer: SocketAddr) {
    let svc = service_fn(move |req| handle(state.clone(), peer, req));
    if let Err(e) = http1::Builder::new()
        .serve_connection(TokioIo::new(stream), svc)
        .with_upgrades()
        .await
    {
        tracing::debug!(%peer, "connection ended: {e}");
    }
}

async fn handle(state: Arc<ProxyState>, peer: SocketAddr, req: Request<Incoming>) -> Result<Resp, Infallible> {
    if req.method() == Method::CONNECT {
        return Ok(connect(state, req));
    }
    let uri = req.uri();
    if let (Some(scheme), Some(authority)) = (uri.scheme_str(), uri.authority()) {
        let scheme = scheme.to_ascii_lowercase();
        let authority = authority.as_str().to_owned();
        let session = session_id(req.headers());
        return Ok(mediate(state, &session, &scheme, &authority, req).await);
    }
    Ok(crate::api::route(state, peer, req).await)
}

/// Session id from the `Proxy-Authorization: Basic` username.
pub fn session_id(headers: &hyper::HeaderMap) -> String {
    headers
        .get(PROXY_AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Basic ").or_else(|| v.strip_prefix("basic ")))
        .and_then(|b| base64::engine::general_purpose::STANDARD.decode(b.trim()).ok())
        .and_then(|raw| String::from_utf8(raw).ok())
        .map(|s| s.split(':').next().unwrap_or("").to_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| DEFAULT_SESSION.to_owned())
}

pub(crate) fn json_response(status: StatusCode, body: &Json) -> Resp {
    let mut resp = Response::new(Full::new(Bytes::from(body.to_string())));
    *resp.status_mut() = status;
    resp.headers_mut()
        .insert(CONTENT_TYPE, HeaderValue::from_static("application/json"));
    resp
}

fn with_verdict(mut resp: Resp, verdict: &str) -> Resp {
    if let Ok(v) = HeaderValue::from_str(verdict) {
        resp.headers_mut().insert(VERDICT_HEADER, v);
    }
    resp
}

fn split_host_port(authority: &str, default_port: u16) -> (String, u16) {
    if let Some(rest) = authority.strip_prefix('[') {
        if let Some((h, tail)) = rest.split_once(']') {
            let port = tail.strip_prefix(':').and_then(|p| p.parse().ok()).unwrap_or(default_port);
            return (h.to_ascii_lowercase(), port);
        }
    }
    match authority.rsplit_once(':') {
        Some((h, p)) if p.chars().all(|c| c.is_ascii_digit()) && !p.is_empty() => {
            (h.to_ascii_lowercase(), p.parse().unwrap_or(default_port))
        }
        _ => (authority.to_ascii_lowercase(), default_port),
    }
}

enum Tunnel {
    Intercept,
    Opaque,
    Refuse(&'static str),
}

fn connect(state: Arc<ProxyState>, mut req: Request<Incoming>) -> Resp {
    let session = session_id(req.headers());
    let Some(authority) = req.uri().authority().map(|a| a.as_str().to_owned()) else {
        return json_response(StatusCode::BAD_REQUEST, &json!({"error": "CONNECT needs host:port"}));
    };
    let (host, port) = split_host_port(&authority, 443);
    let snap = state.sessions.snapshot(&session);
    let class = snap.classify_host(&host);
    let mode = state.config.mode;
    let plan = match (class, state.config.ca.is_some(), mode) {
        (HostClass::Loaded | HostClass::Allowlisted, true, _) => Tunnel::Intercept,
        (HostClass::Allowlisted, false, _) => Tunnel::Opaque,
        (HostClass::Loaded, false, Mode::Strict) => Tunnel::Refuse("TLS to a policed domain cannot be inspected without a CA"),
        (HostClass::ThirdParty, _, Mode::Strict) => Tunnel::Refuse("host is outside the session's domains"),
        (_, _, Mode::Observe) => Tunnel::Opaque,
    };
    let mut rec = EnforcementRecord::new(&session, "CONNECT", &authority);
    match plan {
        Tunnel::Refuse(reason) => {
            rec.refused(reason);
            state.audit.append(rec);
            with_verdict(
                json_response(StatusCode::FORBIDDEN, &json!({"refused": host, "reason": reason})),
                "refused",
            )
        }
        Tunnel::Opaque => {
            rec.route = "tunneled".into();
            rec.verdict = "allow".into();
            state.audit.append(rec);
            let target = state
                .config
                .override_for(&host)
                .map(|a| a.to_string())
                .unwrap_or_else(|| format!("{host}:{port}"));
            let upgrade = hyper::upgrade::on(&mut req);
            tokio::spawn(async move {
                let Ok(upgraded) = upgrade.await else { return };
                let mut client = TokioIo::new(upgraded);
                match TcpStream::connect(&target).await {
                    Ok(mut server) => {
                        let _ = tokio::io::copy_bidirectional(&mut client, &mut server).await;
                    }
                    Err(e) => tracing::debug!(%target, "tunnel connect failed: {e}"),
                }
            });
            Response::new(Full::new(Bytes::new()))
        }
        Tunnel::Intercept => {
            let ca = state.config.ca.clone().expect("intercept implies a CA");
            let tls = match ca.server_config(&host) {
                Ok(c) => c,
                Err(e) => {
                    rec.refused("could not mint a certificate");
                    state.audit.append(rec);
                    return json_response(StatusCode::BAD_GATEWAY, &json!({"error": e.to_string()}));
                }
            };
            let url_authority = if port == 443 { host.clone() } else { format!("{host}:{port}") };
            let upgrade = hyper::upgrade::on(&mut req);
            tokio::spawn(async move {
                let Ok(upgraded) = upgrade.await else { return };
                let acceptor = tokio_rustls::TlsAcceptor::from(tls);
                let stream = match acceptor.accept(TokioIo::new(upgraded)).await {
                    Ok(s) => s,
                    Err(e) => {
                        tracing::debug!(%host, "client TLS handshake failed: {e}");
                        return;
                    }
                };
                let svc = service_fn(move |inner: Request<Incoming>| {
                    let (state, session, auth) = (state.clone(), session.clone(), url_authority.clone());
                    async move { Ok::<_, Infallible>(mediate(state, &session, "https", &auth, inner).await) }
                });
                if let Err(e) = http1::Builder::new().serve_connection(TokioIo::new(stream), svc).await {
                    tracing::debug!("intercepted connection ended: {e}");
                }
            });
            Response::new(Full::new(Bytes::new()))
        }
    }
}

enum Outcome {
    Forward,
    Block(Json, &'static str),
    Refuse(&'static str),
}

/// Routes one request through the session's tables and either forwards it
/// or answers with a 403.
async fn mediate(state: Arc<ProxyState>, session: &str, scheme: &str, authority: &str, req: Request<Incoming>) -> Resp {
    let (mut parts, body) = req.into_parts();
    let pq = parts.uri.path_and_query().map(|p| p.as_str()).unwrap_or("/").to_owned();
    let url = format!("{scheme}://{authority}{pq}");
    let mut rec = EnforcementRecord::new(session, parts.method.as_str(), &url);
    let body = match Limited::new(body, MAX_BUFFERED_BODY).collect().await {
        Ok(b) => b.to_bytes(),
        Err(e) => {
            rec.refused("request body could not be read");
            state.audit.append(rec);
            return with_verdict(
                json_response(StatusCode::PAYLOAD_TOO_LARGE, &json!({"error": e.to_string()})),
                "refused",
            );
        }
    };

    let started = Instant::now();
    let (host, _) = split_host_port(authority, 0);
    let ct = parts.headers.get(CONTENT_TYPE).and_then(|v| v.to_str().ok());
    let view = RequestView::new(parts.method.as_str(), &url, ct, &body);
    let snap = state.sessions.snapshot(session);
    let outcome = match view {
        Err(_) => {
            rec.refused("unparseable request URL");
            Outcome::Refuse("unparseable request URL")
        }
        Ok(view) => match snap.classify_host(&host) {
            HostClass::Loaded => {
                let bundle = snap.bundle_for_host(&host).expect("classified as loaded");
                let mut e = decide(&bundle.table, &snap.cache, &view);
                // A cleartext request to a policed domain is judged as its
                // https twin, so downgrading the scheme cannot dodge a rule.
                if e.route == RouteKind::PassThrough && scheme == "http" {
                    let twin = format!("https{}", &url[4..]);
                    if let Ok(v) = RequestView::new(parts.method.as_str(), &twin, ct, &body) {
                        e = decide(&bundle.table, &snap.cache, &v);
                    }
                }
                rec.apply(&e);
                if e.forward() {
                    Outcome::Forward
                } else {
                    Outcome::Block(e.block_body(), e.verdict.label())
                }
            }
            HostClass::Allowlisted if snap.bundles.iter().any(|b| b.table.is_allowlisted(&view)) => {
                rec.route = "allowlisted".into();
                rec.verdict = "allow".into();
                Outcome::Forward
            }
            _ if state.config.mode == Mode::Observe => {
                rec.pass_through_unmediated();
                Outcome::Forward
            }
            _ => {
                rec.refused("host is outside the session's domains");
                Outcome::Refuse("host is outside the session's domains")
            }
        },
    };
    rec.latency_us = started.elapsed().as_micros() as u64;

    let resp = match outcome {
        Outcome::Block(body, label) => with_verdict(json_response(StatusCode::FORBIDDEN, &body), label),
        Outcome::Refuse(reason) => with_verdict(
            json_response(StatusCode::FORBIDDEN, &json!({"refused": host, "reason": reason})),
            "refused",
        ),
        Outcome::Forward => {
            parts.uri = match url.parse() {
                Ok(u) => u,
                Err(_) => {
                    rec.refused("unparseable request URL");
                    state.audit.append(rec);
                    return with_verdict(json_response(StatusCode::BAD_REQUEST, &json!({"error": "bad url"})), "refused");
                }
            };
            // Route by the URL that was checked, never by a different Host.
            parts.headers.remove(HOST);
            if let Ok(v) = HeaderValue::from_str(authority) {
                parts.headers.insert(HOST, v);
            }
            let upstream_req = Request::from_parts(parts, Full::new(body));
            match state.upstream.send(upstream_req).await {
                Ok(r) => {
                    rec.upstream_status = Some(r.status().as_u16());
                    with_verdict(r.map(Full::new), "allow")
                }
                Err(e) => {
                    rec.upstream_status = Some(502);
                    with_verdict(json_response(StatusCode::BAD_GATEWAY, &json!({"error": e.to_string()})), "allow")
                }
            }
        }
    };
    state.audit.append(rec);
    resp
}
