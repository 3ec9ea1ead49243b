use std::sync::Arc;

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::header::HOST;
use hyper::{Request, Response, Uri};
use hyper_rustls::HttpsConnector;
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;

use crate::config::ProxyConfig;

const HOP_BY_HOP: &[&str] = &[
    "connection",
    "proxy-connection",
    "keep-alive",
    "proxy-authorization",
    "proxy-authenticate",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

pub(crate) fn strip_hop_by_hop(headers: &mut hyper::HeaderMap) {
    let listed: Vec<String> = headers
        .get_all(hyper::header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(',').map(|s| s.trim().to_ascii_lowercase()))
        .collect();
    for h in HOP_BY_HOP.iter().copied().chain(listed.iter().map(String::as_str)) {
        headers.remove(h);
    }
}

#[derive(Debug, thiserror::Error)]
pub enum UpstreamError {
    #[error("upstream request failed: {0}")]
    Request(String),
    #[error("upstream timed out")]
    Timeout,
}

#[derive(Clone)]
pub(crate) struct Upstream {
    client: Client<HttpsConnector<HttpConnector>, Full<Bytes>>,
    config: Arc<ProxyConfig>,
}

impl Upstream {
    pub fn new(config: Arc<ProxyConfig>) -> Result<Upstream, rustls::Error> {
        let mut roots = rustls::RootCertStore::empty();
        roots.extend(webpki_roots::TLS_SERVER_ROOTS.iter().cloned());
        for c in &config.upstream_roots {
            roots.add(c.clone())?;
        }
        let tls = rustls::ClientConfig::builder_with_provider(Arc::new(rustls::crypto::ring::default_provider()))
            .with_safe_default_protocol_versions()?
            .with_root_certificates(roots)
            .with_no_client_auth();
        let https = hyper_rustls::HttpsConnectorBuilder::new()
            .with_tls_config(tls)
            .https_or_http()
            .enable_http1()
            .build();
        Ok(Upstream {
            client: Client::builder(TokioExecutor::new()).build(https),
            config,
        })
    }

    /// Sends `req` (absolute URI) upstream and buffers the response.
    pub async fn send(&self, mut req: Request<Full<Bytes>>) -> Result<Response<Bytes>, UpstreamError> {
        strip_hop_by_hop(req.headers_mut());
        let uri = req.uri().clone();
        let authority = uri.authority().map(|a| a.to_string()).unwrap_or_default();
        if !req.headers().contains_key(HOST) {
            if let Ok(v) = authority.parse() {
                req.headers_mut().insert(HOST, v);
            }
        }
        if let Some(addr) = self.config.override_for(uri.host().unwrap_or("")) {
            let pq = uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
            *req.uri_mut() = Uri::try_from(format!("http://{addr}{pq}"))
                .map_err(|e| UpstreamError::Request(e.to_string()))?;
        }
        let fut = self.client.request(req);
        let resp = tokio::time::timeout(self.config.upstream_timeout, fut)
            .await
            .map_err(|_| UpstreamError::Timeout)?
            .map_err(|e| UpstreamError::Request(e.to_string()))?;
        let (mut parts, body) = resp.into_parts();
        let body = body
            .collect()
            .await
            .map_err(|e| UpstreamError::Request(e.to_string()))?
            .to_bytes();
        strip_hop_by_hop(&mut parts.headers);
        parts.headers.remove(hyper::header::CONTENT_LENGTH);
        Ok(Response::from_parts(parts, body))
    }
}
