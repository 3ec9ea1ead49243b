//! Echo server standing in for real origins. Every arrival is recorded so
//! tests can check exactly what got past the proxy.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Request, Response};
use hyper_util::rt::TokioIo;
use parking_lot::Mutex;
use serde::Serialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Arrival {
    pub method: String,
    pub host: String,
    pub path: String,
    pub body: String,
}

impl Arrival {
    /// `https://host/path`, for comparing against request URLs.
    pub fn url(&self, scheme: &str) -> String {
        format!("{scheme}://{}{}", self.host, self.path)
    }
}

pub struct MockUpstream {
    pub addr: SocketAddr,
    arrivals: Arc<Mutex<Vec<Arrival>>>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockUpstream {
    pub async fn start() -> std::io::Result<MockUpstream> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let arrivals: Arc<Mutex<Vec<Arrival>>> = Arc::default();
        let (tx, mut rx) = oneshot::channel::<()>();
        let log = arrivals.clone();
        tokio::spawn(async move {
            loop {
                tokio::select! {
                    _ = &mut rx => break,
                    Ok((stream, _)) = listener.accept() => {
                        let log = log.clone();
                        tokio::spawn(async move {
                            let svc = service_fn(move |req| echo(log.clone(), req));
                            let _ = http1::Builder::new().serve_connection(TokioIo::new(stream), svc).await;
                        });
                    }
                }
            }
        });
        Ok(MockUpstream {
            addr,
            arrivals,
            shutdown: Some(tx),
        })
    }

    pub fn arrivals(&self) -> Vec<Arrival> {
        self.arrivals.lock().clone()
    }

    pub fn clear(&self) {
        self.arrivals.lock().clear();
    }
}

impl Drop for MockUpstream {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

async fn echo(log: Arc<Mutex<Vec<Arrival>>>, req: Request<Incoming>) -> Result<Response<Full<Bytes>>, Infallible> {
    let (parts, body) = req.into_parts();
    let body = body.collect().await.map(|b| b.to_bytes()).unwrap_or_default();
    let arrival = Arrival {
        method: parts.method.to_string(),
        host: parts
            .headers
            .get(hyper::header::HOST)
            .and_then(|h| h.to_str().ok())
            .unwrap_or("")
            .to_owned(),
        path: parts.uri.path_and_query().map(|p| p.to_string()).unwrap_or_default(),
        body: String::from_utf8_lossy(&body).into_owned(),
    };
    let reply = json!({"echo": arrival});
    log.lock().push(arrival);
    let mut resp = Response::new(Full::new(Bytes::from(reply.to_string())));
    resp.headers_mut()
        .insert(hyper::header::CONTENT_TYPE, "application/json".parse().unwrap());
    Ok(resp)
}
