use crate::body::BodyView;
use crate::pattern::{ParsedUrl, UrlError};

/// The parts of an intercepted HTTP request that policy decisions look at.
#[derive(Debug, Clone)]
pub struct RequestView {
    pub method: String,
    pub url: ParsedUrl,
    pub body: BodyView,
}

impl RequestView {
    pub fn new(
        method: &str,
        url: &str,
        content_type: Option<&str>,
        body: &[u8],
    ) -> Result<RequestView, UrlError> {
        Ok(RequestView {
            method: method.to_ascii_uppercase(),
            url: ParsedUrl::parse(url)?,
            body: BodyView::from_bytes(content_type, body),
        })
    }

    /// A body-less request, mostly for tests and probes.
    pub fn get(url: &str) -> Result<RequestView, UrlError> {
        Self::new("GET", url, None, b"")
    }

    pub fn with_json(method: &str, url: &str, body: &serde_json::Value) -> Result<RequestView, UrlError> {
        let bytes = serde_json::to_vec(body).expect("json values serialize");
        Self::new(method, url, Some("application/json"), &bytes)
    }
}
