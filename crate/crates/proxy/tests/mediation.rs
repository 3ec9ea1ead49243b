use std::path::PathBuf;
use std::sync::Arc;

use cellgate_proxy::mock_upstream::MockUpstream;
use cellgate_proxy::tls::{generate_ca, CertAuthority};
use cellgate_proxy::{start, DomainBundle, Mode, ProxyConfig, RunningProxy, TOKEN_HEADER, VERDICT_HEADER};
use reqwest::StatusCode;
use serde_json::{json, Value as Json};
use tokio::io::{AsyncReadExt, AsyncWriteExt};

const TOKEN: &str = "test-token";

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn read_json(path: PathBuf) -> Json {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn docs(domain: &str, composite: &str) -> Json {
    let dir = fixtures().join("bundles").join(domain);
    json!({
        "sitemap": read_json(dir.join("agent-sitemap.json")),
        "policies": read_json(dir.join("agent-policies.json")),
        "composite": read_json(fixtures().join("composites").join(composite)),
    })
}

fn bundle(domain: &str, composite: &str) -> DomainBundle {
    let d = docs(domain, composite);
    DomainBundle::from_documents(&d["sitemap"], &d["policies"], &d["composite"]).unwrap()
}

async fn proxy(mode: Mode, ca: Option<Arc<CertAuthority>>, mock: &MockUpstream) -> RunningProxy {
    let mut config = ProxyConfig::new("127.0.0.1:0".parse().unwrap(), TOKEN);
    config.mode = mode;
    config.ca = ca;
    config.upstream_overrides.insert("*".into(), mock.addr);
    start(config).await.unwrap()
}

fn through(p: &RunningProxy, session: &str, root_pem: Option<&str>) -> reqwest::Client {
    let mut b = reqwest::Client::builder()
        .proxy(reqwest::Proxy::all(format!("http://{}", p.addr)).unwrap().basic_auth(session, "x"));
    if let Some(pem) = root_pem {
        b = b
            .add_root_certificate(reqwest::Certificate::from_pem(pem.as_bytes()).unwrap())
            .tls_built_in_root_certs(false);
    }
    b.build().unwrap()
}

fn verdict(r: &reqwest::Response) -> String {
    r.headers()
        .get(VERDICT_HEADER)
        .map(|v| v.to_str().unwrap().to_owned())
        .unwrap_or_default()
}

#[tokio::test(flavor = "multi_thread")]
async fn intercepted_tls_is_mediated() {
    let mock = MockUpstream::start().await.unwrap();
    let (cert, key) = generate_ca().unwrap();
    let ca = Arc::new(CertAuthority::from_pem(&cert, &key).unwrap());
    let p = proxy(Mode::Strict, Some(ca), &mock).await;
    let mut d = docs("gitlab.com", "gitlab-comment.json");
    d["composite"]["policies"] = json!([{"name": "comment_issue"}, {"name": "read_only_access_tokens"}]);
    let b = DomainBundle::from_documents(&d["sitemap"], &d["policies"], &d["composite"]).unwrap();
    p.state.sessions.load("agent-1", vec![b]).unwrap();
    let c = through(&p, "agent-1", Some(&cert));

    let r = c
        .post("https://gitlab.com/acme/webapp/-/issues/1/notes")
        .json(&json!({"note": {"body": "hi"}}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(verdict(&r), "allow");
    let echo: Json = r.json().await.unwrap();
    assert_eq!(echo["echo"]["host"], "gitlab.com");
    assert_eq!(echo["echo"]["path"], "/acme/webapp/-/issues/1/notes");

    let r = c
        .post("https://gitlab.com/-/user_settings/personal_access_tokens")
        .json(&json!({"personal_access_token": {"name": "t", "scopes": ["api"]}}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    assert_eq!(verdict(&r), "deny");

    let r = c
        .post("https://gitlab.com/-/user_settings/personal_access_tokens")
        .form(&[("personal_access_token[name]", "t"), ("personal_access_token[scopes][]", "read_registry")])
        .send()
        .await
        .unwrap();
    assert_eq!(verdict(&r), "allow");

    assert!(c.get("https://attacker.example/x").send().await.is_err());

    let r = c.get("https://assets.gitlab-static.net/app.css").send().await.unwrap();
    assert_eq!(verdict(&r), "allow");

    assert_eq!(mock.arrivals().len(), 3);
    let records = p.state.audit.records("agent-1");
    let connects = records.iter().filter(|r| r.method == "CONNECT").count();
    let mediated: Vec<_> = records.iter().filter(|r| r.method != "CONNECT").collect();
    assert_eq!(connects, 1, "{records:?}");
    assert_eq!(mediated.len(), 4, "{records:?}");
    assert_eq!(mediated[1].blocked_by.as_deref(), Some("read_only_access_tokens"));
    assert!(mediated.iter().all(|r| r.latency_us < 1_000_000));
    p.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn strict_without_ca() {
    let mock = MockUpstream::start().await.unwrap();
    let p = proxy(Mode::Strict, None, &mock).await;
    p.state.sessions.load("default", vec![bundle("gitlab.com", "gitlab-comment.json")]).unwrap();

    let connect = |host: &'static str| {
        let addr = p.addr;
        async move {
            let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
            s.write_all(format!("CONNECT {host}:443 HTTP/1.1\r\nHost: {host}:443\r\n\r\n").as_bytes())
                .await
                .unwrap();
            let mut buf = vec![0u8; 1024];
            let n = s.read(&mut buf).await.unwrap();
            (s, String::from_utf8_lossy(&buf[..n]).into_owned())
        }
    };
    // a policed domain cannot be inspected, so it is not reachable at all
    let (_, head) = connect("gitlab.com").await;
    assert!(head.starts_with("HTTP/1.1 403"), "{head}");
    assert!(head.contains("refused"));

    // an allowlisted host is passed through untouched
    let (mut s, head) = connect("assets.gitlab-static.net").await;
    assert!(head.starts_with("HTTP/1.1 200"), "{head}");
    s.write_all(b"GET /raw.css HTTP/1.1\r\nHost: assets.gitlab-static.net\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).await.unwrap();
    assert!(out.contains("/raw.css"), "{out}");

    let plain = through(&p, "default", None);
    let r = plain.get("http://tracker.example/pixel").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    assert_eq!(verdict(&r), "refused");

    // dropping to cleartext does not dodge the policed domain's rules
    let r = plain.post("http://gitlab.com/acme/webapp/-/issues").send().await.unwrap();
    assert_eq!(verdict(&r), "deny");
    let r = plain.post("http://gitlab.com/acme/webapp/-/issues/3/notes").send().await.unwrap();
    assert_eq!(verdict(&r), "allow");

    let routes: Vec<String> = p.state.audit.records("default").into_iter().map(|r| r.route).collect();
    assert_eq!(routes, ["refused", "tunneled", "refused", "matched", "matched"]);
    p.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn observe_mode_forwards_but_records() {
    let mock = MockUpstream::start().await.unwrap();
    let (cert, key) = generate_ca().unwrap();
    let ca = Arc::new(CertAuthority::from_pem(&cert, &key).unwrap());
    let p = proxy(Mode::Observe, Some(ca), &mock).await;
    p.state.sessions.load("default", vec![bundle("gitlab.com", "gitlab-comment.json")]).unwrap();
    let c = through(&p, "default", Some(&cert));
    let r = c.get("http://tracker.example/pixel").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    // policies still apply to the loaded domain
    let r = c.post("https://gitlab.com/acme/webapp/-/issues").send().await.unwrap();
    assert_eq!(verdict(&r), "deny");
    let routes: Vec<String> = p.state.audit.records("default").into_iter().map(|r| r.route).collect();
    assert_eq!(routes, ["pass_through", "matched"], "{routes:?}");
    assert_eq!(mock.arrivals().len(), 1);
    p.shutdown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn control_api() {
    let mock = MockUpstream::start().await.unwrap();
    let p = proxy(Mode::Strict, None, &mock).await;
    let base = format!("http://{}", p.addr);
    let c = reqwest::Client::new();

    let r = c.get(format!("{base}/healthz")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let r = c.get(format!("{base}/ctl/records?session_id=s")).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let r = c
        .get(format!("{base}/ctl/records?session_id=s"))
        .header(TOKEN_HEADER, "wrong")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);

    let call = |method: reqwest::Method, path: &str, body: Option<Json>| {
        let mut rb = c.request(method, format!("{base}{path}")).header(TOKEN_HEADER, TOKEN);
        if let Some(b) = body {
            rb = rb.json(&b);
        }
        rb.send()
    };

    let load = json!({"session_id": "s", "bundles": [docs("amazon.com", "amazon-cart-50.json")]});
    let r = call(reqwest::Method::POST, "/ctl/session", Some(load.clone())).await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let gen = p.state.sessions.get("s").unwrap().generation;

    let mut bad = load.clone();
    bad["bundles"][0]["composite"]["policies"][1]["params"]["maxAmount"] = json!("fifty");
    let r = call(reqwest::Method::POST, "/ctl/session", Some(bad)).await.unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(p.state.sessions.get("s").unwrap().generation, gen);

    let report = |seq: u64, value: Json, session: &str| {
        json!({"session_id": session, "arg_name": "totalAmount", "value": value, "value_type": "number",
               "source_url": "https://www.amazon.com/checkout/p/x/spc", "seq": seq})
    };
    let r = call(reqwest::Method::POST, "/ctx/report", Some(report(1, json!(10), "nobody"))).await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let r = call(reqwest::Method::POST, "/ctx/report", Some(report(2, json!("12.50"), "s"))).await.unwrap();
    assert_eq!(r.json::<Json>().await.unwrap(), json!({"accepted": true}));
    // a report older than the newest one is dropped
    let r = call(reqwest::Method::POST, "/ctx/report", Some(report(1, json!(99), "s"))).await.unwrap();
    assert_eq!(r.json::<Json>().await.unwrap(), json!({"accepted": false}));
    let r = call(reqwest::Method::POST, "/ctx/report", Some(report(3, json!("lots"), "s"))).await.unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let r = call(reqwest::Method::GET, "/ctx/settled?session_id=s&wait_ms=50", None).await.unwrap();
    assert_eq!(r.json::<Json>().await.unwrap()["settled"], json!(true));

    let r = call(reqwest::Method::DELETE, "/ctl/session?session_id=s", None).await.unwrap();
    assert_eq!(r.json::<Json>().await.unwrap(), json!({"removed": true}));
    assert!(p.state.sessions.get("s").is_none());
    p.shutdown().await;
}
