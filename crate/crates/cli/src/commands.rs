use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use cellgate_core::{compile as compile_table, parse_composite, LockoutConfig};
use cellgate_proxy::replay::{self, parse_trace, ReplayReport, ReplayTarget, Scenario};
use cellgate_proxy::tls::{write_ca, CertAuthority};
use cellgate_proxy::{DomainBundle, Mode, ProxyConfig};
use cellgate_select::bench::{check_labels, echo_provider, load_bundles};
use cellgate_select::bundle::{list_domains, load_dir, SITEMAP_FILE};
use cellgate_select::{
    classify_failures, confirm, fetch_bundle, parse_dataset, run_bench, BenchOptions, Bundle, BundleSource,
    ConfirmError, Provider, ProviderError, RemoteChat, SelectOptions, SelectionError, StubProvider, TaskSpec,
};
use serde_json::{json, Value as Json};

use crate::config::FileConfig;
use crate::{BenchArgs, CompileArgs, Failure, GenCaArgs, ReplayArgs, SelectArgs, ServeArgs, ValidateArgs};

fn bundle_dir(flag: Option<PathBuf>, file: &FileConfig) -> Result<PathBuf, Failure> {
    flag.or_else(|| file.bundle_dir.clone())
        .ok_or_else(|| Failure::Usage("--bundle-dir is required".into()))
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn read_json(path: &Path) -> Result<Json, Failure> {
    serde_json::from_slice(&read(path)?).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn composite_domain(doc: &Json, path: &Path) -> Result<String, Failure> {
    doc["domain"]
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| Failure::Invalid(format!("{}: composite has no domain", path.display())))
}

/// Resolves each composite against its domain's bundle under `root`.
fn session_bundles(root: &Path, composites: &[PathBuf]) -> Result<Vec<DomainBundle>, Failure> {
    composites
        .iter()
        .map(|path| {
            let bytes = read(path)?;
            let doc: Json = serde_json::from_slice(&bytes).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
            let domain = composite_domain(&doc, path)?;
            let b = fetch_bundle(&domain, &BundleSource::Dir(root.to_owned())).map_err(|e| Failure::Invalid(e.to_string()))?;
            let composite = parse_composite(&bytes, &b.policies)
                .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
            DomainBundle::new(b.sitemap, b.policies, composite).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn validate(a: ValidateArgs, file: &FileConfig) -> Result<(), Failure> {
    let root = bundle_dir(a.bundle_dir, file)?;
    let dirs: Vec<PathBuf> = if root.join(SITEMAP_FILE).is_file() {
        vec![root.clone()]
    } else {
        list_domains(&root)
            .map_err(|e| Failure::Invalid(format!("{}: {e}", root.display())))?
            .into_iter()
            .map(|d| root.join(d))
            .collect()
    };
    if dirs.is_empty() {
        return Err(Failure::Invalid(format!("no bundles under {}", root.display())));
    }
    let mut errors = 0;
    let mut loaded: BTreeMap<String, Bundle> = BTreeMap::new();
    for dir in &dirs {
        match load_dir(dir) {
            Ok(b) => {
                println!(
                    "ok     {}  {} actions, {} policies",
                    b.sitemap.domain,
                    b.sitemap.entries.len(),
                    b.policies.policies.len()
                );
                loaded.insert(b.sitemap.domain.clone(), b);
            }
            Err(e) => {
                errors += 1;
                println!("error  {}: {e}", dir.display());
            }
        }
    }
    for path in &a.composite {
        let outcome = read_json(path).and_then(|doc| {
            let domain = composite_domain(&doc, path)?;
            let b = loaded
                .get(&domain)
                .ok_or_else(|| Failure::Invalid(format!("no valid bundle for {domain}")))?;
            let c = parse_composite(&read(path)?, &b.policies).map_err(|e| Failure::Invalid(e.to_string()))?;
            compile_table(&b.sitemap, &b.policies, &c).map_err(|e| Failure::Invalid(e.to_string()))?;
            Ok(c.selected.len())
        });
        match outcome {
            Ok(n) => println!("ok     {}  {n} policies selected", path.display()),
            Err(e) => {
                errors += 1;
                println!("error  {}: {}", path.display(), e.message());
            }
        }
    }
    if errors > 0 {
        return Err(Failure::Invalid(format!("{errors} document(s) failed validation")));
    }
    Ok(())
}

pub fn compile(a: CompileArgs, file: &FileConfig) -> Result<(), Failure> {
    let root = bundle_dir(a.bundle_dir, file)?;
    let bundle = session_bundles(&root, std::slice::from_ref(&a.composite))?.remove(0);
    if a.dump {
        let text = serde_json::to_string_pretty(&bundle.table.dump()).expect("dump serializes");
        println!("{text}");
    } else {
        println!(
            "{}: {} rules, {} allowlist patterns",
            bundle.sitemap.domain,
            bundle.table.dump()["rules"].as_array().map_or(0, Vec::len),
            bundle.composite.allowlist.len()
        );
    }
    Ok(())
}

fn provider(stub: Option<PathBuf>, file: &FileConfig) -> Result<Box<dyn Provider>, Failure> {
    match stub.or_else(|| file.stub.clone()) {
        Some(p) => Ok(Box::new(StubProvider::from_file(&p).map_err(Failure::Usage)?)),
        None => match RemoteChat::from_env() {
            Ok(r) => Ok(Box::new(r)),
            Err(e) => Err(Failure::Usage(format!("{e}; pass --stub to use canned answers"))),
        },
    }
}

fn source(dir: Option<PathBuf>, base: Option<String>, file: &FileConfig) -> BundleSource {
    match (dir, base) {
        (Some(d), _) => BundleSource::Dir(d),
        (None, Some(b)) => BundleSource::WellKnown { base: b },
        (None, None) => match (&file.bundle_dir, &file.well_known_base) {
            (Some(d), _) => BundleSource::Dir(d.clone()),
            (None, Some(b)) => BundleSource::WellKnown { base: b.clone() },
            (None, None) => BundleSource::well_known(),
        },
    }
}

fn selection_failure(e: SelectionError) -> Failure {
    match e {
        SelectionError::Provider(ProviderError::Transport(_) | ProviderError::Response(_)) => Failure::Runtime(e.to_string()),
        SelectionError::Provider(ProviderError::NotConfigured(_) | ProviderError::NoFixture { .. }) => {
            Failure::Usage(e.to_string())
        }
        other => Failure::Invalid(other.to_string()),
    }
}

pub fn select(a: SelectArgs, file: &FileConfig) -> Result<(), Failure> {
    let provider = provider(a.stub, file)?;
    let src = source(a.bundle_dir, a.well_known_base, file);
    let task = TaskSpec {
        id: a.task_id,
        text: a.task,
    };
    let opts = SelectOptions {
        use_knowledge: !a.no_domain_knowledge,
    };
    let result = cellgate_select::select(&task, &src, provider.as_ref(), &opts).map_err(selection_failure)?;
    let stdin = std::io::stdin();
    let composites = confirm(&result, &mut stdin.lock(), &mut std::io::stderr(), a.yes).map_err(|e| match e {
        ConfirmError::Io(io) => Failure::Runtime(io.to_string()),
        other => Failure::Invalid(other.to_string()),
    })?;
    match a.out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
            for c in &composites {
                let path = dir.join(format!("{}.json", c.domain));
                std::fs::write(&path, c.to_json_pretty() + "\n")
                    .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
                println!("{}", path.display());
            }
        }
        None if composites.len() == 1 => println!("{}", composites[0].to_json_pretty()),
        None => {
            let all: Vec<Json> = composites.iter().map(|c| c.to_json()).collect();
            println!("{}", serde_json::to_string_pretty(&all).expect("serializes"));
        }
    }
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn parse_override(spec: &str) -> Result<(String, SocketAddr), Failure> {
    let (host, addr) = spec
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("upstream override `{spec}` is not HOST=ADDR")))?;
    let addr = addr
        .parse()
        .map_err(|e| Failure::Usage(format!("upstream override `{spec}`: {e}")))?;
    Ok((host.trim().to_ascii_lowercase(), addr))
}

fn random_token() -> String {
    rand::random::<[u8; 16]>().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn serve(a: ServeArgs, file: &FileConfig) -> Result<(), Failure> {
    let f = &file.serve;
    let listen: SocketAddr = a
        .listen
        .or_else(|| f.listen.clone())
        .unwrap_or_else(|| "127.0.0.1:8080".into())
        .parse()
        .map_err(|e| Failure::Usage(format!("--listen: {e}")))?;
    let mode: Mode = match a.mode.or_else(|| f.mode.clone()) {
        Some(m) => m.parse().map_err(Failure::Usage)?,
        None => Mode::Strict,
    };
    let (token, generated) = match a.token.or_else(|| f.token.clone()) {
        Some(t) => (t, false),
        None => (random_token(), true),
    };
    let mut config = ProxyConfig::new(listen, token.clone());
    config.mode = mode;
    config.audit_path = a.audit_log.or_else(|| f.audit_log.clone());
    config.lockout = LockoutConfig {
        enabled: a.lockout || f.lockout.unwrap_or(false),
        settle_timeout: a
            .settle_timeout_ms
            .or(f.settle_timeout_ms)
            .map(Duration::from_millis)
            .unwrap_or(LockoutConfig::default().settle_timeout),
    };
    let ca = match (a.ca.or_else(|| f.ca.clone()), a.ca_key.or_else(|| f.ca_key.clone())) {
        (Some(c), Some(k)) => Some(Arc::new(CertAuthority::load(&c, &k).map_err(|e| Failure::Invalid(e.to_string()))?)),
        (None, None) => None,
        _ => return Err(Failure::Usage("--ca and --ca-key go together".into())),
    };
    config.ca = ca;
    for (host, addr) in &f.upstream_overrides {
        let (h, a) = parse_override(&format!("{host}={addr}"))?;
        config.upstream_overrides.insert(h, a);
    }
    for spec in &a.upstream_override {
        let (h, a) = parse_override(spec)?;
        config.upstream_overrides.insert(h, a);
    }
    let composites = if a.composite.is_empty() { f.composites.clone() } else { a.composite };
    let bundles = if composites.is_empty() {
        Vec::new()
    } else {
        session_bundles(&bundle_dir(a.bundle_dir, file)?, &composites)?
    };
    let session = a.session.or_else(|| f.session.clone()).unwrap_or_else(|| "default".into());

    runtime()?.block_on(async move {
        let proxy = cellgate_proxy::start(config)
            .await
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        if !bundles.is_empty() {
            let domains: Vec<String> = bundles.iter().map(|b| b.sitemap.domain.clone()).collect();
            proxy.state.sessions.load(&session, bundles).map_err(Failure::Invalid)?;
            tracing::info!(%session, ?domains, "session loaded");
        }
        if generated {
            eprintln!("control token: {token}");
        }
        println!("listening on {} ({} mode)", proxy.addr, mode.as_str());
        let _ = std::io::stdout().flush();
        tokio::signal::ctrl_c().await.map_err(|e| Failure::Runtime(e.to_string()))?;
        proxy.shutdown().await;
        Ok(())
    })
}

pub fn bench(a: BenchArgs, file: &FileConfig) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.dataset).map_err(|e| Failure::Invalid(format!("{}: {e}", a.dataset.display())))?;
    let tasks = parse_dataset(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", a.dataset.display())))?;
    let src = source(a.bundle_dir, a.well_known_base, file);
    let bundles = load_bundles(&tasks, &src).map_err(Failure::Invalid)?;
    check_labels(&tasks, &bundles).map_err(|e| Failure::Invalid(e.to_string()))?;
    let provider: Box<dyn Provider> = if a.echo {
        Box::new(echo_provider(&tasks))
    } else {
        provider(a.stub, file)?
    };
    let opts = BenchOptions {
        domain_knowledge: !a.no_domain_knowledge,
        jobs: a.jobs,
    };
    let report = run_bench(&tasks, &bundles, provider.as_ref(), &opts);
    let doc = report.to_json_pretty() + "\n";
    if let Some(out) = &a.out {
        std::fs::write(out, &doc).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    }
    if a.json {
        print!("{doc}");
    } else {
        print!("{}", report.render_table());
    }
    if a.failures {
        for f in classify_failures(&report) {
            let tags: Vec<String> = f
                .tags
                .iter()
                .map(|t| serde_json::to_value(t).expect("tag serializes").as_str().unwrap_or("").to_owned())
                .collect();
            eprintln!("{}  {}  {}", f.id, tags.join(","), serde_json::to_string(&f.policies).expect("serializes"));
        }
    }
    Ok(())
}

pub fn replay(a: ReplayArgs, file: &FileConfig) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&a.trace).map_err(|e| Failure::Invalid(format!("{}: {e}", a.trace.display())))?;
    let steps = parse_trace(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", a.trace.display())))?;
    let name = a
        .trace
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into());

    let report: ReplayReport = match a.proxy {
        Some(proxy) => {
            let token = a
                .token
                .ok_or_else(|| Failure::Usage("--token is required with --proxy".into()))?;
            let load = if a.composite.is_empty() {
                None
            } else {
                let root = bundle_dir(a.bundle_dir, file)?;
                session_bundles(&root, &a.composite)?;
                let mut docs = Vec::new();
                for path in &a.composite {
                    let composite = read_json(path)?;
                    let dir = root.join(composite_domain(&composite, path)?);
                    docs.push(json!({
                        "sitemap": read_json(&dir.join(SITEMAP_FILE))?,
                        "policies": read_json(&dir.join(cellgate_select::bundle::POLICIES_FILE))?,
                        "composite": composite,
                    }));
                }
                Some(json!({"session_id": a.session, "bundles": docs}))
            };
            let target = ReplayTarget {
                proxy,
                token: token.clone(),
                session_id: a.session.clone(),
            };
            runtime()?.block_on(async {
                if let Some(body) = &load {
                    let (status, reply) = replay::api_call(proxy, &token, "POST", "/ctl/session", Some(body))
                        .await
                        .map_err(Failure::Runtime)?;
                    if !status.is_success() {
                        return Err(Failure::Invalid(format!("session load refused ({status}): {reply}")));
                    }
                }
                Ok(ReplayReport {
                    scenario: name.clone(),
                    baseline: false,
                    steps: replay::replay(&steps, &target).await,
                    upstream_arrivals: 0,
                })
            })?
        }
        None => {
            if a.composite.is_empty() {
                return Err(Failure::Usage("--composite is required without --proxy".into()));
            }
            let bundles = session_bundles(&bundle_dir(a.bundle_dir, file)?, &a.composite)?;
            let scenario = Scenario { name, bundles, steps };
            runtime()?
                .block_on(replay::run_hermetic(&scenario, a.baseline))
                .map_err(Failure::Runtime)?
        }
    };
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!(
            "{} of {} steps did not match",
            report.steps.iter().filter(|s| !s.passed).count(),
            report.steps.len()
        )))
    }
}

pub fn gen_ca(a: GenCaArgs) -> Result<(), Failure> {
    write_ca(&a.cert, &a.key).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("wrote {} and {}", a.cert.display(), a.key.display());
    Ok(())
}
