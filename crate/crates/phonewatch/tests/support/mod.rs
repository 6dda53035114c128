//! Shared by the API tests and the acceptance runner: the OpenAPI contract
//! checker, a seeded store, and a two-client review fuzz.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Barrier, Mutex};
use std::thread::JoinHandle;

use axum::body::{Body, Bytes};
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use image::{Rgb, RgbImage};
use phonewatch::server::{self, ApiConfig};
use phonewatch::store::{Decision, NewViolation, Store};
use phonewatch::timestamp::Timestamp;
use phonewatch_core::detect::ClassLabel;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tower::ServiceExt;

pub const BASE_MS: i64 = 1_714_550_400_000; // 2024-05-01T08:00:00Z

pub fn ts(offset_ms: i64) -> Timestamp {
    Timestamp::from_millis(BASE_MS + offset_ms)
}

pub struct Contract {
    doc: Value,
}

impl Contract {
    pub fn load() -> Self {
        let text = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/openapi.json"));
        Contract {
            doc: serde_json::from_str(text).expect("openapi.json parses"),
        }
    }

    /// `(METHOD, path template)` of every documented operation.
    pub fn operations(&self) -> BTreeSet<(String, String)> {
        let mut out = BTreeSet::new();
        for (path, item) in self.doc["paths"].as_object().unwrap() {
            for method in item.as_object().unwrap().keys() {
                out.insert((method.to_uppercase(), path.clone()));
            }
        }
        out
    }

    fn resolve<'a>(&'a self, v: &'a Value) -> &'a Value {
        match v.get("$ref").and_then(Value::as_str) {
            Some(r) => self
                .doc
                .pointer(r.trim_start_matches('#'))
                .unwrap_or_else(|| panic!("dangling {r}")),
            None => v,
        }
    }

    pub fn validate_schema(&self, schema: &Value, instance: &Value) -> Result<(), String> {
        let mut wrapped = schema.clone();
        let obj = wrapped.as_object_mut().unwrap();
        obj.insert(
            "$schema".into(),
            json!("https://json-schema.org/draft/2020-12/schema"),
        );
        obj.insert("components".into(), self.doc["components"].clone());
        let validator = jsonschema::validator_for(&wrapped).map_err(|e| e.to_string())?;
        let errors: Vec<String> = validator
            .iter_errors(instance)
            .map(|e| format!("{} at {}", e, e.instance_path()))
            .collect();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors.join("; "))
        }
    }

    /// Checks a response against the documented status, content type and
    /// body schema of the operation.
    pub fn check(
        &self,
        method: &str,
        template: &str,
        status: u16,
        content_type: Option<&str>,
        body: &[u8],
    ) -> Result<(), String> {
        let op = &self.doc["paths"][template][method.to_lowercase()];
        if op.is_null() {
            return Err(format!("{method} {template} is not documented"));
        }
        let resp = op["responses"]
            .get(status.to_string())
            .ok_or_else(|| format!("{method} {template}: status {status} is not documented"))?;
        let resp = self.resolve(resp);
        let Some(content) = resp.get("content").and_then(Value::as_object) else {
            return if body.is_empty() {
                Ok(())
            } else {
                Err(format!("{method} {template} {status}: undocumented body"))
            };
        };
        let ct = content_type.unwrap_or("");
        let (media, spec) = content
            .iter()
            .find(|(m, _)| ct.starts_with(m.as_str()))
            .ok_or_else(|| format!("{method} {template} {status}: content type `{ct}` not documented"))?;
        match media.as_str() {
            "application/json" => {
                let v: Value = serde_json::from_slice(body)
                    .map_err(|e| format!("{method} {template} {status}: body is not JSON: {e}"))?;
                self.validate_schema(&spec["schema"], &v)
                    .map_err(|e| format!("{method} {template} {status}: {e}"))
            }
            "image/png" if body.starts_with(b"\x89PNG\r\n\x1a\n") => Ok(()),
            other => Err(format!("{method} {template} {status}: body is not {other}")),
        }
    }
}

pub fn snapshot_image(i: usize) -> RgbImage {
    RgbImage::from_pixel(16, 9, Rgb([(i * 37 % 256) as u8, 90, 200]))
}

/// A store with `n` pending violations on streams `cam-a`/`cam-b`, ten
/// minutes apart (pairs share a `first_seen` to exercise tie ordering), and
/// `vehicles` counted plates on `cam-a`.
pub fn seed(dir: &Path, n: usize, vehicles: usize) -> Store {
    let store = Store::open(dir).unwrap();
    store.register_stream("cam-a", ClassLabel::licence_plate()).unwrap();
    store.register_stream("cam-b", ClassLabel::windscreen()).unwrap();
    for i in 0..n {
        let at = ts((i / 2) as i64 * 600_000);
        let stream = if i % 2 == 0 { "cam-a" } else { "cam-b" };
        store
            .create_violation(
                NewViolation {
                    stream_id: stream.into(),
                    phone_track_id: 10 + i as u64,
                    windscreen_track_id: (stream == "cam-b").then_some(100 + i as u64),
                    first_seen: at,
                    last_seen: at.plus(chrono::Duration::seconds(3)),
                    frame_index_first: 25 * i as u64,
                    max_score: 0.5 + (i % 5) as f64 / 10.0,
                },
                Some(&snapshot_image(i)),
            )
            .unwrap();
    }
    for v in 0..vehicles {
        store
            .record_vehicle("cam-a", 1000 + v as u64, ClassLabel::licence_plate(), ts(v as i64 * 60_000))
            .unwrap();
    }
    store
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| {
            panic!("{}: {e}: {}", self.status, String::from_utf8_lossy(&self.body))
        })
    }

    pub fn content_type(&self) -> Option<&str> {
        self.headers.get("content-type").and_then(|v| v.to_str().ok())
    }
}

/// One in-process request.
pub async fn call(router: &Router, method: Method, uri: &str, body: Option<&str>, headers: &[(&str, &str)]) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    let (parts, body) = resp.into_parts();
    Reply {
        status: parts.status,
        headers: parts.headers,
        body: body.collect().await.unwrap().to_bytes(),
    }
}

/// The API served on an ephemeral local port until dropped.
pub struct Running {
    pub base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn spawn_server(store: Store, api: ApiConfig) -> Running {
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            server::serve(listener, server::router(store, &api), async {
                let _ = stop_rx.await;
            })
            .await
            .unwrap();
        });
    });
    let addr = addr_rx.recv().unwrap();
    Running {
        base: format!("http://{addr}/api/v1"),
        stop: Some(stop_tx),
        thread: Some(thread),
    }
}

#[derive(Debug, Clone)]
struct ReviewCall {
    id: u64,
    decision: &'static str,
    note: String,
    status: u16,
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub operations: usize,
    pub reviews_applied: usize,
    pub conflicts: usize,
    pub not_found: usize,
    pub page_walks: usize,
}

fn get(client: &reqwest::blocking::Client, url: &str) -> Result<(u16, Option<String>, Vec<u8>), String> {
    let r = client.get(url).send().map_err(|e| e.to_string())?;
    let status = r.status().as_u16();
    let ct = r
        .headers()
        .get("content-type")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    Ok((status, ct, r.bytes().map_err(|e| e.to_string())?.to_vec()))
}

/// Two clients interleave `operations` random calls against one server
/// over `n` seeded records (ids 1..=n). Checks every response against the
/// contract, that full page walks are complete and disjoint, that each
/// record accepts exactly one review, and that conflicts only follow an
/// accepted review.
pub fn two_client_fuzz(dir: &Path, n: u64, operations: usize, seed_value: u64) -> Result<FuzzOutcome, String> {
    let store = seed(dir, n as usize, 4);
    let server = spawn_server(store.clone(), ApiConfig::default());
    let contract = Arc::new(Contract::load());
    let reviews = Arc::new(Mutex::new(Vec::<ReviewCall>::new()));
    let walks = Arc::new(Mutex::new(0usize));
    let barrier = Arc::new(Barrier::new(2));
    let per_client = operations / 2;

    let handles: Vec<_> = (0..2u64)
        .map(|client| {
            let base = server.base.clone();
            let contract = contract.clone();
            let reviews = reviews.clone();
            let walks = walks.clone();
            let barrier = barrier.clone();
            let ops = per_client + if client == 0 { operations % 2 } else { 0 };
            std::thread::spawn(move || -> Result<(), String> {
                let http = reqwest::blocking::Client::new();
                let mut rng = rand::rngs::StdRng::seed_from_u64(seed_value * 31 + client);
                barrier.wait();
                for k in 0..ops {
                    let roll = rng.random_range(0..100);
                    if roll < 40 {
                        // ids past n exercise 404
                        let id = rng.random_range(1..=n + 2);
                        let decision = if rng.random_bool(0.5) { "confirmed" } else { "dismissed" };
                        let note = format!("client {client} op {k}");
                        let r = http
                            .post(format!("{base}/violations/{id}/review"))
                            .header("content-type", "application/json")
                            .body(json!({"decision": decision, "note": note}).to_string())
                            .send()
                            .map_err(|e| e.to_string())?;
                        let status = r.status().as_u16();
                        let ct = r.headers().get("content-type").and_then(|v| v.to_str().ok()).map(str::to_string);
                        let body = r.bytes().map_err(|e| e.to_string())?;
                        contract.check("POST", "/violations/{id}/review", status, ct.as_deref(), &body)?;
                        if status == 200 {
                            let v: Value = serde_json::from_slice(&body).unwrap();
                            if v["review_status"] != decision || v["reviewer_note"] != note.as_str() || v["revision"] != 2 {
                                return Err(format!("review of {id} returned {v}"));
                            }
                        }
                        reviews.lock().unwrap().push(ReviewCall { id, decision, note, status });
                    } else if roll < 65 {
                        let size = rng.random_range(1..=7);
                        let mut seen = Vec::new();
                        let mut page = 1;
                        loop {
                            let (status, ct, body) = get(&http, &format!("{base}/violations?page={page}&page_size={size}"))?;
                            contract.check("GET", "/violations", status, ct.as_deref(), &body)?;
                            let v: Value = serde_json::from_slice(&body).unwrap();
                            if v["total"] != n {
                                return Err(format!("total {} != {n}", v["total"]));
                            }
                            seen.extend(v["items"].as_array().unwrap().iter().map(|r| r["violation_id"].as_u64().unwrap()));
                            if page >= v["total_pages"].as_u64().unwrap() {
                                break;
                            }
                            page += 1;
                        }
                        let unique: BTreeSet<u64> = seen.iter().copied().collect();
                        if unique.len() != seen.len() || unique != (1..=n).collect() {
                            return Err(format!("page walk of size {size} saw {seen:?}"));
                        }
                        *walks.lock().unwrap() += 1;
                    } else if roll < 80 {
                        let status = ["pending", "confirmed", "dismissed"][rng.random_range(0..3)];
                        let (code, ct, body) = get(&http, &format!("{base}/violations?status={status}&page_size=500"))?;
                        contract.check("GET", "/violations", code, ct.as_deref(), &body)?;
                        let v: Value = serde_json::from_slice(&body).unwrap();
                        if let Some(bad) = v["items"].as_array().unwrap().iter().find(|r| r["review_status"] != status) {
                            return Err(format!("status={status} listed {bad}"));
                        }
                    } else if roll < 90 {
                        let id = rng.random_range(1..=n + 1);
                        let (code, ct, body) = get(&http, &format!("{base}/violations/{id}/snapshot"))?;
                        contract.check("GET", "/violations/{id}/snapshot", code, ct.as_deref(), &body)?;
                        if (code == 200) != (id <= n) {
                            return Err(format!("snapshot {id}: {code}"));
                        }
                    } else {
                        let url = format!("{base}/stats?from={}&to={}&bucket=hour", ts(0), ts(86_400_000));
                        let (code, ct, body) = get(&http, &url)?;
                        contract.check("GET", "/stats", code, ct.as_deref(), &body)?;
                        let v: Value = serde_json::from_slice(&body).unwrap();
                        let s = &v["summary"];
                        let sum = ["violations_pending", "violations_confirmed", "violations_dismissed"]
                            .iter()
                            .map(|k| s[*k].as_u64().unwrap())
                            .sum::<u64>();
                        if s["violations_total"] != n || sum != n {
                            return Err(format!("stats summary {s}"));
                        }
                    }
                }
                Ok(())
            })
        })
        .collect();
    for h in handles {
        h.join().map_err(|_| "client panicked".to_string())??;
    }

    let reviews = reviews.lock().unwrap().clone();
    let mut accepted: BTreeMap<u64, &ReviewCall> = BTreeMap::new();
    let mut outcome = FuzzOutcome {
        operations,
        page_walks: *walks.lock().unwrap(),
        ..Default::default()
    };
    for r in &reviews {
        match r.status {
            200 => {
                if accepted.insert(r.id, r).is_some() {
                    return Err(format!("violation {} accepted two reviews", r.id));
                }
                outcome.reviews_applied += 1;
            }
            409 => outcome.conflicts += 1,
            404 if r.id > n => outcome.not_found += 1,
            s => return Err(format!("review of {} answered {s}", r.id)),
        }
    }
    for r in reviews.iter().filter(|r| r.status == 409) {
        if !accepted.contains_key(&r.id) {
            return Err(format!("409 on {} which was never reviewed", r.id));
        }
    }
    let state = store.state();
    for id in 1..=n {
        let rec = state.get(id).unwrap();
        match accepted.get(&id) {
            Some(r) => {
                let want = if r.decision == "confirmed" { "confirmed" } else { "dismissed" };
                if rec.review_status.to_string() != want || rec.reviewer_note.as_deref() != Some(r.note.as_str()) {
                    return Err(format!("record {id} ended as {rec:?}, accepted {r:?}"));
                }
            }
            None => {
                if rec.review_status.to_string() != "pending" || rec.revision != 1 {
                    return Err(format!("unreviewed record {id} changed: {rec:?}"));
                }
            }
        }
    }
    if state.audit().len() != accepted.len() {
        return Err(format!("{} audit entries for {} accepted reviews", state.audit().len(), accepted.len()));
    }
    let audited: BTreeSet<(u64, Decision)> = state.audit().iter().map(|a| (a.violation_id, a.decision)).collect();
    for (id, r) in &accepted {
        let d = if r.decision == "confirmed" { Decision::Confirmed } else { Decision::Dismissed };
        if !audited.contains(&(*id, d)) {
            return Err(format!("accepted review of {id} missing from audit trail"));
        }
    }
    drop(server);
    // Replay agrees with the live state.
    let reopened = Store::open(dir).map_err(|e| e.to_string())?;
    if reopened.state().canonical() != store.state().canonical() {
        return Err("replayed state differs from live state".into());
    }
    Ok(outcome)
}
