mod support;

use std::collections::BTreeSet;

use axum::http::{Method, StatusCode};
use axum::Router;
use phonewatch::server::{router, ApiConfig};
use phonewatch::store::{Decision, NewViolation, Store};
use phonewatch_core::detect::ClassLabel;
use serde_json::Value;
use support::{call, seed, ts, Contract, Reply};

/// Calls the API and checks the reply against the contract.
struct Client {
    router: Router,
    contract: Contract,
    exercised: BTreeSet<(String, String, u16)>,
}

impl Client {
    fn new(store: Store, api: ApiConfig) -> Self {
        Client {
            router: router(store, &api),
            contract: Contract::load(),
            exercised: BTreeSet::new(),
        }
    }

    async fn send(
        &mut self,
        method: Method,
        template: &str,
        uri: &str,
        body: Option<&str>,
        headers: &[(&str, &str)],
    ) -> Reply {
        let r = call(&self.router, method.clone(), &format!("/api/v1{uri}"), body, headers).await;
        self.contract
            .check(method.as_str(), template, r.status.as_u16(), r.content_type(), &r.body)
            .unwrap_or_else(|e| panic!("{uri}: {e}\n{}", String::from_utf8_lossy(&r.body)));
        self.exercised
            .insert((method.to_string(), template.to_string(), r.status.as_u16()));
        r
    }

    async fn get(&mut self, template: &str, uri: &str) -> Reply {
        self.send(Method::GET, template, uri, None, &[]).await
    }

    async fn review(&mut self, id: &str, body: &str) -> Reply {
        self.send(
            Method::POST,
            "/violations/{id}/review",
            &format!("/violations/{id}/review"),
            Some(body),
            &[],
        )
        .await
    }
}

fn ids(page: &Value) -> Vec<u64> {
    page["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["violation_id"].as_u64().unwrap())
        .collect()
}

#[tokio::test]
async fn every_documented_operation_honours_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let store = seed(dir.path(), 5, 10);
    // a record whose snapshot is still pending
    store
        .create_violation(
            NewViolation {
                stream_id: "cam-a".into(),
                phone_track_id: 99,
                windscreen_track_id: None,
                first_seen: ts(0),
                last_seen: ts(0),
                frame_index_first: 0,
                max_score: 0.9,
            },
            None,
        )
        .unwrap();
    let mut c = Client::new(store, ApiConfig::default());
    let window = format!("from={}&to={}", ts(0), ts(86_400_000));

    assert_eq!(c.get("/violations", "/violations").await.status, StatusCode::OK);
    assert_eq!(c.get("/violations", "/violations?page=0").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(c.get("/violations/{id}", "/violations/1").await.status, StatusCode::OK);
    assert_eq!(c.get("/violations/{id}", "/violations/x").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(c.get("/violations/{id}", "/violations/77").await.status, StatusCode::NOT_FOUND);
    let snap = "/violations/{id}/snapshot";
    let ok = c.get(snap, "/violations/1/snapshot").await;
    assert_eq!(ok.status, StatusCode::OK);
    let etag = ok.headers["etag"].to_str().unwrap().to_string();
    let again = c
        .send(Method::GET, snap, "/violations/1/snapshot", None, &[("if-none-match", &etag)])
        .await;
    assert_eq!(again.status, StatusCode::NOT_MODIFIED);
    assert_eq!(c.get(snap, "/violations/1/snapshot?rev=x").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(c.get(snap, "/violations/77/snapshot").await.status, StatusCode::NOT_FOUND);
    assert_eq!(c.get(snap, "/violations/6/snapshot").await.status, StatusCode::CONFLICT);
    assert_eq!(c.review("1", r#"{"decision":"confirmed"}"#).await.status, StatusCode::OK);
    assert_eq!(c.review("1", r#"{"decision":"dismissed"}"#).await.status, StatusCode::CONFLICT);
    assert_eq!(c.review("2", r#"{"decision":"maybe"}"#).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(c.review("77", r#"{"decision":"confirmed"}"#).await.status, StatusCode::NOT_FOUND);
    assert_eq!(c.get("/stats", &format!("/stats?{window}")).await.status, StatusCode::OK);
    assert_eq!(c.get("/stats", "/stats").await.status, StatusCode::BAD_REQUEST);
    let vehicles = "/streams/{stream_id}/vehicles";
    assert_eq!(c.get(vehicles, &format!("/streams/cam-a/vehicles?{window}")).await.status, StatusCode::OK);
    assert_eq!(c.get(vehicles, &format!("/streams/nope/vehicles?{window}")).await.status, StatusCode::NOT_FOUND);
    assert_eq!(c.get(vehicles, "/streams/cam-a/vehicles?from=x").await.status, StatusCode::BAD_REQUEST);

    let mut authed = Client::new(Store::open(dir.path()).unwrap(), ApiConfig {
        token: Some("t0k".into()),
        cors_allow: vec![],
    });
    for (m, template, uri) in [
        ("GET", "/violations", "/violations".to_string()),
        ("GET", "/violations/{id}", "/violations/1".to_string()),
        ("GET", snap, "/violations/1/snapshot".to_string()),
        ("POST", "/violations/{id}/review", "/violations/2/review".to_string()),
        ("GET", "/stats", format!("/stats?{window}")),
        ("GET", vehicles, format!("/streams/cam-a/vehicles?{window}")),
    ] {
        let method = Method::from_bytes(m.as_bytes()).unwrap();
        let body = (m == "POST").then_some(r#"{"decision":"confirmed"}"#);
        let r = authed.send(method, template, &uri, body, &[]).await;
        assert_eq!(r.status, StatusCode::UNAUTHORIZED, "{uri}");
        assert_eq!(r.headers["www-authenticate"], "Bearer");
    }
    c.exercised.extend(authed.exercised);

    // every documented (operation, status) pair was produced
    let contract = Contract::load();
    let exercised_ops: BTreeSet<(String, String)> =
        c.exercised.iter().map(|(m, p, _)| (m.clone(), p.clone())).collect();
    assert_eq!(exercised_ops, contract.operations());
}

#[tokio::test]
async fn status_filter_and_page_law() {
    let dir = tempfile::tempdir().unwrap();
    let store = seed(dir.path(), 5, 0);
    for (id, d) in [(1, Decision::Confirmed), (2, Decision::Confirmed), (3, Decision::Dismissed)] {
        store.review(id, d, None).unwrap();
    }
    let mut c = Client::new(store, ApiConfig::default());
    let pending = c.get("/violations", "/violations?status=pending").await.json();
    assert_eq!(ids(&pending), vec![5, 4]);
    assert_eq!(pending["total"], 2);

    let all = ids(&c.get("/violations", "/violations?page_size=500").await.json());
    // first_seen descending, ties by descending id (records pair up on first_seen)
    assert_eq!(all, vec![5, 4, 3, 2, 1]);

    let cam_a = c.get("/violations", "/violations?stream_id=cam-a&page_size=1").await.json();
    assert_eq!(cam_a["total"], 3);
    assert_eq!(cam_a["total_pages"], 3);
    let mut walked = Vec::new();
    for page in 1..=3 {
        let p = c.get("/violations", &format!("/violations?stream_id=cam-a&page_size=1&page={page}")).await.json();
        assert_eq!(p["items"].as_array().unwrap().len(), 1);
        walked.extend(ids(&p));
    }
    assert_eq!(walked, vec![5, 3, 1]);
    let past = c.get("/violations", "/violations?stream_id=cam-a&page_size=1&page=4").await.json();
    assert!(ids(&past).is_empty());

    let window = c
        .get("/violations", &format!("/violations?from={}&to={}", ts(600_000), ts(1_200_000)))
        .await
        .json();
    assert_eq!(ids(&window), vec![4, 3]);
}

#[tokio::test]
async fn malformed_queries_are_400() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::new(seed(dir.path(), 2, 0), ApiConfig::default());
    for uri in [
        format!("/violations?from={}&to={}", ts(10), ts(0)),
        "/violations?status=open".to_string(),
        "/violations?page_size=0".to_string(),
        "/violations?page_size=501".to_string(),
        "/violations?page=-1".to_string(),
        "/violations?from=yesterday".to_string(),
        "/violations?sort=asc".to_string(),
    ] {
        let r = c.get("/violations", &uri).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{uri}");
        assert_eq!(r.json()["error"]["code"], "bad_request");
    }
    for uri in [
        format!("/stats?from={}&to={}", ts(10), ts(0)),
        format!("/stats?from={}&to={}&bucket=week", ts(0), ts(10)),
        format!("/stats?from={}", ts(0)),
        // more buckets than allowed
        format!("/stats?from={}&to={}", ts(0), ts(20_000 * 3_600_000)),
    ] {
        assert_eq!(c.get("/stats", &uri).await.status, StatusCode::BAD_REQUEST, "{uri}");
    }
    for body in ["", "{", r#"{"note":"x"}"#, r#"{"decision":"confirmed","extra":1}"#, r#"{"decision":true}"#] {
        let r = c.review("1", body).await;
        assert_eq!(r.status, StatusCode::BAD_REQUEST, "{body}");
    }
}

#[tokio::test]
async fn stats_counts_and_buckets() {
    let dir = tempfile::tempdir().unwrap();
    // 3 violations (ids 1..3; first_seen 0, 0, 10 min) and 10 vehicles
    let store = seed(dir.path(), 3, 10);
    let mut c = Client::new(store, ApiConfig::default());
    let s = c
        .get("/stats", &format!("/stats?from={}&to={}", ts(0), ts(3_600_000)))
        .await
        .json();
    assert_eq!(s["summary"]["violations_total"], 3);
    assert_eq!(s["summary"]["vehicles"], 10);
    assert_eq!(s["summary"]["violation_rate"].as_f64().unwrap(), 0.3);

    let day = c
        .get("/stats", &format!("/stats?from={}&to={}&bucket=day", ts(0), ts(48 * 3_600_000)))
        .await
        .json();
    let buckets = day["buckets"].as_array().unwrap();
    assert_eq!(buckets.len(), 2);
    let sum = |k: &str| buckets.iter().map(|b| b[k].as_u64().unwrap()).sum::<u64>();
    assert_eq!(sum("violations"), day["summary"]["violations_total"].as_u64().unwrap());
    assert_eq!(sum("vehicles"), day["summary"]["vehicles"].as_u64().unwrap());
    assert_eq!(buckets[0]["end"], buckets[1]["start"]);

    let empty = c
        .get("/stats", &format!("/stats?from={}&to={}", ts(-7_200_000), ts(-3_600_000)))
        .await
        .json();
    for k in ["violations_total", "violations_pending", "violations_confirmed", "violations_dismissed", "vehicles"] {
        assert_eq!(empty["summary"][k], 0, "{k}");
    }
    assert_eq!(empty["summary"]["violation_rate"].as_f64().unwrap(), 0.0);

    let per_stream = c
        .get("/stats", &format!("/stats?from={}&to={}&stream_id=cam-b", ts(0), ts(3_600_000)))
        .await
        .json();
    assert_eq!(per_stream["summary"]["violations_total"], 1);
    assert_eq!(per_stream["summary"]["vehicles"], 0);
}

#[tokio::test]
async fn empty_store_serves_zeroes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::new(Store::open(dir.path()).unwrap(), ApiConfig::default());
    let page = c.get("/violations", "/violations").await.json();
    assert_eq!(page["total"], 0);
    assert_eq!(page["total_pages"], 0);
    let s = c
        .get("/stats", &format!("/stats?from={}&to={}&bucket=day", ts(0), ts(86_400_000)))
        .await
        .json();
    assert_eq!(s["summary"]["violations_total"], 0);
    assert_eq!(s["buckets"][0]["violations"], 0);
}

#[tokio::test]
async fn snapshot_bytes_and_cache_headers() {
    let dir = tempfile::tempdir().unwrap();
    let store = seed(dir.path(), 2, 0);
    let on_disk = std::fs::read(dir.path().join(&store.state().get(2).unwrap().snapshot_ref)).unwrap();
    let mut c = Client::new(store.clone(), ApiConfig::default());
    let snap = "/violations/{id}/snapshot";

    let r = c.get(snap, "/violations/2/snapshot").await;
    assert_eq!(r.body.as_ref(), on_disk.as_slice());
    assert_eq!(r.headers["content-type"], "image/png");
    assert_eq!(r.headers["etag"], "\"2-1\"");
    assert_eq!(r.headers["cache-control"], "no-cache");

    let pinned = c.get(snap, "/violations/2/snapshot?rev=1").await;
    assert_eq!(pinned.headers["cache-control"], "public, max-age=31536000, immutable");
    let stale = c.get(snap, "/violations/2/snapshot?rev=0").await;
    assert_eq!(stale.headers["cache-control"], "no-cache");

    // a review bumps the revision, so the old ETag no longer matches
    store.review(2, Decision::Dismissed, None).unwrap();
    let r = c
        .send(Method::GET, snap, "/violations/2/snapshot", None, &[("if-none-match", "\"2-1\"")])
        .await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers["etag"], "\"2-2\"");
}

#[tokio::test]
async fn review_transitions_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Client::new(seed(dir.path(), 3, 0), ApiConfig::default());
    let r = c.review("1", r#"{"decision":"confirmed","note":"clear view"}"#).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["review_status"], "confirmed");
    assert_eq!(v["reviewer_note"], "clear view");
    assert_eq!(v["revision"], 2);

    let conflict = c.review("1", r#"{"decision":"dismissed"}"#).await;
    assert_eq!(conflict.status, StatusCode::CONFLICT);
    assert_eq!(conflict.json()["error"]["code"], "conflict");
    assert_eq!(c.review("9", r#"{"decision":"dismissed"}"#).await.status, StatusCode::NOT_FOUND);

    let after = c.get("/violations/{id}", "/violations/1").await.json();
    assert_eq!(after, v);
    // survives a restart
    let reopened = Store::open(dir.path()).unwrap();
    assert_eq!(reopened.state().get(1).unwrap().reviewer_note.as_deref(), Some("clear view"));
    assert_eq!(reopened.state().audit().len(), 1);
}

#[tokio::test]
async fn gets_never_mutate() {
    let dir = tempfile::tempdir().unwrap();
    let store = seed(dir.path(), 6, 5);
    let before = store.state().canonical();
    let logs = || {
        ["violations.jsonl", "events.jsonl"].map(|f| std::fs::read(dir.path().join(f)).unwrap())
    };
    let logs_before = logs();
    let mut c = Client::new(store.clone(), ApiConfig::default());
    for uri in [
        "/violations",
        "/violations?status=pending&page=2&page_size=2",
        "/violations/3",
        "/violations/3/snapshot",
        "/violations/3/snapshot?rev=1",
        "/violations/99/snapshot",
    ] {
        let template = if uri.ends_with("/3") {
            "/violations/{id}"
        } else if uri.contains("snapshot") {
            "/violations/{id}/snapshot"
        } else {
            "/violations"
        };
        c.get(template, uri).await;
    }
    c.get("/stats", &format!("/stats?from={}&to={}&bucket=day", ts(0), ts(86_400_000))).await;
    c.get("/streams/{stream_id}/vehicles", &format!("/streams/cam-a/vehicles?from={}&to={}", ts(0), ts(86_400_000)))
        .await;
    assert_eq!(store.state().canonical(), before);
    assert_eq!(logs(), logs_before);
}

#[tokio::test]
async fn vehicle_counts_follow_the_stream_basis() {
    let dir = tempfile::tempdir().unwrap();
    let store = seed(dir.path(), 0, 4);
    // a windscreen track on a plate-counted stream is not a vehicle there
    store.record_vehicle("cam-a", 5000, ClassLabel::windscreen(), ts(0)).unwrap();
    let mut c = Client::new(store, ApiConfig::default());
    let v = c
        .get(
            "/streams/{stream_id}/vehicles",
            &format!("/streams/cam-a/vehicles?from={}&to={}", ts(0), ts(3 * 60_000)),
        )
        .await
        .json();
    assert_eq!(v["count"], 3);
    assert_eq!(v["basis"], "licence_plate");
}

#[tokio::test]
async fn bearer_token_and_cors() {
    let dir = tempfile::tempdir().unwrap();
    let store = seed(dir.path(), 1, 0);
    let api = ApiConfig {
        token: Some("s3cret".into()),
        cors_allow: vec!["http://localhost:5173".into()],
    };
    let r = router(store, &api);
    let ok = call(&r, Method::GET, "/api/v1/violations", None, &[("authorization", "Bearer s3cret")]).await;
    assert_eq!(ok.status, StatusCode::OK);
    let wrong = call(&r, Method::GET, "/api/v1/violations", None, &[("authorization", "Bearer nope")]).await;
    assert_eq!(wrong.status, StatusCode::UNAUTHORIZED);
    assert_eq!(wrong.json()["error"]["code"], "unauthorized");

    let preflight = call(
        &r,
        Method::OPTIONS,
        "/api/v1/violations/1/review",
        None,
        &[
            ("origin", "http://localhost:5173"),
            ("access-control-request-method", "POST"),
            ("access-control-request-headers", "authorization,content-type"),
        ],
    )
    .await;
    assert_eq!(preflight.headers["access-control-allow-origin"], "http://localhost:5173");
    let foreign = call(
        &r,
        Method::GET,
        "/api/v1/violations",
        None,
        &[("origin", "http://evil.example"), ("authorization", "Bearer s3cret")],
    )
    .await;
    assert!(foreign.headers.get("access-control-allow-origin").is_none());
}

#[tokio::test]
async fn unknown_routes_are_json_404() {
    let dir = tempfile::tempdir().unwrap();
    let r = router(Store::open(dir.path()).unwrap(), &ApiConfig::default());
    for uri in ["/api/v1/nope", "/elsewhere"] {
        let reply = call(&r, Method::GET, uri, None, &[]).await;
        assert_eq!(reply.status, StatusCode::NOT_FOUND);
        assert_eq!(reply.json()["error"]["code"], "not_found");
    }
}

#[test]
fn two_clients_interleaving_reviews_and_page_walks() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = support::two_client_fuzz(dir.path(), 12, 100, 7).unwrap();
    assert_eq!(outcome.operations, 100);
    assert!(outcome.reviews_applied > 0 && outcome.page_walks > 0, "{outcome:?}");
}
