use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use pag_cli::service::{router, AppState};
use pag_cli::store::Store;
use pag_core::dataset::{canonical_json, Dataset, GroundingSample};
use pag_core::scenegen::{generate_corpus, CorpusConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Env {
    _dir: tempfile::TempDir,
    store: std::path::PathBuf,
    data: Dataset,
    app: axum::Router,
}

fn demo_data() -> Dataset {
    let c = generate_corpus(&CorpusConfig::new(6, 20, 2024)).unwrap();
    Dataset::new(c.scenes, c.samples, c.split).unwrap()
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.jsonl");
    let data = demo_data();
    let app = router(Arc::new(AppState::new(data.clone(), Store::open(&store).unwrap())));
    Env { _dir: dir, store, data, app }
}

impl Env {
    fn reopen(&mut self) {
        self.app = router(Arc::new(AppState::new(self.data.clone(), Store::open(&self.store).unwrap())));
    }

    async fn call(&self, method: &str, uri: &str, body: Option<String>) -> (StatusCode, String) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map(Body::from).unwrap_or_else(Body::empty))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        (status, String::from_utf8(bytes.to_vec()).unwrap())
    }

    async fn get(&self, uri: &str) -> (StatusCode, String) {
        self.call("GET", uri, None).await
    }

    async fn post(&self, uri: &str, body: &Value) -> (StatusCode, String) {
        self.call("POST", uri, Some(body.to_string())).await
    }

    async fn annotate(&self, s: &GroundingSample, annotator: &str, spans: Value, unsure: bool) -> StatusCode {
        let body = json!({"sample_id": s.sample_id, "annotator_id": annotator, "spans": spans, "unsure": unsure, "timestamp": 1_700_000_000u64});
        self.post("/api/annotations", &body).await.0
    }

    async fn verify(&self, s: &GroundingSample, annotator: &str, approve: bool) -> Value {
        let (st, body) =
            self.post("/api/verify", &json!({"sample_id": s.sample_id, "annotator_id": annotator, "approve": approve})).await;
        assert_eq!(st, StatusCode::OK, "{body}");
        serde_json::from_str(&body).unwrap()
    }
}

fn spans(s: &GroundingSample) -> Value {
    serde_json::to_value(&s.phrases).unwrap()
}

fn error_path(body: &str) -> String {
    let v: Value = serde_json::from_str(body).unwrap();
    v["error"]["path"].as_str().unwrap_or_default().to_string()
}

#[tokio::test]
async fn scenes_are_listed_and_served() {
    let e = env();
    let (st, body) = e.get("/api/scenes").await;
    assert_eq!(st, StatusCode::OK);
    let ids: Vec<String> = serde_json::from_str(&body).unwrap();
    assert_eq!(ids, e.data.scenes.iter().map(|s| s.scene_id.clone()).collect::<Vec<_>>());
    let (st, body) = e.get(&format!("/api/scenes/{}", ids[0])).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body, canonical_json(&e.data.scenes[0]).unwrap());
    assert_eq!(e.get("/api/scenes/nowhere").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn tasks_hide_annotations_and_advance() {
    let e = env();
    assert_eq!(e.get("/api/tasks").await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let (st, body) = e.get("/api/tasks?annotator=ann1").await;
    assert_eq!(st, StatusCode::OK);
    let task: Value = serde_json::from_str(&body).unwrap();
    let first = &e.data.samples[0];
    assert_eq!(task["sample_id"], first.sample_id.as_str());
    assert!(task.get("phrases").is_none() && task.get("target_id").is_none());
    assert_eq!(e.annotate(first, "ann1", spans(first), false).await, StatusCode::OK);
    let (_, body) = e.get("/api/tasks?annotator=ann1").await;
    let task: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(task["sample_id"], e.data.samples[1].sample_id.as_str());
    let (_, body) = e.get("/api/tasks?annotator=ann2").await;
    let task: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(task["sample_id"], first.sample_id.as_str());
}

#[tokio::test]
async fn annotations_round_trip_byte_identical() {
    let e = env();
    let s = &e.data.samples[3];
    assert_eq!(e.annotate(s, "ann1", spans(s), false).await, StatusCode::OK);
    let (st, body) = e.get(&format!("/api/annotations/{}", s.sample_id)).await;
    assert_eq!(st, StatusCode::OK);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(canonical_json(&v["records"][0]["spans"]).unwrap(), canonical_json(&s.phrases).unwrap());
    assert_eq!(v["verification"]["status"], "pending");
    // A second post from the same annotator replaces the first.
    let mut changed = s.phrases.clone();
    changed.retain(|p| p.is_target);
    assert_eq!(e.annotate(s, "ann1", serde_json::to_value(&changed).unwrap(), false).await, StatusCode::OK);
    let (_, body) = e.get(&format!("/api/annotations/{}", s.sample_id)).await;
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["records"].as_array().unwrap().len(), 1);
    assert_eq!(v["records"][0]["spans"].as_array().unwrap().len(), 1);
    assert_eq!(e.get("/api/annotations/s999999").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_requests_report_the_field() {
    let e = env();
    let s = &e.data.samples[0];
    let n = s.tokens.len();
    let bad_end = json!([{"start": 0, "end": n + 1, "object_id": 0, "is_target": true}]);
    let body = json!({"sample_id": s.sample_id, "annotator_id": "a", "spans": bad_end, "unsure": false, "timestamp": 1});
    let (st, resp) = e.post("/api/annotations", &body).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_path(&resp), "spans[0].end");

    let bad_obj = json!([{"start": 0, "end": 1, "object_id": 99, "is_target": true}]);
    let body = json!({"sample_id": s.sample_id, "annotator_id": "a", "spans": bad_obj, "unsure": false, "timestamp": 1});
    let (st, resp) = e.post("/api/annotations", &body).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_path(&resp), "spans[0].object_id");

    let wrong_type = json!({"sample_id": s.sample_id, "annotator_id": "a", "spans": [{"start": "x", "end": 1, "object_id": 0, "is_target": true}], "unsure": false, "timestamp": 1});
    let (st, resp) = e.post("/api/annotations", &wrong_type).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_path(&resp), "spans[0].start");

    let missing = json!({"sample_id": s.sample_id, "annotator_id": "a", "spans": [], "timestamp": 1});
    assert_eq!(e.post("/api/annotations", &missing).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let no_target = json!([{"start": 0, "end": 1, "object_id": 0, "is_target": false}]);
    let body = json!({"sample_id": s.sample_id, "annotator_id": "a", "spans": no_target, "unsure": false, "timestamp": 1});
    let (st, resp) = e.post("/api/annotations", &body).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_path(&resp), "spans");

    let unknown = json!({"sample_id": "nope", "annotator_id": "a", "spans": spans(s), "unsure": false, "timestamp": 1});
    assert_eq!(e.post("/api/annotations", &unknown).await.0, StatusCode::NOT_FOUND);
    let verify = json!({"sample_id": s.sample_id, "annotator_id": "a", "approve": true});
    assert_eq!(e.post("/api/verify", &verify).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn agreement_verifies_and_disagreement_disputes() {
    let e = env();
    let (a, b) = (&e.data.samples[0], &e.data.samples[1]);
    let mut reversed = b.phrases.clone();
    reversed.reverse();
    e.annotate(a, "ann1", spans(a), false).await;
    e.annotate(a, "ann2", spans(a), false).await;
    assert_eq!(e.verify(a, "ann1", true).await["status"], "pending");
    assert_eq!(e.verify(a, "ann2", true).await["status"], "verified");

    let mut other = b.phrases.clone();
    let k = other.iter().position(|p| !p.is_target).unwrap_or(0);
    other[k].object_id = (other[k].object_id + 1) % e.data.scene(&b.scene_id).unwrap().objects.len();
    e.annotate(b, "ann1", serde_json::to_value(&reversed).unwrap(), false).await;
    e.annotate(b, "ann2", serde_json::to_value(&other).unwrap(), false).await;
    e.verify(b, "ann1", true).await;
    assert_eq!(e.verify(b, "ann2", true).await["status"], "disputed");

    let (st, export) = e.get("/api/export").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(export, format!("{}\n", canonical_json(a).unwrap()));
    // Disputed samples come back to their annotators.
    let mut only_b = e.data.samples.clone();
    only_b.retain(|s| s.sample_id != a.sample_id && s.sample_id != b.sample_id);
    for s in &only_b {
        e.annotate(s, "ann1", spans(s), false).await;
    }
    let (_, body) = e.get("/api/tasks?annotator=ann1").await;
    let task: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(task["sample_id"], b.sample_id.as_str());
    assert_eq!(task["reason"], "disputed");
}

#[tokio::test]
async fn demo_corpus_round_trip_through_the_api() {
    let mut e = env();
    let samples = e.data.samples.clone();
    assert_eq!(samples.len(), 20);
    let disputed = &samples[7];
    let unsure = &samples[11];
    for s in &samples {
        // Annotators only see tokens and the scene; they enter the spans.
        let (st, _) = e.get(&format!("/api/scenes/{}", s.scene_id)).await;
        assert_eq!(st, StatusCode::OK);
        let mut second = s.phrases.clone();
        second.reverse();
        if s.sample_id == disputed.sample_id {
            second.iter_mut().find(|p| p.is_target).unwrap().end -= 1;
            if second.iter().any(|p| p.is_empty()) {
                second = vec![s.phrases.iter().find(|p| p.is_target).unwrap().clone()];
            }
        }
        assert_eq!(e.annotate(s, "ann1", spans(s), s.sample_id == unsure.sample_id).await, StatusCode::OK);
        assert_eq!(e.annotate(s, "ann2", serde_json::to_value(&second).unwrap(), false).await, StatusCode::OK);
    }
    e.reopen();
    for s in &samples {
        e.verify(s, "ann2", true).await;
        e.verify(s, "ann1", true).await;
    }
    e.reopen();
    let (_, export) = e.get("/api/export").await;
    let expected: String = samples
        .iter()
        .filter(|s| s.sample_id != disputed.sample_id && s.sample_id != unsure.sample_id)
        .map(|s| format!("{}\n", canonical_json(s).unwrap()))
        .collect();
    assert_eq!(export, expected);
    for line in export.lines() {
        let back: GroundingSample = serde_json::from_str(line).unwrap();
        back.validate_against(e.data.scene(&back.scene_id).unwrap()).unwrap();
    }
    let (_, review) = e.get("/api/export/review").await;
    assert_eq!(review.lines().count(), 1);
    assert!(review.contains(&unsure.sample_id));
}

#[tokio::test]
async fn external_store_edit_is_a_conflict() {
    let e = env();
    let s = &e.data.samples[0];
    e.annotate(s, "ann1", spans(s), false).await;
    std::fs::write(&e.store, "").unwrap();
    assert_eq!(e.annotate(s, "ann2", spans(s), false).await, StatusCode::CONFLICT);
}
