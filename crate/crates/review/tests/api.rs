use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fixtures::write_checkpoint;
use foamqc::explain::ExplainParams;
use foamqc::synth::{generate, write_dataset, SynthParams};
use foamqc_review::{ReviewItem, ReviewStore, Service, ServiceConfig, Status};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

mod fixtures {
    use std::path::Path;

    use foamqc::model::{save_checkpoint, BackboneSpec, Classifier, ModelConfig, Normalization, ViewMode};
    use foamqc::ViewKind;

    pub fn write_checkpoint(path: &Path, mode: ViewMode, views: &[ViewKind]) {
        let clf = Classifier::new(
            &BackboneSpec::truncated(32),
            ModelConfig::new(mode, views, true),
            Normalization { mean: 0.3, std: 0.25 },
            candle_core::DType::F32,
            5,
        )
        .unwrap();
        save_checkpoint(path, &clf, 0, serde_json::Value::Null).unwrap();
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: ServiceConfig,
}

fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let items = generate(&SynthParams {
        n_groups: n,
        image_size: 32,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let manifest = write_dataset(&root.join("data"), &items).unwrap();
    let ckpt = root.join("model.safetensors");
    write_checkpoint(&ckpt, foamqc::model::ViewMode::OneView, &[foamqc::ViewKind::Top]);
    let mut cfg = ServiceConfig::new(manifest, ckpt, root.join("state"));
    cfg.explain = ExplainParams {
        n_samples: 60,
        cell: 8,
        ..Default::default()
    };
    Fixture { _dir: dir, root, cfg }
}

fn ready(cfg: ServiceConfig) -> (Arc<Service>, Router) {
    let svc = Service::open(cfg).unwrap();
    svc.warm_up().unwrap();
    let router = Arc::clone(&svc).router();
    (svc, router)
}

async fn call(router: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(router: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(router, "GET", uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn journal_len(root: &Path) -> usize {
    std::fs::read_to_string(root.join("state/labels.jsonl")).map_or(0, |s| s.lines().count())
}

#[tokio::test]
async fn queue_waits_for_warm_up() {
    let f = fixture(4);
    let svc = Service::open(f.cfg.clone()).unwrap();
    let router = Arc::clone(&svc).router();
    assert_eq!(get_json(&router, "/api/queue").await.0, StatusCode::SERVICE_UNAVAILABLE);
    svc.warm_up().unwrap();
    let (s, q) = get_json(&router, "/api/queue").await;
    assert_eq!(s, StatusCode::OK);
    let q = q.as_array().unwrap();
    assert_eq!(q.len(), 4);
    let u: Vec<f64> = q.iter().map(|e| (e["p_defective"].as_f64().unwrap() - 0.5).abs()).collect();
    assert!(u.windows(2).all(|w| w[0] <= w[1]));
}

#[tokio::test]
async fn failed_warm_up_stays_unavailable() {
    let mut f = fixture(2);
    f.cfg.checkpoint = f.root.join("missing.safetensors");
    let svc = Service::open(f.cfg).unwrap();
    assert!(svc.warm_up().is_err());
    let (s, body) = get_json(&Arc::clone(&svc).router(), "/api/queue").await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(body["error"].as_str().unwrap().contains("failed"));
}

#[tokio::test]
async fn empty_dataset_gives_empty_queue() {
    let f = fixture(1);
    let empty = f.root.join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    let mut cfg = f.cfg.clone();
    cfg.data = empty;
    let (_, router) = ready(cfg);
    assert_eq!(get_json(&router, "/api/queue").await, (StatusCode::OK, json!([])));
}

#[tokio::test]
async fn group_detail_images_and_cached_explanation() {
    let f = fixture(3);
    let (_, router) = ready(f.cfg.clone());
    let (s, first) = get_json(&router, "/api/groups/syn0001").await;
    assert_eq!(s, StatusCode::OK);
    let item: ReviewItem = serde_json::from_value(first).unwrap();
    assert_eq!(item.images.len(), 5);
    assert_eq!(item.status, Status::Pending);
    let expl = item.explanation.expect("one-view model is explainable");
    assert!(!expl.cached);
    let (_, second) = get_json(&router, "/api/groups/syn0001").await;
    assert_eq!(second["explanation"]["cached"], json!(true));

    let (s, png) = call(&router, "GET", &expl.overlay_url, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    let (s, weights) = get_json(&router, &expl.weights_url).await;
    assert_eq!(s, StatusCode::OK);
    assert!(weights.as_object().unwrap().contains_key("0"));
    for img in &item.images {
        let (s, png) = call(&router, "GET", &img.url, None).await;
        assert_eq!(s, StatusCode::OK, "{}", img.url);
        assert_eq!(&png[1..4], b"PNG");
    }

    // A restarted service finds the explanation on disk.
    let (_, router) = ready(f.cfg.clone());
    let (_, again) = get_json(&router, "/api/groups/syn0001").await;
    assert_eq!(again["explanation"]["cached"], json!(true));

    assert_eq!(get_json(&router, "/api/groups/nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&router, "GET", "/api/images/syn0001/side.png", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&router, "GET", "/api/images/nope/top.png", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn concurrent_requests_compute_one_explanation() {
    let f = fixture(2);
    let svc = Service::open(f.cfg.clone()).unwrap();
    svc.warm_up().unwrap();
    let router = Arc::clone(&svc).router();
    let (a, b) = tokio::join!(get_json(&router, "/api/groups/syn0000"), get_json(&router, "/api/groups/syn0000"));
    let cached = [a.1["explanation"]["cached"].as_bool().unwrap(), b.1["explanation"]["cached"].as_bool().unwrap()];
    assert_eq!(cached.iter().filter(|c| !**c).count(), 1, "{cached:?}");
}

#[tokio::test]
async fn multi_view_model_has_no_explanations() {
    let f = fixture(2);
    let ckpt = f.root.join("mv.safetensors");
    write_checkpoint(&ckpt, foamqc::model::ViewMode::MultiView, &[foamqc::ViewKind::Top, foamqc::ViewKind::Bottom]);
    let mut cfg = f.cfg.clone();
    cfg.checkpoint = ckpt;
    let (_, router) = ready(cfg);
    let (s, item) = get_json(&router, "/api/groups/syn0000").await;
    assert_eq!(s, StatusCode::OK);
    assert!(item["explanation"].is_null());
    assert!(item["p_defective"].as_f64().is_some());
}

#[tokio::test]
async fn labeling_rules() {
    let f = fixture(3);
    let (_, router) = ready(f.cfg.clone());
    let uri = "/api/groups/syn0002/label";
    let (s, body) = call(&router, "POST", uri, Some(json!({"expert_label": "normal_defective", "note": "rim chip"}))).await;
    assert_eq!(s, StatusCode::OK);
    let item: ReviewItem = serde_json::from_slice(&body).unwrap();
    assert_eq!(item.status, Status::Reviewed);
    assert_eq!(item.note, "rim chip");
    assert_eq!(journal_len(&f.root), 1);

    let (s, _) = call(&router, "POST", uri, Some(json!({"expert_label": "normal_defective", "note": "rim chip"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(journal_len(&f.root), 1);

    assert_eq!(call(&router, "POST", uri, Some(json!({"expert_label": "broken"}))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&router, "POST", uri, Some(json!({"label": 3}))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(
        call(&router, "POST", "/api/groups/zzz/label", Some(json!({"expert_label": "normal"}))).await.0,
        StatusCode::NOT_FOUND
    );
    // Overwriting someone else's decision needs the revision it was based on.
    assert_eq!(call(&router, "POST", uri, Some(json!({"expert_label": "defective"}))).await.0, StatusCode::CONFLICT);
    let (s, body) = call(&router, "POST", uri, Some(json!({"expert_label": "defective", "revision": item.revision}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<ReviewItem>(&body).unwrap().expert_label, Some(foamqc::RawLabel::Defective));
    assert_eq!(journal_len(&f.root), 2);

    // Reviewed items move behind the pending ones.
    let (_, q) = get_json(&router, "/api/queue").await;
    let last = q.as_array().unwrap().last().unwrap();
    assert_eq!(last["id"], "syn0002");
    assert_eq!(last["status"], "reviewed");
}

#[tokio::test]
async fn journal_replay_matches_live_state_over_http() {
    use rand::{Rng, SeedableRng};
    let f = fixture(6);
    let (svc, router) = ready(f.cfg.clone());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let labels = ["normal", "normal_defective", "defective"];
    for _ in 0..60 {
        let id = format!("syn{:04}", rng.random_range(0..6));
        let (_, item) = get_json(&router, &format!("/api/groups/{id}")).await;
        let mut body = json!({"expert_label": labels[rng.random_range(0..3)]});
        if rng.random_bool(0.8) {
            body["revision"] = item["revision"].clone();
        }
        let s = call(&router, "POST", &format!("/api/groups/{id}/label"), Some(body)).await.0;
        assert!(s == StatusCode::OK || s == StatusCode::CONFLICT, "{s}");
    }
    let live = ReviewStore::open(&f.root.join("state"), 1000).unwrap().state().clone();
    assert_eq!(ReviewStore::rebuild(&f.root.join("state")).unwrap(), live);
    assert_eq!(svc.counts().status.values().sum::<usize>(), 6);
}

#[tokio::test]
async fn blind_mode_hides_predictions_until_reviewed() {
    let f = fixture(3);
    let mut cfg = f.cfg.clone();
    cfg.blind = true;
    let (_, router) = ready(cfg);
    let (_, q) = get_json(&router, "/api/queue").await;
    assert!(q.as_array().unwrap().iter().all(|e| e["p_defective"].is_null()));
    let ids: Vec<&str> = q.as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["syn0000", "syn0001", "syn0002"]);
    let (_, item) = get_json(&router, "/api/groups/syn0000").await;
    assert!(item["p_defective"].is_null() && item["explanation"].is_null());
    let (_, after) = call(&router, "POST", "/api/groups/syn0000/label", Some(json!({"expert_label": "normal"}))).await;
    let after: Value = serde_json::from_slice(&after).unwrap();
    assert!(after["p_defective"].as_f64().is_some());
}

#[tokio::test]
async fn metrics_need_a_grid() {
    use foamqc::train::{run_grid, TrainConfig};
    let f = fixture(18);
    let (_, router) = ready(f.cfg.clone());
    assert_eq!(call(&router, "GET", "/api/metrics", None).await.0, StatusCode::NO_CONTENT);

    let groups = foamqc::data::load_manifest(&f.cfg.data).unwrap();
    let tcfg = TrainConfig {
        epochs: 1,
        input_size: 32,
        augmentation: None,
        ..Default::default()
    };
    let grid = run_grid(&groups, &[0], &tcfg, 1).unwrap();
    let runs = f.root.join("runs");
    std::fs::create_dir_all(&runs).unwrap();
    std::fs::write(runs.join("grid.json"), serde_json::to_vec(&grid).unwrap()).unwrap();
    let mut cfg = f.cfg.clone();
    cfg.runs = Some(runs);
    let (_, router) = ready(cfg);
    let (s, m) = get_json(&router, "/api/metrics").await;
    assert_eq!(s, StatusCode::OK);
    let cells: usize = m["accuracy"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .filter(|v| v.is_number() || *v == "failed")
        .count();
    assert_eq!(cells, 12);
    assert_eq!(m["rows"].as_array().unwrap().len(), 5);
    let counts = &m["counts"];
    let sum = |k: &str| counts[k].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum::<u64>();
    assert_eq!(sum("status"), 18);
    assert_eq!(sum("label"), 18);
    assert_eq!(counts["total"], 18);
}

#[tokio::test]
async fn cors_and_static_ui() {
    let f = fixture(2);
    let ui = f.root.join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>review</html>").unwrap();
    let mut cfg = f.cfg.clone();
    cfg.ui_dir = Some(ui);
    let (_, router) = ready(cfg);
    let (s, body) = call(&router, "GET", "/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>review</html>");
    let (s, _) = call(&router, "GET", "/", None).await;
    assert_eq!(s, StatusCode::OK);
    let req = Request::builder()
        .uri("/api/health")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}
