use std::io::Cursor;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use serde_json::{json, Value};
use tower::ServiceExt;

use sketchret_core::checkpoint::{self, CheckpointMeta};
use sketchret_core::data::{generate_synthetic, load_dataset};
use sketchret_core::index::{build_index, rerank, IndexEntry};
use sketchret_core::{Modality, Model, ModelConfig, RetrievalIndex};
use sketchret_service::{router, AppState, QueryResponse, ServiceConfig, ServiceError, MAX_BODY_BYTES};

struct Fixture {
    _dir: tempfile::TempDir,
    config: ServiceConfig,
    sketches: Vec<PathBuf>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_synthetic(3, 2, 3, 64, 0).unwrap().save_to_dir(&data).unwrap();
    let model = Model::<f32>::new(ModelConfig::toy(), 0).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let fp = checkpoint::save(&model, &CheckpointMeta::default(), &ckpt).unwrap();
    let (ds, _) = load_dataset(&data).unwrap();
    let (index, _) = build_index(&model, fp, &ds.items).unwrap();
    let idx = dir.path().join("gallery.idx");
    index.save(&idx).unwrap();
    let sketches = ds.of_modality(Modality::Sketch).map(|i| data.join(&i.id)).collect();
    let mut config = ServiceConfig::new(ckpt, idx, data);
    config.rerank_depth = 4;
    Fixture { _dir: dir, config, sketches }
}

fn state(f: &Fixture) -> Arc<AppState> {
    Arc::new(AppState::load(f.config.clone()).unwrap())
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = router(Arc::clone(state)).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

async fn query(state: &Arc<AppState>, png: &[u8], k: usize, rerank: bool) -> QueryResponse {
    let (status, body) =
        call(state, "POST", "/query", Some(json!({"sketch_png_base64": b64(png), "k": k, "rerank": rerank}))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

fn ids(resp: &QueryResponse) -> Vec<(String, f64, String)> {
    resp.results
        .iter()
        .map(|r| (r.id.clone(), r.distance, serde_json::to_value(r.mode).unwrap().as_str().unwrap().to_string()))
        .collect()
}

#[tokio::test]
async fn health_reports_dimension_and_size() {
    let f = fixture();
    let s = state(&f);
    let (status, body) = call(&s, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v, json!({"status": "ok", "d": 32, "index_size": 9}));
}

#[tokio::test]
async fn query_matches_in_process_ranking() {
    let f = fixture();
    let s = state(&f);
    let index = RetrievalIndex::load(&f.config.index).unwrap();
    let (ds, _) = load_dataset(&f.config.asset_root).unwrap();
    for path in &f.sketches[..3] {
        let png = std::fs::read(path).unwrap();
        let tokens = s.encode_sketch(&png).unwrap();

        let plain = index.knn(tokens.row(0), 5).unwrap();
        let got = query(&s, &png, 5, false).await;
        let want: Vec<_> = plain.hits.iter().map(|h| (h.id.clone(), h.distance, "pre".to_string())).collect();
        assert_eq!(ids(&got), want);
        assert!(got.results.iter().all(|r| r.thumbnail_url == format!("/image/{}", r.id)));

        // Rerank the configured depth of candidates, independent of the service.
        let candidates = index.knn(tokens.row(0), 5.max(f.config.rerank_depth)).unwrap();
        let (mut reranked, _) = rerank(&s.model, &tokens, &candidates, f.config.rerank_depth, |id| {
            let item = ds.get(id)?;
            s.model.encode(&item.tensor(&s.model.config).ok()?, Modality::Image).ok()
        })
        .unwrap();
        reranked.hits.truncate(5);
        let got = query(&s, &png, 5, true).await;
        let want: Vec<_> = reranked
            .hits
            .iter()
            .map(|h| (h.id.clone(), h.distance, serde_json::to_value(h.mode).unwrap().as_str().unwrap().to_string()))
            .collect();
        assert_eq!(ids(&got), want);
        assert_eq!(got.results.iter().filter(|r| r.mode == sketchret_core::DistanceMode::Post).count(), 4);
    }
}

#[tokio::test]
async fn k_bounds_the_result_count() {
    let f = fixture();
    let s = state(&f);
    let png = std::fs::read(&f.sketches[0]).unwrap();
    assert_eq!(query(&s, &png, 3, false).await.results.len(), 3);
    assert_eq!(query(&s, &png, 1, false).await.results.len(), 1);
    assert_eq!(query(&s, &png, 100, false).await.results.len(), 9);
    let (status, body) = call(&s, "POST", "/query", Some(json!({"sketch_png_base64": b64(&png)}))).await;
    assert_eq!(status, StatusCode::OK);
    let resp: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.results.len(), 9, "default k 10 capped by index size");
    assert!(resp.latency_ms >= 0.0);
}

#[tokio::test]
async fn exact_retrieval_token_ranks_first_at_zero() {
    let f = fixture();
    let png = std::fs::read(&f.sketches[0]).unwrap();
    let probe_state = state(&f);
    let rt = probe_state.encode_sketch(&png).unwrap().row(0).to_vec();
    let mut index = RetrievalIndex::load(&f.config.index).unwrap();
    index.entries.push(IndexEntry { id: "probe".into(), label: "probe".into(), vector: rt });
    let s = Arc::new(AppState::new(f.config.clone(), probe_state.model.clone(), probe_state.fingerprint, index));
    let resp = query(&s, &png, 3, false).await;
    assert_eq!(resp.results[0].id, "probe");
    assert_eq!(resp.results[0].distance, 0.0);
}

#[tokio::test]
async fn malformed_requests_are_rejected() {
    let f = fixture();
    let s = state(&f);
    let (status, body) = call(&s, "POST", "/query", Some(json!({"sketch_png_base64": "***"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("base64"));

    let (status, body) = call(&s, "POST", "/query", Some(json!({"sketch_png_base64": b64(b"not an image")}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("decode"));

    let png = std::fs::read(&f.sketches[0]).unwrap();
    let (status, _) = call(&s, "POST", "/query", Some(json!({"sketch_png_base64": b64(&png), "k": 0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _) = call(&s, "POST", "/query", Some(json!({"k": 3}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_payload_is_413() {
    let f = fixture();
    let s = state(&f);
    let big = "A".repeat(MAX_BODY_BYTES + 1);
    let (status, _) = call(&s, "POST", "/query", Some(json!({"sketch_png_base64": big}))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn images_are_served_only_for_indexed_ids() {
    let f = fixture();
    let s = state(&f);
    let id = RetrievalIndex::load(&f.config.index).unwrap().entries[0].id.clone();
    let (status, body) = call(&s, "GET", &format!("/image/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, std::fs::read(f.config.asset_root.join(&id)).unwrap());
    image::load(Cursor::new(&body), image::ImageFormat::Png).unwrap();

    for uri in ["/image/images/nope.png", "/image/../model.ckpt", "/image/sketches/circle/000.png"] {
        let (status, _) = call(&s, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn classes_list_indexed_counts() {
    let f = fixture();
    let s = state(&f);
    let (status, body) = call(&s, "GET", "/classes", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let classes = v["classes"].as_array().unwrap();
    assert_eq!(classes.len(), 3);
    assert!(classes.iter().all(|c| c["images"] == 3));
}

#[tokio::test]
async fn rebuild_swaps_in_the_current_asset_tree() {
    let f = fixture();
    let s = state(&f);
    let victim = RetrievalIndex::load(&f.config.index).unwrap().entries[0].id.clone();
    std::fs::remove_file(f.config.asset_root.join(&victim)).unwrap();

    let (status, body) = call(&s, "POST", "/index/rebuild", None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["index_size"], 8);

    let (_, body) = call(&s, "GET", "/health", None).await;
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["index_size"], 8);
    let on_disk = RetrievalIndex::load(&f.config.index).unwrap();
    assert_eq!(on_disk.len(), 8);
    assert!(on_disk.get(&victim).is_none());
    assert_eq!(*s.snapshot(), on_disk);
}

#[test]
fn fingerprint_mismatch_refuses_to_start_unless_forced() {
    let f = fixture();
    let mut index = RetrievalIndex::load(&f.config.index).unwrap();
    index.fingerprint = [0xAB; 32];
    index.save(&f.config.index).unwrap();
    assert!(matches!(AppState::load(f.config.clone()), Err(ServiceError::FingerprintMismatch(_))));
    let forced = ServiceConfig { force: true, ..f.config.clone() };
    assert!(AppState::load(forced).is_ok());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_http_queries_match_serial_results() {
    let f = fixture();
    let s = state(&f);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(sketchret_service::run(listener, Arc::clone(&s)));
    let client = reqwest::Client::new();
    let url = format!("http://{addr}/query");

    let bodies: Vec<Value> = f
        .sketches
        .iter()
        .enumerate()
        .map(|(i, p)| json!({"sketch_png_base64": b64(&std::fs::read(p).unwrap()), "k": 5, "rerank": i % 2 == 0}))
        .collect();
    let post = |body: Value| {
        let client = client.clone();
        let url = url.clone();
        async move {
            let resp = client.post(&url).json(&body).send().await.unwrap();
            assert_eq!(resp.status(), reqwest::StatusCode::OK);
            ids(&resp.json::<QueryResponse>().await.unwrap())
        }
    };

    let mut serial = Vec::new();
    for b in &bodies {
        serial.push(post(b.clone()).await);
    }
    let tasks: Vec<_> = bodies.iter().cycle().take(3 * bodies.len()).map(|b| tokio::spawn(post(b.clone()))).collect();
    for (i, t) in tasks.into_iter().enumerate() {
        assert_eq!(t.await.unwrap(), serial[i % bodies.len()]);
    }

    let health: Value = client.get(format!("http://{addr}/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["index_size"], 9);
    server.abort();
}
