use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use duet_core::data::phrases::{PhraseKind, PhraseSet};
use duet_core::data::{PairDataset, PhotoRecord, Split};
use duet_core::index::GalleryIndex;
use duet_core::testing::tiny_run;
use duet_core::trainer::{Trainer, LATEST};
use duet_server::{
    cors_layer, router, AppState, Limits, Meta, QueryResponse, ServiceConfig, ServiceState,
};
use tower::ServiceExt;

const BOUNDARY: &str = "duet-test-boundary";
const LIMITS: Limits = Limits {
    max_upload_bytes: 64 * 1024,
    k_cap: 20,
};

struct Fixture {
    _dir: tempfile::TempDir,
    config: ServiceConfig,
    mismatched_index: PathBuf,
    sketch: Vec<u8>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path());
        let mut trainer = Trainer::new(cfg.clone()).unwrap();
        let batch = trainer
            .dataset()
            .epoch(cfg.batch_size, cfg.seed, 0)
            .unwrap()
            .remove(0);
        trainer.train_step(batch).unwrap();
        let checkpoint = trainer.save_checkpoint(LATEST).unwrap();

        let big = dir.path().join("big.png");
        image::RgbImage::from_fn(600, 300, |x, y| {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, 90])
        })
        .save(&big)
        .unwrap();
        let mut photos = trainer.dataset().gallery(Split::Test);
        photos.push(PhotoRecord {
            id: "big".into(),
            path: big,
            class_label: None,
            domain_label: None,
            objects: None,
        });
        let index_dir = dir.path().join("index");
        GalleryIndex::build(trainer.model(), &photos, 4)
            .unwrap()
            .save(&index_dir)
            .unwrap();

        // one more step changes the fingerprint
        let batch = trainer
            .dataset()
            .epoch(cfg.batch_size, cfg.seed, 0)
            .unwrap()
            .remove(1);
        trainer.train_step(batch).unwrap();
        let mismatched_index = dir.path().join("index-other");
        GalleryIndex::build(trainer.model(), &photos, 4)
            .unwrap()
            .save(&mismatched_index)
            .unwrap();

        let sketch = std::fs::read(dir.path().join("shapes/sketches/test_000.png")).unwrap();
        Fixture {
            config: ServiceConfig {
                checkpoint,
                index: index_dir,
                k_cap: LIMITS.k_cap,
                max_upload_bytes: LIMITS.max_upload_bytes,
                ..Default::default()
            },
            mismatched_index,
            sketch,
            _dir: dir,
        }
    })
}

fn app_with(state: AppState) -> Router {
    router(state, cors_layer(&[]))
}

fn loaded(config: &ServiceConfig) -> (AppState, Router) {
    let state = AppState::new(LIMITS);
    state.load_from(config);
    (state.clone(), app_with(state))
}

fn multipart(parts: &[(&str, &[u8])]) -> Request<Body> {
    let mut body = Vec::new();
    for (name, value) in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        if *name == "sketch" {
            body.extend_from_slice(
                b"Content-Disposition: form-data; name=\"sketch\"; filename=\"s.png\"\r\nContent-Type: image/png\r\n\r\n",
            );
        } else {
            body.extend_from_slice(
                format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes(),
            );
        }
        body.extend_from_slice(value);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/api/query")
        .header(
            header::CONTENT_TYPE,
            format!("multipart/form-data; boundary={BOUNDARY}"),
        )
        .body(Body::from(body))
        .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap()
        .to_vec();
    (status, body, ctype)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

#[tokio::test]
async fn unloaded_service_is_healthy_but_unavailable() {
    let app = app_with(AppState::new(LIMITS));
    assert_eq!(send(&app, get("/healthz")).await.0, StatusCode::OK);
    assert_eq!(
        send(&app, get("/api/meta")).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    let f = fixture();
    let (status, body, _) = send(&app, multipart(&[("sketch", &f.sketch)])).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(String::from_utf8(body).unwrap().contains("error"));
}

#[tokio::test]
async fn meta_describes_the_loaded_pair() {
    let f = fixture();
    let (state, app) = loaded(&f.config);
    let ServiceState::Ready(engine) = state.state() else {
        panic!("not ready")
    };
    let (status, body, _) = send(&app, get("/api/meta")).await;
    assert_eq!(status, StatusCode::OK);
    let meta: Meta = serde_json::from_slice(&body).unwrap();
    assert_eq!(meta.gallery_size, engine.index.len());
    let card = duet_core::checkpoint::read_card(&f.config.checkpoint).unwrap();
    assert_eq!(meta.fingerprint, card.fingerprint);
    assert_eq!(
        meta.connectors,
        PhraseSet::builtin(PhraseKind::ConnectingWord).phrases
    );
    assert_eq!(meta.default_connector, "with");
}

#[tokio::test]
async fn query_round_trip_matches_the_in_process_path() {
    let f = fixture();
    let (state, app) = loaded(&f.config);
    let ServiceState::Ready(engine) = state.state() else {
        panic!("not ready")
    };
    let img = image::load_from_memory(&f.sketch).unwrap();
    for (text, connector) in [
        (None, None),
        (Some("red color"), None),
        (Some("origami"), Some("in")),
    ] {
        let mut parts: Vec<(&str, &[u8])> = vec![("sketch", &f.sketch), ("k", b"5")];
        if let Some(t) = text {
            parts.push(("text", t.as_bytes()));
        }
        if let Some(c) = connector {
            parts.push(("connector", c.as_bytes()));
        }
        let (status, first, ctype) = send(&app, multipart(&parts)).await;
        assert_eq!(
            status,
            StatusCode::OK,
            "{}",
            String::from_utf8_lossy(&first)
        );
        assert_eq!(ctype.as_deref(), Some("application/json"));
        let (_, second, _) = send(&app, multipart(&parts)).await;
        assert_eq!(first, second, "identical requests, identical bodies");

        let resp: QueryResponse = serde_json::from_slice(&first).unwrap();
        let direct = engine
            .index
            .search(&engine.model, &img, text, connector, 5)
            .unwrap();
        let ids: Vec<&str> = resp.results.iter().map(|h| h.id.as_str()).collect();
        let scores: Vec<f32> = resp.results.iter().map(|h| h.score).collect();
        assert_eq!(
            ids,
            direct.ids.iter().map(String::as_str).collect::<Vec<_>>()
        );
        assert_eq!(scores, direct.scores);
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(resp.query.text.as_deref(), text);
        assert_eq!(resp.query.k, 5);
        assert_eq!(
            resp.results[0].thumbnail_url,
            format!("/api/image/{}?thumb=1", ids[0])
        );
    }
}

#[tokio::test]
async fn query_edge_cases_and_bad_input() {
    let f = fixture();
    let (_, app) = loaded(&f.config);
    let (status, body, _) = send(&app, multipart(&[("sketch", &f.sketch), ("k", b"0")])).await;
    assert_eq!(status, StatusCode::OK);
    let resp: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert!(resp.results.is_empty());

    let (status, body, _) = send(&app, multipart(&[("sketch", &f.sketch)])).await;
    assert_eq!(status, StatusCode::OK);
    let resp: QueryResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.results.len(), 9.min(duet_server::DEFAULT_K));

    let oversize = vec![0u8; LIMITS.max_upload_bytes + 1];
    let huge = vec![0u8; LIMITS.max_upload_bytes * 4];
    for (label, parts) in [
        (
            "k above cap",
            vec![("sketch", f.sketch.as_slice()), ("k", b"21".as_slice())],
        ),
        (
            "k not a number",
            vec![("sketch", f.sketch.as_slice()), ("k", b"ten".as_slice())],
        ),
        (
            "negative k",
            vec![("sketch", f.sketch.as_slice()), ("k", b"-1".as_slice())],
        ),
        ("undecodable", vec![("sketch", b"not an image".as_slice())]),
        ("missing sketch", vec![("text", b"red color".as_slice())]),
        ("oversize", vec![("sketch", oversize.as_slice())]),
        ("beyond body limit", vec![("sketch", huge.as_slice())]),
    ] {
        let (status, body, _) = send(&app, multipart(&parts)).await;
        assert_eq!(
            status,
            StatusCode::BAD_REQUEST,
            "{label}: {}",
            String::from_utf8_lossy(&body)
        );
    }
}

#[tokio::test]
async fn images_and_thumbnails() {
    let f = fixture();
    let (state, app) = loaded(&f.config);
    let ServiceState::Ready(engine) = state.state() else {
        panic!("not ready")
    };
    let id = engine.index.ids().next().unwrap().to_string();
    let (status, body, ctype) = send(&app, get(&format!("/api/image/{id}"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert_eq!(
        body,
        std::fs::read(&engine.index.photo(&id).unwrap().path).unwrap()
    );

    let (status, _, _) = send(&app, get("/api/image/no-such-photo")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body, ctype) = send(&app, get("/api/image/big?thumb=1")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    let thumb = image::load_from_memory(&body).unwrap();
    // independent resize oracle: scale the long side to 256, keep aspect
    let scale = 256.0 / 600.0;
    assert_eq!(
        (thumb.width(), thumb.height()),
        (256, (300.0 * scale as f64).round() as u32)
    );

    let (_, body, _) = send(&app, get(&format!("/api/image/{id}?thumb=1"))).await;
    let small = image::load_from_memory(&body).unwrap();
    assert_eq!(
        (small.width(), small.height()),
        (32, 32),
        "small photos are not enlarged"
    );
}

#[tokio::test]
async fn mismatched_index_answers_409() {
    let f = fixture();
    let config = ServiceConfig {
        index: f.mismatched_index.clone(),
        ..f.config.clone()
    };
    let (state, app) = loaded(&config);
    assert!(matches!(state.state(), ServiceState::Mismatch { .. }));
    let (status, _, _) = send(&app, multipart(&[("sketch", &f.sketch)])).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(send(&app, get("/healthz")).await.0, StatusCode::OK);
}

#[tokio::test]
async fn missing_files_leave_the_service_unavailable() {
    let f = fixture();
    let config = ServiceConfig {
        index: Path::new("/nonexistent/index").to_path_buf(),
        ..f.config.clone()
    };
    let (state, app) = loaded(&config);
    assert!(matches!(state.state(), ServiceState::Failed(_)));
    assert_eq!(
        send(&app, get("/api/meta")).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
}

#[tokio::test]
async fn cors_allows_the_ui_origin() {
    let f = fixture();
    let (_, app) = loaded(&f.config);
    let req = Request::get("/api/meta")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers()
            .get(header::ACCESS_CONTROL_ALLOW_ORIGIN)
            .unwrap(),
        "*"
    );
}

#[test]
fn index_photos_come_from_the_manifest() {
    let f = fixture();
    let idx = GalleryIndex::load(&f.config.index).unwrap();
    let manifest = f
        .config
        .checkpoint
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .join("shapes/manifest.json");
    let ds = PairDataset::open(
        &manifest,
        8,
        duet_core::candle::DType::F32,
        &duet_core::candle::Device::Cpu,
    )
    .unwrap();
    assert_eq!(idx.len(), ds.gallery(Split::Test).len() + 1);
}
