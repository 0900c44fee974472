use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use icount::counter::Miscalibration;
use icount::density::{render_density, DotScene};
use icount::formats::rle_decode;
use icount::session::SessionConfig;
use icount_service::config::{ServiceConfig, ADDR_ENV};
use icount_service::{router, CreateRequest, SessionPayload, SessionStore};
use serde_json::{json, Value};
use tower::ServiceExt;

fn scene(dots: Vec<[f64; 2]>) -> DotScene {
    DotScene {
        height: 128,
        width: 128,
        sigma: 2.0,
        dots,
    }
}

fn busy_scene() -> DotScene {
    scene(vec![
        [10.0, 12.0],
        [14.0, 15.5],
        [40.0, 90.0],
        [80.0, 30.0],
        [82.5, 33.0],
        [100.0, 100.0],
        [60.0, 64.0],
        [20.0, 110.0],
    ])
}

fn doubled(dots: DotScene) -> CreateRequest {
    CreateRequest {
        miscalibration: Miscalibration::GlobalScale { alpha: 2.0 },
        seed: 3,
        ..CreateRequest::from_scene(dots)
    }
}

fn app_with(config: ServiceConfig) -> (Router, Arc<SessionStore>) {
    let store = Arc::new(SessionStore::new(config));
    (router(Arc::clone(&store)), store)
}

fn app() -> Router {
    app_with(ServiceConfig::default()).0
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn create(app: &Router, request: &CreateRequest) -> SessionPayload {
    let (status, body) = call(app, "POST", "/sessions", Some(serde_json::to_string(request).unwrap())).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    serde_json::from_value(body).unwrap()
}

async fn feedback(app: &Router, id: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", &format!("/sessions/{id}/feedback"), Some(body.to_string())).await
}

fn error_code(body: &Value) -> &str {
    body["error"]["code"].as_str().unwrap_or_default()
}

/// Fields that legitimately differ between equivalent sessions.
fn comparable(mut p: SessionPayload) -> SessionPayload {
    p.session_id.clear();
    p.state.timings = Default::default();
    p
}

#[tokio::test]
async fn created_sessions_partition_the_prediction() {
    let app = app();
    let s = create(&app, &doubled(busy_scene())).await;
    let st = &s.state;
    assert_eq!((st.height, st.width), (128, 128));
    assert_eq!((st.iteration, st.generation), (0, 0));
    assert!((st.gt_total.unwrap() - 8.0).abs() < 1e-6);
    assert!((st.predicted_total - 16.0).abs() < 0.5, "{}", st.predicted_total);

    let sum: f64 = st.regions.iter().map(|r| r.sum).sum();
    assert!((sum - st.predicted_total).abs() < 1e-3);
    let labels = rle_decode(&st.labels, st.width).unwrap();
    assert_eq!(labels.height(), st.height);
    for r in &st.regions {
        let area = labels.labels().iter().filter(|&&l| l == r.id).count();
        assert_eq!(area, r.area, "region {}", r.id);
    }
    let density = s.decode_density().unwrap();
    assert!((density.total() - st.predicted_total).abs() < 1e-3);
    assert_eq!(st.ranges, vec!["0", "0–1", "1–2", "2–3", "3–4", ">4"]);
    assert!(s.session_id.len() == 32 && s.session_id.chars().all(|c| c.is_ascii_hexdigit()));
}

#[tokio::test]
async fn uploaded_grids_match_rendered_scenes() {
    let app = app();
    let grid = render_density(&busy_scene()).unwrap();
    let from_grid = CreateRequest {
        miscalibration: Miscalibration::GlobalScale { alpha: 2.0 },
        seed: 3,
        ..CreateRequest::from_grid(&grid)
    };
    let a = create(&app, &from_grid).await;
    let b = create(&app, &doubled(busy_scene())).await;
    // the upload passes through f32, so compare loosely
    assert!((a.state.predicted_total - b.state.predicted_total).abs() < 1e-4);
    assert_eq!(a.state.regions.len(), b.state.regions.len());
}

#[tokio::test]
async fn empty_scenes_have_no_foreground() {
    let app = app();
    let s = create(&app, &CreateRequest::from_scene(scene(Vec::new()))).await;
    assert_eq!(s.state.predicted_total, 0.0);
    assert!(!s.state.regions.is_empty());
    assert!(s
        .state
        .regions
        .iter()
        .all(|r| r.kind == icount::ipse::RegionKind::Background && r.dots.is_empty()));
}

#[tokio::test]
async fn identical_requests_give_identical_sessions() {
    let app = app();
    let a = create(&app, &doubled(busy_scene())).await;
    let b = create(&app, &doubled(busy_scene())).await;
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(comparable(a), comparable(b));
}

#[tokio::test]
async fn reads_return_the_latest_state() {
    let app = app();
    let s = create(&app, &doubled(busy_scene())).await;
    let uri = format!("/sessions/{}", s.session_id);
    let (status, body) = call(&app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_value::<SessionPayload>(body).unwrap(), s);

    let (status, after) = feedback(&app, &s.session_id, json!({"region_id": 0, "range_index": 1})).await;
    assert_eq!(status, StatusCode::OK, "{after}");
    let (_, read) = call(&app, "GET", &uri, None).await;
    assert_eq!(read, after);
    assert_eq!(after["iteration"], 1);
    assert_eq!(after["generation"], 1);
}

#[tokio::test]
async fn feedback_accumulates_and_moves_the_count() {
    let app = app();
    let s = create(&app, &doubled(busy_scene())).await;
    let heaviest = |p: &SessionPayload| {
        p.state
            .regions
            .iter()
            .max_by(|a, b| a.sum.total_cmp(&b.sum))
            .map(|r| r.id)
            .unwrap()
    };
    let region = heaviest(&s);
    let (status, body) = feedback(&app, &s.session_id, json!({"region_id": region, "range_index": 2, "generation": 0})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let first: SessionPayload = serde_json::from_value(body).unwrap();
    assert!(first.state.predicted_total < s.state.predicted_total);
    assert!(!first.state.loss_trajectory.is_empty());

    let region = heaviest(&first);
    let (status, body) = feedback(&app, &s.session_id, json!({"region_id": region, "range_index": 2, "generation": 1})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let second: SessionPayload = serde_json::from_value(body).unwrap();
    assert_eq!(second.state.feedback.len(), 2);
    assert_eq!(second.state.feedback[0].iteration, 0);
    assert_eq!(second.state.feedback[1].iteration, 1);
}

#[tokio::test]
async fn satisfied_feedback_changes_nothing_but_the_iteration() {
    let app = app();
    let s = create(&app, &CreateRequest::from_scene(busy_scene())).await;
    let region = &s.state.regions[0];
    let (status, body) = feedback(
        &app,
        &s.session_id,
        json!({"region_id": region.id, "range_index": region.range_index}),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let after: SessionPayload = serde_json::from_value(body).unwrap();
    assert_eq!(after.density, s.density);
    assert_eq!(after.state.labels, s.state.labels);
    assert_eq!(after.state.iteration, s.state.iteration + 1);
    assert!(after.state.loss_trajectory.iter().all(|&l| l == 0.0));
}

#[tokio::test]
async fn a_zero_answer_removes_a_false_detection() {
    let app = app();
    let request = CreateRequest {
        miscalibration: Miscalibration::LocalBlob {
            center: [70.0, 70.0],
            radius: 10.0,
            magnitude: 2.5,
            channel: Some(5),
        },
        seed: 5,
        ..CreateRequest::from_scene(scene(vec![
            [12.0, 14.0],
            [20.0, 110.0],
            [110.0, 18.0],
            [112.0, 108.0],
            [30.0, 60.0],
        ]))
    };
    let s = create(&app, &request).await;
    let labels = rle_decode(&s.state.labels, s.state.width).unwrap();
    let region = labels.get(70, 70);
    let pixels = labels.pixels_by_label().swap_remove(region as usize);
    let before = s.decode_density().unwrap().sum_over(&pixels);
    assert!(before > 1.5, "distractor region holds {before}");

    let started = Instant::now();
    let (status, body) = feedback(&app, &s.session_id, json!({"region_id": region, "range_index": 0})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert!(started.elapsed().as_secs_f64() < 2.0, "interaction took {:?}", started.elapsed());
    let after: SessionPayload = serde_json::from_value(body).unwrap();
    let remaining = after.decode_density().unwrap().sum_over(&pixels);
    assert!(remaining < 0.5, "distractor region still holds {remaining}");
}

#[tokio::test]
async fn interactions_finish_quickly_on_large_images() {
    let app = app();
    let dots = (0..150)
        .map(|i| {
            let t = i as f64;
            [(t * 37.7) % 512.0, (t * 91.3) % 512.0]
        })
        .collect();
    let request = CreateRequest {
        miscalibration: Miscalibration::GlobalScale { alpha: 1.5 },
        ..CreateRequest::from_scene(DotScene {
            height: 512,
            width: 512,
            sigma: 2.0,
            dots,
        })
    };
    let mut s = create(&app, &request).await;
    for _ in 0..3 {
        let region = s.state.regions.iter().max_by(|a, b| a.sum.total_cmp(&b.sum)).unwrap().id;
        let started = Instant::now();
        let (status, body) = feedback(&app, &s.session_id, json!({"region_id": region, "range_index": 3})).await;
        let took = started.elapsed().as_secs_f64();
        assert_eq!(status, StatusCode::OK, "{body}");
        assert!(took < 2.0, "interaction took {took:.2}s");
        s = serde_json::from_value(body).unwrap();
    }
}

#[tokio::test]
async fn client_errors_use_the_error_envelope() {
    let app = app();
    let s = create(&app, &doubled(busy_scene())).await;
    let id = &s.session_id;

    let (status, body) = call(&app, "GET", "/sessions/0123456789abcdef0123456789abcdef", None).await;
    assert_eq!((status, error_code(&body)), (StatusCode::NOT_FOUND, "not_found"));

    let (status, body) = feedback(&app, id, json!({"region_id": 0, "range_index": 1, "generation": 7})).await;
    assert_eq!((status, error_code(&body)), (StatusCode::CONFLICT, "stale_generation"));

    let missing = s.state.regions.len() as u32;
    let (status, body) = feedback(&app, id, json!({"region_id": missing, "range_index": 1})).await;
    assert_eq!((status, error_code(&body)), (StatusCode::CONFLICT, "stale_region"));

    let (status, body) = feedback(&app, id, json!({"region_id": 0, "range_index": 6})).await;
    assert_eq!((status, error_code(&body)), (StatusCode::BAD_REQUEST, "bad_range_index"));

    let (status, body) = call(&app, "POST", &format!("/sessions/{id}/feedback"), Some("{\"region_id\":".into())).await;
    assert_eq!((status, error_code(&body)), (StatusCode::BAD_REQUEST, "malformed_payload"));

    let (status, body) = feedback(&app, id, json!({"region_id": 0, "range_index": 1, "extra": true})).await;
    assert_eq!((status, error_code(&body)), (StatusCode::BAD_REQUEST, "malformed_payload"));

    let both = json!({"scene": busy_scene(), "dgrid": "AAAA"});
    let (status, body) = call(&app, "POST", "/sessions", Some(both.to_string())).await;
    assert_eq!((status, error_code(&body)), (StatusCode::BAD_REQUEST, "invalid_request"));

    let huge = json!({"scene": {"height": 4096, "width": 16, "sigma": 2.0, "dots": []}});
    let (status, body) = call(&app, "POST", "/sessions", Some(huge.to_string())).await;
    assert_eq!((status, error_code(&body)), (StatusCode::BAD_REQUEST, "invalid_request"));

    let (status, body) = call(&app, "GET", "/nowhere", None).await;
    assert_eq!((status, error_code(&body)), (StatusCode::NOT_FOUND, "not_found"));

    // failed requests leave the session untouched
    let (_, read) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(serde_json::from_value::<SessionPayload>(read).unwrap(), s);
}

#[tokio::test]
async fn oversized_bodies_are_refused() {
    let (app, _) = app_with(ServiceConfig {
        max_body_bytes: 256,
        ..ServiceConfig::default()
    });
    let body = serde_json::to_string(&doubled(busy_scene())).unwrap();
    assert!(body.len() > 256);
    let (status, body) = call(&app, "POST", "/sessions", Some(body)).await;
    assert_eq!((status, error_code(&body)), (StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large"));
}

#[tokio::test]
async fn blind_sessions_hide_the_ground_truth() {
    let app = app();
    let request = CreateRequest {
        blind: true,
        ..doubled(busy_scene())
    };
    let (status, body) = call(&app, "POST", "/sessions", Some(serde_json::to_string(&request).unwrap())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["blind"], true);
    assert!(body.get("gt_total").is_none());
}

#[tokio::test]
async fn sessions_can_be_deleted() {
    let (app, store) = app_with(ServiceConfig::default());
    let s = create(&app, &doubled(busy_scene())).await;
    let uri = format!("/sessions/{}", s.session_id);
    assert_eq!(store.len(), 1);
    let (status, _) = call(&app, "DELETE", &uri, None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert!(store.is_empty());
    let (status, _) = call(&app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "DELETE", &uri, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn idle_sessions_are_evicted() {
    let (app, store) = app_with(ServiceConfig {
        idle_ttl_secs: 3600,
        ..ServiceConfig::default()
    });
    create(&app, &doubled(busy_scene())).await;
    assert_eq!(store.evict_idle(), 0);

    let (app, store) = app_with(ServiceConfig {
        idle_ttl_secs: 0,
        ..ServiceConfig::default()
    });
    let s = create(&app, &doubled(busy_scene())).await;
    assert_eq!(store.evict_idle(), 1);
    let (status, _) = call(&app, "GET", &format!("/sessions/{}", s.session_id), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn snapshots_restore_sessions_after_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        snapshot_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    };
    let (app, _) = app_with(config.clone());
    let grid = render_density(&busy_scene()).unwrap();
    let uploaded = create(
        &app,
        &CreateRequest {
            miscalibration: Miscalibration::GlobalScale { alpha: 1.8 },
            ..CreateRequest::from_grid(&grid)
        },
    )
    .await;
    let s = create(&app, &doubled(busy_scene())).await;
    let region = s.state.regions.iter().max_by(|a, b| a.sum.total_cmp(&b.sum)).unwrap().id;
    let (_, body) = feedback(&app, &s.session_id, json!({"region_id": region, "range_index": 2})).await;
    let adapted: SessionPayload = serde_json::from_value(body).unwrap();
    assert!(dir.path().join(format!("{}.json", s.session_id)).exists());
    assert!(dir.path().join(format!("{}.input.dgrid", uploaded.session_id)).exists());
    std::fs::write(dir.path().join("not-a-session.json"), "{}").unwrap();

    let (app, store) = app_with(config);
    assert_eq!(store.restore(), 2);
    for before in [adapted, uploaded] {
        let (status, body) = call(&app, "GET", &format!("/sessions/{}", before.session_id), None).await;
        assert_eq!(status, StatusCode::OK);
        let restored: SessionPayload = serde_json::from_value(body).unwrap();
        assert_eq!(restored.density, before.density);
        assert_eq!(restored.state.labels, before.state.labels);
        assert_eq!(restored.state.regions, before.state.regions);
        assert_eq!(restored.state.feedback, before.state.feedback);
        assert_eq!(
            (restored.state.iteration, restored.state.generation),
            (before.state.iteration, before.state.generation)
        );
        // the loss trajectory belongs to the last live interaction only
        assert!(restored.state.loss_trajectory.is_empty());
    }

    // the restored session keeps adapting from where it stopped
    let (status, body) = feedback(&app, &s.session_id, json!({"region_id": 0, "range_index": 1, "generation": 1})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["feedback"].as_array().unwrap().len(), 2);

    let (status, _) = call(&app, "DELETE", &format!("/sessions/{}", s.session_id), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    assert!(!dir.path().join(format!("{}.json", s.session_id)).exists());
}

#[tokio::test]
async fn static_assets_are_served_outside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>counting</html>").unwrap();
    let (app, _) = app_with(ServiceConfig {
        static_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    });
    let (status, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("<html>counting</html>".into()));
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!((status, &body["status"]), (StatusCode::OK, &json!("ok")));
}

#[test]
fn configuration_loads_from_toml_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("service.toml");
    std::fs::write(
        &path,
        r#"
addr = "127.0.0.1:7000"
idle_ttl_secs = 60
max_grid_side = 512

[session.family]
count_limit = 6.0
interval = 2.0
"#,
    )
    .unwrap();

    std::env::remove_var(ADDR_ENV);
    let config = ServiceConfig::load(Some(&path)).unwrap();
    assert_eq!(config.addr.port(), 7000);
    assert_eq!(config.idle_ttl().as_secs(), 60);
    assert_eq!(config.max_grid_side, 512);
    assert_eq!(config.session.family.count_limit, 6.0);
    assert_eq!(config.session.segmentation, SessionConfig::default().segmentation);

    std::env::set_var(ADDR_ENV, "0.0.0.0:9100");
    let overridden = ServiceConfig::load(Some(&path)).unwrap();
    std::env::set_var(ADDR_ENV, "not an address");
    let bad = ServiceConfig::load(Some(&path));
    std::env::remove_var(ADDR_ENV);
    assert_eq!(overridden.addr.to_string(), "0.0.0.0:9100");
    assert!(bad.is_err());

    std::fs::write(&path, "unknown_key = 1\n").unwrap();
    assert!(ServiceConfig::load(Some(&path)).is_err());
    assert_eq!(ServiceConfig::load(None).unwrap().addr, ServiceConfig::default().addr);
}
