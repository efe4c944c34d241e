use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use porous_gp::calibration::LevelSchedule;
use porous_gp::pipeline::{self, RunConfig, SurrogateModel};
use porous_gp_cli::server::{self, Service};
use serde_json::Value;
use tower::ServiceExt;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.s = 8;
    c.d = 16;
    c.n = 64;
    c.calibration.schedule = LevelSchedule::new(2, 4, 2).unwrap();
    c.calibration.samples = 8;
    c.confidence.nodes = 64;
    c.confidence.shifts = 2;
    c.rate_points = 9;
    c.threshold_points = 5;
    c
}

fn model() -> &'static SurrogateModel {
    static MODEL: OnceLock<SurrogateModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let summary = pipeline::run_pipeline(&small_config(), dir.path()).unwrap();
        SurrogateModel::load(summary.model_path).unwrap()
    })
}

fn service() -> Arc<Service> {
    static SERVICE: OnceLock<Arc<Service>> = OnceLock::new();
    SERVICE
        .get_or_init(|| Arc::new(Service::new(model().clone(), 16).unwrap()))
        .clone()
}

async fn get(uri: &str) -> (StatusCode, Value) {
    let app = server::router(service(), server::cors(None).unwrap());
    let res = app
        .oneshot(Request::get(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn mid_threshold() -> f64 {
    let t = model().threshold_grid(5).unwrap();
    t[2]
}

#[tokio::test]
async fn health_reports_ok() {
    let (status, body) = get("/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn model_info_describes_the_model() {
    let (status, body) = get("/model-info").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["n"], 64);
    assert_eq!(body["s"], 8);
    assert_eq!(body["d"], 16);
    assert_eq!(body["config_hash"], model().config_hash.as_str());
    assert!(body["zeta"].as_f64().unwrap() >= 0.0);
    assert!(body["rmse_bound"].as_f64().unwrap().is_finite());
}

#[tokio::test]
async fn curve_matches_library() {
    let h = mid_threshold();
    let (status, body) = get(&format!("/curve?h={h}")).await;
    assert_eq!(status, StatusCode::OK);
    let m = model();
    let expected = m.curve(h, &m.rate_grid(9)).unwrap();
    let got = body.as_array().unwrap();
    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(&expected) {
        assert_eq!(g["r"].as_f64().unwrap(), e.r);
        assert_eq!(g["h"].as_f64().unwrap(), e.threshold);
        assert_eq!(g["estimate"].as_f64().unwrap(), e.estimate);
        assert_eq!(g["stderr"].as_f64(), e.stderr);
    }
}

#[tokio::test]
async fn confidence_matches_library() {
    let m = model();
    let (r, h) = (0.5 * m.injection_rate(), mid_threshold());
    let (status, body) = get(&format!("/confidence?r={r}&h={h}")).await;
    assert_eq!(status, StatusCode::OK);
    let e = m.confidence(r, h).unwrap();
    assert_eq!(body["estimate"].as_f64().unwrap(), e.estimate);
}

#[tokio::test]
async fn rate_outside_domain_is_422() {
    let w = model().injection_rate();
    for r in [-1e-6, 1.5 * w] {
        let (status, body) = get(&format!("/confidence?r={r}&h=1")).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "r = {r}");
        assert!(body["error"].as_str().unwrap().contains("outside"));
    }
    let (status, _) = get(&format!("/heatmap?rs=0,{}&hs=1", 2.0 * w)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn malformed_parameters_are_400() {
    for uri in [
        "/confidence?h=1",
        "/confidence?r=abc&h=1",
        "/confidence?r=0&h=NaN",
        "/curve",
        "/curve?h=1&points=x",
        "/min-rate?h=1",
        "/heatmap?rs=",
    ] {
        let (status, body) = get(uri).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        assert!(body["error"].is_string(), "{uri}");
    }
}

#[tokio::test]
async fn out_of_range_counts_and_targets_are_422() {
    for uri in [
        "/min-rate?h=1&target=1.5",
        "/min-rate?h=1&target=-0.1",
        "/curve?h=1&points=0",
        "/curve?h=1&points=100000",
    ] {
        let (status, _) = get(uri).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{uri}");
    }
}

#[tokio::test]
async fn min_rate_matches_library() {
    let m = model();
    let h = mid_threshold();
    let (status, body) = get(&format!("/min-rate?h={h}&target=0.5")).await;
    assert_eq!(status, StatusCode::OK);
    let expected = m.min_rate(h, 0.5, &m.rate_grid(9)).unwrap();
    assert_eq!(body["rate"].as_f64(), expected);
}

#[tokio::test]
async fn heatmap_has_grid_shape_and_is_monotone_in_threshold() {
    let (status, body) = get("/heatmap").await;
    assert_eq!(status, StatusCode::OK);
    let rates = body["rates"].as_array().unwrap();
    let thresholds = body["thresholds"].as_array().unwrap();
    assert_eq!((rates.len(), thresholds.len()), (9, 5));
    let est = body["estimates"].as_array().unwrap();
    assert_eq!(est.len(), 9);
    for row in est {
        let row: Vec<f64> = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(row.len(), 5);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(row.windows(2).all(|p| p[1] >= p[0]));
    }
}

#[tokio::test]
async fn cors_header_is_present() {
    let app = server::router(service(), server::cors(Some("http://localhost:5173")).unwrap());
    let res = app
        .oneshot(
            Request::get("/health")
                .header(header::ORIGIN, "http://localhost:5173")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(
        res.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN],
        "http://localhost:5173"
    );
}

#[tokio::test]
async fn unknown_route_is_404() {
    let app = server::router(service(), server::cors(None).unwrap());
    let res = app
        .oneshot(Request::get("/nope").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::NOT_FOUND);
}
