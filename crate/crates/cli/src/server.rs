//! Read-only HTTP JSON API over one fitted surrogate.
//!
//! All routes are `GET`. Malformed parameters give 400, values outside the
//! model's domain give 422 and anything else 500; error bodies are
//! `{"error": message}`.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use axum::extract::{Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use porous_gp::confidence::{
    first_rate_reaching, heatmap_with, ConfidenceEstimator, ConfidenceHeatmap, ConfidenceResult,
    RateMoments,
};
use porous_gp::pipeline::{ModelInfo, SurrogateModel};
use serde::Serialize;
use tower_http::cors::{AllowOrigin, CorsLayer};

/// Largest `points` accepted by `/curve` and `/min-rate`.
pub const MAX_RATE_POINTS: usize = 1025;
/// Largest grid accepted by `/heatmap` along either axis.
pub const MAX_HEATMAP_AXIS: usize = 1025;
/// Rates whose node moments are kept in memory.
pub const DEFAULT_CACHE_RATES: usize = 128;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    pub fn malformed(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    pub fn out_of_domain(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl From<porous_gp::Error> for ApiError {
    fn from(e: porous_gp::Error) -> Self {
        match e {
            porous_gp::Error::InvalidArgument(m) => Self::out_of_domain(m),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// `/confidence` and `/curve` entries.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ConfidencePoint {
    pub r: f64,
    pub h: f64,
    pub estimate: f64,
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MinRateResponse {
    pub h: f64,
    pub target: f64,
    /// Smallest grid rate reaching the target; `null` if none does.
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub cached_rates: usize,
}

/// Bounded first-in first-out cache of node moments keyed by rate.
struct MomentCache {
    capacity: usize,
    map: HashMap<u64, Arc<RateMoments>>,
    order: VecDeque<u64>,
}

impl MomentCache {
    fn get(&self, r: f64) -> Option<Arc<RateMoments>> {
        self.map.get(&r.to_bits()).cloned()
    }

    fn insert(&mut self, r: f64, m: Arc<RateMoments>) {
        if self.capacity == 0 || self.map.contains_key(&r.to_bits()) {
            return;
        }
        while self.map.len() >= self.capacity {
            match self.order.pop_front() {
                Some(old) => {
                    self.map.remove(&old);
                }
                None => break,
            }
        }
        self.map.insert(r.to_bits(), m);
        self.order.push_back(r.to_bits());
    }
}

/// Shared state: the leaked model, its estimator and a moment cache.
pub struct Service {
    model: &'static SurrogateModel,
    estimator: ConfidenceEstimator<'static>,
    cache: Mutex<MomentCache>,
}

impl Service {
    /// The model lives for the rest of the process.
    pub fn new(model: SurrogateModel, cache_rates: usize) -> anyhow::Result<Self> {
        let model: &'static SurrogateModel = Box::leak(Box::new(model));
        let estimator =
            ConfidenceEstimator::new(&model.model, model.domain_map(), model.settings())?;
        Ok(Self {
            model,
            estimator,
            cache: Mutex::new(MomentCache {
                capacity: cache_rates,
                map: HashMap::new(),
                order: VecDeque::new(),
            }),
        })
    }

    pub fn model(&self) -> &SurrogateModel {
        self.model
    }

    pub fn moments(&self, r: f64) -> Result<Arc<RateMoments>, ApiError> {
        if let Some(m) = self.cache.lock().expect("cache lock").get(r) {
            return Ok(m);
        }
        let m = Arc::new(self.estimator.moments(r)?);
        self.cache.lock().expect("cache lock").insert(r, m.clone());
        Ok(m)
    }

    /// Fills the cache for the default rate grid.
    pub fn warm(&self) {
        for r in self.model.rate_grid(self.model.config.rate_points) {
            if self.moments(r).is_err() {
                break;
            }
        }
    }

    pub fn cached_rates(&self) -> usize {
        self.cache.lock().expect("cache lock").map.len()
    }

    fn check_rate(&self, r: f64) -> Result<(), ApiError> {
        let w = self.model.injection_rate();
        if !(0.0..=w).contains(&r) {
            return Err(ApiError::out_of_domain(format!(
                "rate r = {r} is outside [0, {w}]"
            )));
        }
        Ok(())
    }

    pub fn confidence(&self, r: f64, h: f64) -> Result<ConfidencePoint, ApiError> {
        self.check_rate(r)?;
        Ok(point(self.moments(r)?.estimate(h)))
    }

    pub fn curve(&self, h: f64, points: usize) -> Result<Vec<ConfidencePoint>, ApiError> {
        self.model
            .rate_grid(points)
            .into_iter()
            .map(|r| self.confidence(r, h))
            .collect()
    }

    pub fn heatmap(&self, rates: &[f64], thresholds: &[f64]) -> Result<ConfidenceHeatmap, ApiError> {
        for &r in rates {
            self.check_rate(r)?;
        }
        heatmap_with(rates, thresholds, |r| {
            self.moments(r).map_err(|e| porous_gp::Error::Solver(e.message))
        })
        .map_err(ApiError::from)
    }

    pub fn min_rate(&self, h: f64, target: f64, points: usize) -> Result<MinRateResponse, ApiError> {
        if !(0.0..=1.0).contains(&target) {
            return Err(ApiError::out_of_domain(format!(
                "target confidence {target} is outside [0, 1]"
            )));
        }
        let curve = self
            .model
            .rate_grid(points)
            .into_iter()
            .map(|r| Ok(self.moments(r)?.estimate(h)))
            .collect::<Result<Vec<_>, ApiError>>()?;
        Ok(MinRateResponse {
            h,
            target,
            rate: first_rate_reaching(&curve, target),
        })
    }
}

fn point(c: ConfidenceResult) -> ConfidencePoint {
    ConfidencePoint {
        r: c.r,
        h: c.threshold,
        estimate: c.estimate,
        stderr: c.stderr,
    }
}

type Params = Query<HashMap<String, String>>;

fn required_f64(q: &HashMap<String, String>, name: &str) -> Result<f64, ApiError> {
    let raw = q
        .get(name)
        .ok_or_else(|| ApiError::malformed(format!("missing query parameter `{name}`")))?;
    parse_f64(raw, name)
}

fn parse_f64(raw: &str, name: &str) -> Result<f64, ApiError> {
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| ApiError::malformed(format!("`{name}` is not a number: {raw:?}")))?;
    if !v.is_finite() {
        return Err(ApiError::malformed(format!("`{name}` must be finite")));
    }
    Ok(v)
}

fn optional_points(
    q: &HashMap<String, String>,
    name: &str,
    default: usize,
    max: usize,
) -> Result<usize, ApiError> {
    let Some(raw) = q.get(name) else {
        return Ok(default);
    };
    let v: usize = raw
        .trim()
        .parse()
        .map_err(|_| ApiError::malformed(format!("`{name}` is not a count: {raw:?}")))?;
    if v == 0 || v > max {
        return Err(ApiError::out_of_domain(format!(
            "`{name}` = {v} must lie in [1, {max}]"
        )));
    }
    Ok(v)
}

fn optional_list(q: &HashMap<String, String>, name: &str) -> Result<Option<Vec<f64>>, ApiError> {
    let Some(raw) = q.get(name) else {
        return Ok(None);
    };
    let values = raw
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_f64(s, name))
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(ApiError::malformed(format!("`{name}` is empty")));
    }
    if values.len() > MAX_HEATMAP_AXIS {
        return Err(ApiError::out_of_domain(format!(
            "`{name}` has {} values, at most {MAX_HEATMAP_AXIS} allowed",
            values.len()
        )));
    }
    Ok(Some(values))
}

/// Runs CPU-bound work off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
        .map(Json)
}

async fn health(State(s): State<Arc<Service>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        cached_rates: s.cached_rates(),
    })
}

async fn model_info(State(s): State<Arc<Service>>) -> Json<ModelInfo> {
    Json(s.model().info())
}

async fn confidence(State(s): State<Arc<Service>>, Query(q): Params) -> ApiResult<ConfidencePoint> {
    let r = required_f64(&q, "r")?;
    let h = required_f64(&q, "h")?;
    blocking(move || s.confidence(r, h)).await
}

async fn curve(State(s): State<Arc<Service>>, Query(q): Params) -> ApiResult<Vec<ConfidencePoint>> {
    let h = required_f64(&q, "h")?;
    let points = optional_points(&q, "points", s.model().config.rate_points, MAX_RATE_POINTS)?;
    blocking(move || s.curve(h, points)).await
}

async fn heatmap(State(s): State<Arc<Service>>, Query(q): Params) -> ApiResult<ConfidenceHeatmap> {
    let rates = optional_list(&q, "rs")?;
    let thresholds = optional_list(&q, "hs")?;
    blocking(move || {
        let model = s.model();
        let rates = rates.unwrap_or_else(|| model.rate_grid(model.config.rate_points));
        let thresholds = match thresholds {
            Some(h) => h,
            None => model.threshold_grid(model.config.threshold_points)?,
        };
        s.heatmap(&rates, &thresholds)
    })
    .await
}

async fn min_rate(State(s): State<Arc<Service>>, Query(q): Params) -> ApiResult<MinRateResponse> {
    let h = required_f64(&q, "h")?;
    let target = required_f64(&q, "target")?;
    let points = optional_points(&q, "points", s.model().config.rate_points, MAX_RATE_POINTS)?;
    blocking(move || s.min_rate(h, target, points)).await
}

/// CORS policy: a single allowed origin, or any origin when `None`.
pub fn cors(origin: Option<&str>) -> anyhow::Result<CorsLayer> {
    let allow = match origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o)?),
        None => AllowOrigin::any(),
    };
    Ok(CorsLayer::new()
        .allow_methods([Method::GET])
        .allow_origin(allow))
}

pub fn router(service: Arc<Service>, cors: CorsLayer) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model-info", get(model_info))
        .route("/confidence", get(confidence))
        .route("/curve", get(curve))
        .route("/heatmap", get(heatmap))
        .route("/min-rate", get(min_rate))
        .with_state(service)
        .layer(cors)
}

/// Binds and serves until interrupted.
pub async fn serve(service: Arc<Service>, bind: &str, cors: CorsLayer, warm: bool) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {bind}: {e}"))?;
    eprintln!("serving on http://{}", listener.local_addr()?);
    if warm {
        let s = service.clone();
        tokio::task::spawn_blocking(move || s.warm());
    }
    axum::serve(listener, router(service, cors))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
