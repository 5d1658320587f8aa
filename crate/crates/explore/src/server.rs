use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use axum::extract::rejection::QueryRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::Method;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use nightlab_core::intermittence::{RankParams, Thresholds};
use nightlab_core::model::Verdict;
use nightlab_core::trdb::{OutcomeFilter, Snapshot, Trdb};
use serde::Serialize;
use tokio::net::TcpListener;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::views::{self, Axis, GridQuery, DEFAULT_GRID_LIMIT, DEFAULT_TOP_FAILING, MAX_GRID_LIMIT};
use crate::ApiError;

type Fingerprint = Vec<(String, u64, Option<SystemTime>)>;

/// Shares the most recent snapshot of a store directory between requests.
/// The snapshot is reloaded whenever a store file changes size or mtime.
#[derive(Debug)]
pub struct StoreHandle {
    root: PathBuf,
    cached: Mutex<Option<(Fingerprint, Arc<Snapshot>)>>,
}

impl StoreHandle {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        StoreHandle {
            root: root.into(),
            cached: Mutex::new(None),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn fingerprint(&self) -> Result<Fingerprint, ApiError> {
        let unavailable = |e: std::io::Error| ApiError::Unavailable(format!("store {}: {e}", self.root.display()));
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.root).map_err(unavailable)? {
            let entry = entry.map_err(unavailable)?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.ends_with(".ndjson") {
                continue;
            }
            let meta = entry.metadata().map_err(unavailable)?;
            out.push((name, meta.len(), meta.modified().ok()));
        }
        out.sort();
        Ok(out)
    }

    pub fn snapshot(&self) -> Result<Arc<Snapshot>, ApiError> {
        let fp = self.fingerprint()?;
        let mut cached = self.cached.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((old, snap)) = cached.as_ref() {
            if *old == fp {
                return Ok(Arc::clone(snap));
            }
        }
        let snap = Arc::new(
            Trdb::open_read_only(&self.root)
                .map_err(|e| ApiError::Unavailable(e.to_string()))?
                .into_snapshot(),
        );
        *cached = Some((fp, Arc::clone(&snap)));
        Ok(snap)
    }
}

/// Query string pairs with typed accessors; unknown or repeated keys are rejected.
struct Params(BTreeMap<String, String>);

impl Params {
    fn parse(query: Result<Query<Vec<(String, String)>>, QueryRejection>, allowed: &[&str]) -> Result<Self, ApiError> {
        let Query(pairs) = query.map_err(|e| ApiError::BadRequest(e.body_text()))?;
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if !allowed.contains(&k.as_str()) {
                return Err(ApiError::BadRequest(format!(
                    "unknown parameter `{k}` (expected one of: {})",
                    allowed.join(", ")
                )));
            }
            if map.insert(k.clone(), v).is_some() {
                return Err(ApiError::BadRequest(format!("parameter `{k}` given twice")));
            }
        }
        Ok(Params(map))
    }

    /// Empty values count as absent.
    fn string(&self, key: &str) -> Option<String> {
        self.0.get(key).filter(|v| !v.is_empty()).cloned()
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ApiError> {
        self.string(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| ApiError::BadRequest(format!("cannot parse `{key}` value `{v}`")))
            })
            .transpose()
    }

    fn required(&self, key: &str) -> Result<String, ApiError> {
        self.string(key)
            .ok_or_else(|| ApiError::BadRequest(format!("missing parameter `{key}`")))
    }

    fn filter(&self) -> Result<OutcomeFilter, ApiError> {
        let verdicts = match self.string("verdict") {
            None => None,
            Some(list) => Some(
                list.split(',')
                    .map(|v| Verdict::from_str(v.trim()).map_err(|e| ApiError::BadRequest(e.to_string())))
                    .collect::<Result<_, _>>()?,
            ),
        };
        let filter = OutcomeFilter {
            branch: self.string("branch"),
            system_id: self.string("system"),
            test_id: self.string("test"),
            session_id: self.string("session"),
            verdicts,
            from_night: self.parsed("from_night")?,
            to_night: self.parsed("to_night")?,
            ..Default::default()
        };
        if let (Some(a), Some(b)) = (filter.from_night, filter.to_night) {
            if a > b {
                return Err(ApiError::BadRequest(format!("from_night {a} is after to_night {b}")));
            }
        }
        Ok(filter)
    }
}

const FILTER_KEYS: [&str; 7] = ["branch", "system", "test", "session", "verdict", "from_night", "to_night"];

fn keys(extra: &[&'static str]) -> Vec<&'static str> {
    FILTER_KEYS.iter().chain(extra).copied().collect()
}

type AppState = Arc<StoreHandle>;
type Q = Result<Query<Vec<(String, String)>>, QueryRejection>;

/// Loads the snapshot and renders the view off the async worker threads.
async fn render<T, F>(state: AppState, view: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Snapshot, &Path) -> Result<T, ApiError> + Send + 'static,
{
    let joined = tokio::task::spawn_blocking(move || {
        let snap = state.snapshot()?;
        view(&snap, state.root())
    })
    .await;
    match joined {
        Ok(Ok(body)) => Json(body).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::Unavailable(format!("request failed: {e}")).into_response(),
    }
}

async fn start(State(state): State<AppState>, q: Q) -> Response {
    if let Err(e) = Params::parse(q, &[]) {
        return e.into_response();
    }
    render(state, |snap, _| Ok(views::start(snap))).await
}

async fn outcomes(State(state): State<AppState>, q: Q) -> Response {
    let parsed = Params::parse(q, &keys(&["limit", "offset"])).and_then(|p| {
        let limit = p.parsed("limit")?.unwrap_or(DEFAULT_GRID_LIMIT);
        if limit == 0 || limit > MAX_GRID_LIMIT {
            return Err(ApiError::BadRequest(format!("limit must be in 1..={MAX_GRID_LIMIT}")));
        }
        Ok(GridQuery {
            filter: p.filter()?,
            limit,
            offset: p.parsed("offset")?.unwrap_or(0),
        })
    });
    match parsed {
        Ok(grid) => render(state, move |snap, _| Ok(views::outcomes(snap, &grid))).await,
        Err(e) => e.into_response(),
    }
}

async fn outcome(State(state): State<AppState>, UrlPath((session, test)): UrlPath<(String, String)>, q: Q) -> Response {
    if let Err(e) = Params::parse(q, &[]) {
        return e.into_response();
    }
    render(state, move |snap, root| views::outcome(snap, root, &session, &test)).await
}

async fn session(State(state): State<AppState>, UrlPath(id): UrlPath<String>, q: Q) -> Response {
    if let Err(e) = Params::parse(q, &[]) {
        return e.into_response();
    }
    render(state, move |snap, _| views::session(snap, &id)).await
}

async fn heatmap(State(state): State<AppState>, q: Q) -> Response {
    let parsed = Params::parse(q, &keys(&["axis"]))
        .and_then(|p| Ok((p.filter()?, p.parsed::<Axis>("axis")?.unwrap_or(Axis::System))));
    match parsed {
        Ok((filter, axis)) => render(state, move |snap, _| Ok(views::heatmap(snap, &filter, axis))).await,
        Err(e) => e.into_response(),
    }
}

async fn measurements(State(state): State<AppState>, q: Q) -> Response {
    let parsed = Params::parse(q, &keys(&["metric"])).and_then(|p| Ok((p.filter()?, p.required("metric")?)));
    match parsed {
        Ok((filter, metric)) => render(state, move |snap, _| Ok(views::measurements(snap, &filter, &metric))).await,
        Err(e) => e.into_response(),
    }
}

async fn compare(State(state): State<AppState>, q: Q) -> Response {
    let parsed = Params::parse(q, &["branch_a", "branch_b", "from_night"]).and_then(|p| {
        Ok((p.required("branch_a")?, p.required("branch_b")?, p.parsed("from_night")?))
    });
    match parsed {
        Ok((a, b, from)) => render(state, move |snap, _| views::compare(snap, &a, &b, from)).await,
        Err(e) => e.into_response(),
    }
}

/// Builds intermittence parameters from `tau`, `min_runs`, `branch`,
/// `from_night`, `to_night` and `errors` (`fail` or `ignore`).
fn rank_params(p: &Params) -> Result<RankParams, ApiError> {
    let d = Thresholds::default();
    let thresholds = Thresholds::new(
        p.parsed("tau")?.unwrap_or(d.tau()),
        p.parsed("min_runs")?.unwrap_or(d.min_runs()),
    )
    .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let error_as_fail = match p.string("errors").as_deref() {
        None | Some("fail") => true,
        Some("ignore") => false,
        Some(other) => return Err(ApiError::BadRequest(format!("errors must be `fail` or `ignore`, not `{other}`"))),
    };
    Ok(RankParams {
        thresholds,
        branch: p.string("branch"),
        from_night: p.parsed("from_night")?,
        to_night: p.parsed("to_night")?,
        error_as_fail,
    })
}

async fn analyze(State(state): State<AppState>, q: Q) -> Response {
    let parsed = Params::parse(q, &["branch", "tau", "min_runs", "from_night", "to_night", "errors", "top"])
        .and_then(|p| Ok((rank_params(&p)?, p.parsed("top")?.unwrap_or(DEFAULT_TOP_FAILING))));
    match parsed {
        Ok((params, top)) => render(state, move |snap, _| Ok(views::analyze(snap, &params, top))).await,
        Err(e) => e.into_response(),
    }
}

async fn api_not_found() -> Response {
    ApiError::NotFound("no such endpoint".into()).into_response()
}

/// The `/api` routes, plus static files from `ui_dir` for everything else.
pub fn router(store: Arc<StoreHandle>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/start", get(start))
        .route("/api/outcomes", get(outcomes))
        .route("/api/outcome/{session_id}/{test_id}", get(outcome))
        .route("/api/session/{session_id}", get(session))
        .route("/api/heatmap", get(heatmap))
        .route("/api/measurements", get(measurements))
        .route("/api/compare", get(compare))
        .route("/api/analyze", get(analyze))
        .route("/api/{*rest}", get(api_not_found))
        .with_state(store)
        .layer(CorsLayer::new().allow_origin(Any).allow_methods([Method::GET]));
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.fallback(api_not_found),
    }
}

pub async fn serve(listener: TcpListener, store: Arc<StoreHandle>, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    axum::serve(listener, router(store, ui_dir.as_deref())).await
}
