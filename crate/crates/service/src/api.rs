//! `/v1` HTTP routes.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use adashrink::trial::{TrialConfig, TrialState};
use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::session::Session;
use crate::store::{SessionMeta, Store, StoreError};

/// Shared server state.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    store: Store,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    token: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum OpenError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot replay session {id}: {source}")]
    Replay {
        id: String,
        source: adashrink::Error,
    },
}

impl AppState {
    /// Opens the data directory and replays every persisted session.
    pub fn open(store: Store, token: Option<String>) -> Result<Self, OpenError> {
        let mut sessions = HashMap::new();
        for (meta, events) in store.load_all()? {
            let id = meta.id.clone();
            let session = Session::replay(meta, &events).map_err(|source| OpenError::Replay {
                id: id.clone(),
                source,
            })?;
            sessions.insert(id, Arc::new(session));
        }
        log::info!(
            "loaded {} sessions from {}",
            sessions.len(),
            store.root().display()
        );
        Ok(Self {
            inner: Arc::new(Inner {
                store,
                sessions: RwLock::new(sessions),
                token,
            }),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.inner.sessions.read().get(id).cloned().ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, format!("no trial with id '{id}'"))
                .hint("create one with POST /v1/trials")
        })
    }
}

/// JSON error body: `{"error": ..., "hint": ...}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: String,
    hint: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            error: error.into(),
            hint: None,
        }
    }

    fn hint(mut self, hint: impl Into<String>) -> Self {
        self.hint = Some(hint.into());
        self
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.error });
        if let Some(h) = self.hint {
            body["hint"] = h.into();
        }
        (self.status, Json(body)).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes, hint: &str) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("invalid request body: {e}"),
        )
        .hint(hint)
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route(
            "/v1/health",
            get(|| async { Json(json!({ "status": "ok" })) }),
        )
        .route("/v1/trials", post(create).get(list))
        .route("/v1/trials/{id}/next", get(next))
        .route("/v1/trials/{id}/state", get(state_view))
        .route("/v1/trials/{id}/events", get(events))
        .route("/v1/trials/{id}/outcomes", post(outcome))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn auth(
    State(app): State<AppState>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    if let Some(token) = &app.inner.token {
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token")
                .hint("send 'Authorization: Bearer <token>'")
                .into_response();
        }
    }
    next.run(req).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    config: TrialConfig,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Created {
    id: String,
    burn_in_schedule: Vec<usize>,
    version: usize,
}

async fn create(State(app): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let CreateBody { config } = parse(
        &body,
        "expected {\"config\": {\"K\": 3, \"target\": \"sureMin\", ...}}",
    )?;
    let state = TrialState::new(config.clone()).map_err(|e| {
        ApiError::new(StatusCode::BAD_REQUEST, format!("invalid config: {e}"))
            .hint("shrinker targets need K >= 3 and burnInPerArm must be at least 2")
    })?;
    let meta = SessionMeta {
        id: uuid::Uuid::new_v4().simple().to_string(),
        created_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64),
        config,
    };
    let schedule = meta.config.burn_in_schedule();
    let app2 = app.clone();
    let id = tokio::task::spawn_blocking(move || -> Result<String, ApiError> {
        app2.inner.store.create(&meta).map_err(ApiError::internal)?;
        let id = meta.id.clone();
        let session = Arc::new(Session::new(meta, state));
        app2.inner.sessions.write().insert(id.clone(), session);
        Ok(id)
    })
    .await
    .map_err(ApiError::internal)??;
    log::info!("created trial {id}");
    let body = Created {
        id,
        burn_in_schedule: schedule,
        version: 0,
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Summary {
    id: String,
    created_at: u64,
    version: usize,
    target: adashrink::TargetKind,
    #[serde(rename = "K")]
    k: usize,
}

async fn list(State(app): State<AppState>) -> Json<Vec<Summary>> {
    let sessions: Vec<Arc<Session>> = app.inner.sessions.read().values().cloned().collect();
    let mut out: Vec<Summary> = sessions
        .iter()
        .filter_map(|s| {
            let v = s.views();
            let st = v.state.as_ref().ok()?;
            Some(Summary {
                id: st.id.clone(),
                created_at: st.created_at,
                version: v.version,
                target: st.config.target,
                k: st.config.k,
            })
        })
        .collect();
    out.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
    Json(out)
}

async fn next(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let views = app.session(&id)?.views();
    match &views.next {
        Ok(n) => Ok(Json(n).into_response()),
        Err(e) => Err(ApiError::internal(e)),
    }
}

async fn state_view(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let views = app.session(&id)?.views();
    match &views.state {
        Ok(s) => Ok(Json(s).into_response()),
        Err(e) => Err(ApiError::internal(e)),
    }
}

async fn events(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    app.session(&id)?;
    let path = app.inner.store.events_path(&id);
    let body = tokio::task::spawn_blocking(move || std::fs::read(path))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct OutcomeBody {
    expected_version: usize,
    arm: usize,
    y: f64,
    #[serde(default, rename = "override")]
    override_: bool,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Accepted {
    version: usize,
    i: usize,
    arm: usize,
    deviation: bool,
    tau_hat: Vec<f64>,
    #[serde(rename = "Vhat")]
    vhat: Vec<f64>,
}

async fn outcome(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let body: OutcomeBody = parse(
        &body,
        "expected {\"expectedVersion\": <int>, \"arm\": <int>, \"y\": <finite number>, \"override\": <bool, optional>}",
    )?;
    if !body.y.is_finite() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "y must be finite"));
    }
    let session = app.session(&id)?;
    let app2 = app.clone();
    let accepted = tokio::task::spawn_blocking(move || record(&app2, &id, &session, body))
        .await
        .map_err(ApiError::internal)??;
    Ok(Json(accepted).into_response())
}

fn record(
    app: &AppState,
    id: &str,
    session: &Session,
    body: OutcomeBody,
) -> Result<Accepted, ApiError> {
    let mut live = session.live.lock();
    let version = live.state.arrivals();
    if body.expected_version != version {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!(
                "version conflict: expected {}, current {version}",
                body.expected_version
            ),
        )
        .hint("re-read /next and retry with the current version"));
    }
    let arms = live.state.config().arms();
    if body.arm >= arms {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("arm {} out of range 0..{arms}", body.arm),
        ));
    }
    let recommended = live.state.next_assignment().map_err(ApiError::internal)?;
    let deviation = body.arm != recommended;
    if deviation && !body.override_ {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "arm {} differs from the recommended arm {recommended}",
                body.arm
            ),
        )
        .hint("set \"override\": true to record a deliberate deviation"));
    }
    let event = adashrink::Event {
        i: version,
        arm: body.arm,
        y: body.y,
        deviation,
    };
    app.inner
        .store
        .append(id, &event)
        .map_err(ApiError::internal)?;
    live.state
        .record_outcome(event.arm, event.y, event.deviation)
        .map_err(ApiError::internal)?;
    session.publish(&live);
    Ok(Accepted {
        version: live.state.arrivals(),
        i: event.i,
        arm: event.arm,
        deviation,
        tau_hat: live.state.tau_hat(),
        vhat: live.state.vhat(),
    })
}
