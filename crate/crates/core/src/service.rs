//! HTTP session API for stepping an environment by hand while choosing among
//! the actions a set-valued policy offers.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, RwLock};
use tower_http::services::ServeDir;

use crate::env::{EnvKind, EnvSpec};
use crate::error::SvpError;
use crate::mdp::{Environment, TabularMdp};
use crate::svp::{solve_policy, Algorithm, Solved};

pub const API_VERSION: &str = "1";

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "status": self.status.as_u16() }))).into_response()
    }
}

impl From<SvpError> for ApiError {
    fn from(e: SvpError) -> Self {
        let status = match e {
            SvpError::NoFixedPoint(_)
            | SvpError::NotDag(_)
            | SvpError::NegativeValue { .. }
            | SvpError::NegativeReward { .. }
            | SvpError::NotConverged { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            SvpError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, e.body_text())
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

fn default_zeta() -> f64 {
    0.05
}

fn default_algo() -> String {
    Algorithm::NearGreedyVi.name().to_string()
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    pub env: EnvSpec,
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    #[serde(default = "default_algo")]
    pub algo: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub allow_off_menu: bool,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ActRequest {
    pub action: usize,
    #[serde(default)]
    pub allow_off_menu: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OfferedAction {
    pub action: usize,
    pub label: String,
    pub q_pi: f64,
    pub q_star: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Observation {
    pub session_id: String,
    pub state: usize,
    pub state_label: String,
    pub step: usize,
    pub done: bool,
    pub offered: Vec<OfferedAction>,
    pub v_star: f64,
    /// `(1 - zeta) V*(s)` at the current state.
    pub zeta_floor: f64,
    pub discounted_return: f64,
    /// `(1 - zeta) V*(s0)` for the episode's start state.
    pub guarantee: f64,
    pub last_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub state: usize,
    pub offered: Vec<usize>,
    pub action: usize,
    pub off_menu: bool,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub env: EnvSpec,
    pub algo: String,
    pub zeta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub resets: u64,
    pub start_state: usize,
    pub state_labels: Vec<String>,
    pub action_labels: Vec<String>,
    pub history: Vec<HistoryEntry>,
    pub observation: Observation,
}

struct Session {
    id: String,
    env: EnvSpec,
    algo: Algorithm,
    zeta: f64,
    seed: u64,
    allow_off_menu: bool,
    mdp: TabularMdp,
    solved: Solved,
    rng: ChaCha8Rng,
    resets: u64,
    start_state: usize,
    state: usize,
    discounted_return: f64,
    discount: f64,
    history: Vec<HistoryEntry>,
}

impl Session {
    fn new(id: String, req: &CreateSession, algo: Algorithm, mdp: TabularMdp, solved: Solved) -> Self {
        let mut session = Session {
            id,
            env: req.env.clone(),
            algo,
            zeta: req.zeta,
            seed: req.seed,
            allow_off_menu: req.allow_off_menu,
            mdp,
            solved,
            rng: ChaCha8Rng::seed_from_u64(req.seed),
            resets: 0,
            start_state: 0,
            state: 0,
            discounted_return: 0.0,
            discount: 1.0,
            history: Vec::new(),
        };
        session.restart();
        session
    }

    /// Reseed from `(seed, resets)` and sample a start state.
    fn restart(&mut self) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.rng.set_stream(self.resets);
        self.start_state = self.mdp.reset(&mut self.rng);
        self.state = self.start_state;
        self.discounted_return = 0.0;
        self.discount = 1.0;
        self.history.clear();
    }

    fn done(&self) -> bool {
        self.mdp.is_terminal(self.state)
    }

    fn observation(&self) -> Observation {
        let s = self.state;
        let v_star = self.solved.v_star[s];
        let offered = if self.done() {
            Vec::new()
        } else {
            self.solved
                .policy
                .set(s)
                .iter()
                .map(|a| OfferedAction {
                    action: a,
                    label: self.mdp.action_label(a).to_string(),
                    q_pi: self.solved.q_pi.get(s, a),
                    q_star: self.solved.q_star.get(s, a),
                })
                .collect()
        };
        Observation {
            session_id: self.id.clone(),
            state: s,
            state_label: self.mdp.state_label(s).to_string(),
            step: self.history.len(),
            done: self.done(),
            offered,
            v_star,
            zeta_floor: (1.0 - self.zeta) * v_star,
            discounted_return: self.discounted_return,
            guarantee: (1.0 - self.zeta) * self.solved.v_star[self.start_state],
            last_reward: self.history.last().map(|h| h.reward),
        }
    }

    fn act(&mut self, req: &ActRequest) -> Result<Observation, ApiError> {
        if self.done() {
            return Err(ApiError::new(StatusCode::GONE, "session has reached a terminal state; reset to continue"));
        }
        if req.action >= self.mdp.action_count() {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("action {} does not exist", req.action)));
        }
        let offered = self.solved.policy.set(self.state);
        let off_menu = !offered.contains(req.action);
        if off_menu && !(self.allow_off_menu || req.allow_off_menu) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("action {} is not offered at state {}; offered {offered}", req.action, self.state),
            ));
        }
        let t = self.mdp.step(self.state, req.action, &mut self.rng);
        self.discounted_return += self.discount * t.reward;
        self.discount *= self.mdp.gamma();
        self.history.push(HistoryEntry {
            state: self.state,
            offered: offered.to_vec(),
            action: req.action,
            off_menu,
            reward: t.reward,
            next_state: t.next,
        });
        self.state = t.next;
        Ok(self.observation())
    }

    fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            session_id: self.id.clone(),
            env: self.env.clone(),
            algo: self.algo.name().to_string(),
            zeta: self.zeta,
            gamma: self.mdp.gamma(),
            seed: self.seed,
            resets: self.resets,
            start_state: self.start_state,
            state_labels: self.mdp.state_labels().to_vec(),
            action_labels: self.mdp.action_labels().to_vec(),
            history: self.history.clone(),
            observation: self.observation(),
        }
    }
}

/// Session store; each session has its own lock.
#[derive(Default)]
pub struct AppState {
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    async fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}")))
    }
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionSnapshot>), ApiError> {
    let Json(req) = body?;
    if req.env.kind == EnvKind::File {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "file environments are not served"));
    }
    let algo = Algorithm::parse(&req.algo)?;
    let spec = req.env.clone();
    let zeta = req.zeta;
    let (mdp, solved) = tokio::task::spawn_blocking(move || -> crate::Result<_> {
        let mdp = spec.build()?;
        let solved = solve_policy(&mdp, algo, zeta)?;
        Ok((mdp, solved))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::Relaxed) + 1);
    let session = Session::new(id.clone(), &req, algo, mdp, solved);
    let snapshot = session.snapshot();
    app.sessions.write().await.insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(snapshot)))
}

async fn session_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionSnapshot> {
    let session = app.get(&id).await?;
    let guard = session.lock().await;
    Ok(Json(guard.snapshot()))
}

async fn act(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<ActRequest>, JsonRejection>,
) -> ApiResult<Observation> {
    let session = app.get(&id).await?;
    let Json(req) = body?;
    let mut guard = session.lock().await;
    Ok(Json(guard.act(&req)?))
}

async fn reset(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionSnapshot> {
    let session = app.get(&id).await?;
    let mut guard = session.lock().await;
    guard.resets += 1;
    guard.restart();
    Ok(Json(guard.snapshot()))
}

async fn list_envs() -> Json<serde_json::Value> {
    Json(json!({
        "version": API_VERSION,
        "envs": [
            { "kind": "chain", "params": { "k": 5, "seed": 0, "gamma": 0.9 }, "description": "k-state chain with four actions and seeded rewards" },
            { "kind": "cyclic_chain", "params": { "k": 5, "seed": 0, "gamma": 0.9 }, "description": "chain whose left actions move back" },
            { "kind": "frozen_lake", "params": { "map": "4x4", "gamma": 0.9 }, "description": "deterministic FrozenLake with per-action step rewards" },
            { "kind": "frozen_lake", "params": { "map": "8x8", "gamma": 0.9 }, "description": "deterministic FrozenLake 8x8" },
            { "kind": "appendix_c", "params": {}, "description": "three-state MDP without a near-greedy fixed point at zeta 0.2" },
        ],
        "algorithms": Algorithm::ALL.iter().map(|a| a.name()).collect::<Vec<_>>(),
    }))
}

/// All API routes, plus static files from `static_dir` when given.
pub fn router(app: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/envs", get(list_envs))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_state))
        .route("/sessions/{id}/act", post(act))
        .route("/sessions/{id}/reset", post(reset))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(addr: SocketAddr, static_dir: Option<PathBuf>) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(AppState::new(), static_dir)).await?;
    Ok(())
}
