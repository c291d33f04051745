//! Control plane over HTTP: deploy scenarios, inject churn, stream
//! monitoring as Server-Sent Events.
//!
//! The manager never touches model state; it only starts scenarios,
//! forwards commands and relays what the nodes report.

use std::collections::{BTreeMap, BTreeSet};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::{mpsc, Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use mixfed_core::NodeId;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::config::{ChurnAction, InvalidConfig, ScenarioConfig, TransportKind};
use crate::experiments::GameSummary;
use crate::live::{drive_sim, Command, EntropyRow, NodeStatusRow, RoundRow, Update};
use crate::tcp::drive_tcp;

#[derive(Clone, Debug)]
pub struct ManagerOptions {
    /// Real seconds per simulated second for sim scenarios; 0 is flat out.
    pub pace: f64,
}

impl Default for ManagerOptions {
    fn default() -> Self {
        ManagerOptions { pace: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize)]
struct StatusEvent {
    t_s: f64,
    version: u64,
    running: bool,
    nodes: Vec<NodeStatusRow>,
}

#[derive(Clone, Debug, Serialize)]
struct Snapshot {
    snapshot: bool,
    #[serde(flatten)]
    status: StatusEvent,
    rounds: Vec<RoundRow>,
    entropy: Option<EntropyRow>,
    games: Vec<GameSummary>,
}

#[derive(Clone, Debug)]
struct Outgoing {
    kind: &'static str,
    data: String,
}

struct ScenarioState {
    config: ScenarioConfig,
    version: u64,
    running: bool,
    t_s: f64,
    nodes: BTreeMap<u32, NodeStatusRow>,
    started: BTreeSet<u32>,
    killed: BTreeSet<u32>,
    rounds: Vec<RoundRow>,
    entropy: Option<EntropyRow>,
    games: Vec<GameSummary>,
}

impl ScenarioState {
    fn status_event(&self) -> StatusEvent {
        StatusEvent {
            t_s: self.t_s,
            version: self.version,
            running: self.running,
            nodes: self.nodes.values().cloned().collect(),
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            snapshot: true,
            status: self.status_event(),
            rounds: self.rounds.clone(),
            entropy: self.entropy.clone(),
            games: self.games.clone(),
        }
    }

    /// Merges a batch of reports (last writer wins per node) and marks
    /// nodes that stopped reporting for longer than the heartbeat
    /// timeout as stale.
    fn merge(&mut self, rows: Vec<NodeStatusRow>) {
        let now = rows.iter().map(|r| r.t_s).fold(self.t_s, f64::max);
        self.t_s = now;
        for r in rows {
            self.nodes.insert(r.node_id, r);
        }
        let timeout = self.config.overlay.heartbeat_timeout_s;
        for r in self.nodes.values_mut() {
            r.stale = now - r.t_s > timeout;
        }
    }
}

struct Scenario {
    state: Mutex<ScenarioState>,
    events: broadcast::Sender<Outgoing>,
    commands: Mutex<mpsc::Sender<Command>>,
}

impl Scenario {
    /// Applies an update and broadcasts it while holding the state lock,
    /// so a subscriber that snapshots under the same lock sees every
    /// later event exactly once.
    fn publish(&self, update: Update) {
        let mut st = self.state.lock().expect("scenario lock");
        let out = match update {
            Update::Status(rows) => {
                st.merge(rows);
                Some(("node_status", to_json(&st.status_event())))
            }
            Update::Round(r) => {
                let data = to_json(&r);
                st.rounds.push(r);
                Some(("round", data))
            }
            Update::Entropy(e) => {
                let data = to_json(&e);
                st.entropy = Some(e);
                Some(("entropy", data))
            }
            Update::Game(g) => {
                let data = to_json(&g);
                st.games.push(g);
                Some(("game", data))
            }
            Update::ConfigApplied { version } => {
                st.version = st.version.max(version);
                Some(("node_status", to_json(&st.status_event())))
            }
            Update::Finished { t_s, .. } => {
                st.running = false;
                st.t_s = st.t_s.max(t_s);
                Some(("node_status", to_json(&st.status_event())))
            }
        };
        if let Some((kind, data)) = out {
            let _ = self.events.send(Outgoing { kind, data });
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

#[derive(Default)]
struct Registry {
    next_id: u64,
    scenarios: BTreeMap<u64, Arc<Scenario>>,
}

#[derive(Clone)]
pub struct Manager {
    options: ManagerOptions,
    registry: Arc<Mutex<Registry>>,
}

enum ApiError {
    Invalid(InvalidConfig),
    UnknownScenario(u64),
    UnknownNode(u32),
    Stopped(u64),
    BadRequest(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, body) = match self {
            ApiError::Invalid(e) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": "InvalidConfig", "errors": e.errors}),
            ),
            ApiError::UnknownScenario(id) => (
                StatusCode::NOT_FOUND,
                json!({"error": "UnknownScenario", "scenario_id": id}),
            ),
            ApiError::UnknownNode(id) => (StatusCode::NOT_FOUND, json!({"error": "UnknownNode", "node_id": id})),
            ApiError::Stopped(id) => (
                StatusCode::CONFLICT,
                json!({"error": "ScenarioStopped", "scenario_id": id}),
            ),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, json!({"error": "BadRequest", "message": m})),
        };
        (code, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChurnRequest {
    action: ChurnAction,
    #[serde(default)]
    node_id: Option<u32>,
}

impl Manager {
    pub fn new(options: ManagerOptions) -> Self {
        Manager {
            options,
            registry: Arc::new(Mutex::new(Registry::default())),
        }
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/healthz", get(|| async { Json(json!({"status": "ok"})) }))
            .route("/scenarios", post(deploy))
            .route("/scenarios/{id}/churn", post(churn))
            .route("/scenarios/{id}/metrics", get(metrics))
            .with_state(self.clone())
    }

    fn scenario(&self, id: u64) -> Result<Arc<Scenario>, ApiError> {
        let reg = self.registry.lock().expect("registry lock");
        reg.scenarios.get(&id).cloned().ok_or(ApiError::UnknownScenario(id))
    }

    fn start(&self, config: ScenarioConfig) -> (u64, u64) {
        let (tx, _) = broadcast::channel(4096);
        let (cmd_tx, cmd_rx) = mpsc::channel();
        let version = config.version;
        let scenario = Arc::new(Scenario {
            state: Mutex::new(ScenarioState {
                started: config.node_ids().map(|n| n.0).collect(),
                config: config.clone(),
                version,
                running: true,
                t_s: 0.0,
                nodes: BTreeMap::new(),
                killed: BTreeSet::new(),
                rounds: Vec::new(),
                entropy: None,
                games: Vec::new(),
            }),
            events: tx,
            commands: Mutex::new(cmd_tx),
        });
        let id = {
            let mut reg = self.registry.lock().expect("registry lock");
            reg.next_id += 1;
            let id = reg.next_id;
            reg.scenarios.insert(id, Arc::clone(&scenario));
            id
        };
        let pace = self.options.pace;
        std::thread::spawn(move || {
            let mut sink = |u: Update| scenario.publish(u);
            let result = match config.transport.kind {
                TransportKind::Sim => drive_sim(&config, pace, &cmd_rx, &mut sink),
                TransportKind::Tcp => drive_tcp(&config, &cmd_rx, &mut sink).map(|_| ()),
            };
            if result.is_err() {
                sink(Update::Finished {
                    completed: false,
                    t_s: 0.0,
                });
            }
        });
        (id, version)
    }
}

/// `POST /scenarios`: a config deploys a new scenario. A body that also
/// names an existing `scenario_id` redeploys it in place; its version is
/// bumped past the running one when not given higher.
async fn deploy(State(m): State<Manager>, Json(mut body): Json<Value>) -> Result<Json<Value>, ApiError> {
    let target = match body.as_object_mut() {
        Some(obj) => obj.remove("scenario_id"),
        None => return Err(ApiError::BadRequest("body must be a JSON object".into())),
    };
    let explicit_version = body.get("version").and_then(Value::as_u64);
    let Some(target) = target else {
        let cfg = ScenarioConfig::from_value(body).map_err(ApiError::Invalid)?;
        let (id, version) = m.start(cfg);
        return Ok(Json(json!({"scenario_id": id, "version": version})));
    };
    let id = target
        .as_u64()
        .ok_or_else(|| ApiError::BadRequest("scenario_id must be an integer".into()))?;
    let scenario = m.scenario(id)?;
    let mut cfg = ScenarioConfig::from_value(body).map_err(ApiError::Invalid)?;
    let mut st = scenario.state.lock().expect("scenario lock");
    if !st.running {
        return Err(ApiError::Stopped(id));
    }
    cfg.version = match explicit_version {
        Some(v) if v > st.version => v,
        _ => st.version + 1,
    };
    st.version = cfg.version;
    st.config = cfg.clone();
    let _ = scenario
        .commands
        .lock()
        .expect("command lock")
        .send(Command::Reconfigure(cfg.node_config()));
    Ok(Json(json!({"scenario_id": id, "version": cfg.version})))
}

async fn churn(
    State(m): State<Manager>,
    Path(id): Path<u64>,
    Json(req): Json<ChurnRequest>,
) -> Result<Json<Value>, ApiError> {
    let scenario = m.scenario(id)?;
    let mut st = scenario.state.lock().expect("scenario lock");
    if !st.running {
        return Err(ApiError::Stopped(id));
    }
    let commands = scenario.commands.lock().expect("command lock");
    match req.action {
        ChurnAction::Kill => {
            let node = req
                .node_id
                .ok_or_else(|| ApiError::BadRequest("kill needs node_id".into()))?;
            if !st.started.contains(&node) || st.killed.contains(&node) {
                return Err(ApiError::UnknownNode(node));
            }
            st.killed.insert(node);
            let _ = commands.send(Command::Kill(NodeId(node)));
            Ok(Json(json!({"scenario_id": id, "action": "kill", "node_id": node})))
        }
        ChurnAction::Add => {
            let node = st.started.iter().next_back().map_or(0, |n| n + 1);
            st.started.insert(node);
            let _ = commands.send(Command::Add);
            Ok(Json(json!({"scenario_id": id, "action": "add", "node_id": node})))
        }
    }
}

async fn metrics(
    State(m): State<Manager>,
    Path(id): Path<u64>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let scenario = m.scenario(id)?;
    let (first, rx) = {
        let st = scenario.state.lock().expect("scenario lock");
        let first = Outgoing {
            kind: "node_status",
            data: to_json(&st.snapshot()),
        };
        (first, scenario.events.subscribe())
    };
    let s = stream::unfold((Some(first), rx, scenario), |(pending, mut rx, scenario)| async move {
        if let Some(out) = pending {
            let ev = Event::default().event(out.kind).data(out.data);
            return Some((Ok(ev), (None, rx, scenario)));
        }
        match rx.recv().await {
            Ok(out) => {
                let ev = Event::default().event(out.kind).data(out.data);
                Some((Ok(ev), (None, rx, scenario)))
            }
            // A slow client missed events: resynchronise from a fresh
            // snapshot.
            Err(broadcast::error::RecvError::Lagged(_)) => {
                let (data, fresh) = {
                    let st = scenario.state.lock().expect("scenario lock");
                    (to_json(&st.snapshot()), scenario.events.subscribe())
                };
                let ev = Event::default().event("node_status").data(data);
                Some((Ok(ev), (None, fresh, scenario)))
            }
            Err(broadcast::error::RecvError::Closed) => None,
        }
    });
    Ok(Sse::new(s).keep_alive(KeepAlive::default()))
}

/// Serves the manager on `addr` until ctrl-c.
pub async fn serve(addr: SocketAddr, options: ManagerOptions) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("manager listening on http://{}", listener.local_addr()?);
    axum::serve(listener, Manager::new(options).router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
