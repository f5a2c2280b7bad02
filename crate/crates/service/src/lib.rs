//! Live try-on over websockets. Each connection gets its own streaming
//! session on a processing thread; frames are latest-wins with at most one
//! waiting.
//!
//! Endpoints: `/tryon` (websocket, see [`protocol`]), `GET /healthz`,
//! `GET /garments`.

pub mod protocol;
mod worker;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tryon_core::perception::PerceptionProvider;
use tryon_core::regarsyn::{ReGarSynNetwork, CHECKPOINT_KIND};
use tryon_core::runtime::SessionConfig;
use tryon_core::semantic::Palette;

use protocol::{ClientMessage, ErrorCode, GarmentInfo, ServerMessage, Status, StatusEvent};
use worker::{Job, JobQueue, Worker};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const PORT_ENV: &str = "TRYON_PORT";
pub const DEFAULT_SESSION_CAP: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Core(#[from] tryon_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("no garment checkpoints found in {0}")]
    NoGarments(PathBuf),
    #[error("garment `{0}` is loaded twice")]
    DuplicateGarment(String),
    #[error("garment `{id}` works at {found:?}, others at {expected:?}")]
    ResolutionMismatch { id: String, expected: (usize, usize), found: (usize, usize) },
    #[error("invalid {PORT_ENV}: `{0}`")]
    BadPort(String),
}

/// Garment networks available to sessions, keyed by garment id.
pub struct GarmentRegistry {
    nets: BTreeMap<String, Arc<ReGarSynNetwork>>,
}

impl GarmentRegistry {
    pub fn new(nets: Vec<Arc<ReGarSynNetwork>>) -> Result<Self, ServiceError> {
        let mut map = BTreeMap::new();
        let mut resolution = None;
        for net in nets {
            let id = net.garment_id().to_owned();
            let expected = *resolution.get_or_insert(net.resolution());
            if net.resolution() != expected {
                return Err(ServiceError::ResolutionMismatch { id, expected, found: net.resolution() });
            }
            if map.insert(id.clone(), net).is_some() {
                return Err(ServiceError::DuplicateGarment(id));
            }
        }
        if map.is_empty() {
            return Err(ServiceError::NoGarments(PathBuf::new()));
        }
        Ok(Self { nets: map })
    }

    /// Loads every garment-synthesis checkpoint (`*.ckpt`) in `dir`; other
    /// checkpoint kinds are skipped.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        paths.sort();
        let mut nets = Vec::new();
        for p in paths {
            let ckpt = tryon_core::checkpoint::load_checkpoint(&p, None)?;
            if ckpt.metadata.kind != CHECKPOINT_KIND {
                log::info!("skipping {} ({} checkpoint)", p.display(), ckpt.metadata.kind);
                continue;
            }
            nets.push(Arc::new(ReGarSynNetwork::from_checkpoint(&ckpt)?));
        }
        if nets.is_empty() {
            return Err(ServiceError::NoGarments(dir.to_path_buf()));
        }
        Self::new(nets)
    }

    pub fn get(&self, id: &str) -> Option<&Arc<ReGarSynNetwork>> {
        self.nets.get(id)
    }

    /// The garment a new session starts with (first id in sort order).
    pub fn default_network(&self) -> &Arc<ReGarSynNetwork> {
        self.nets.values().next().expect("registry is never empty")
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.default_network().resolution()
    }

    pub fn items(&self) -> Vec<GarmentInfo> {
        self.nets
            .values()
            .map(|n| {
                let (h, w) = n.resolution();
                GarmentInfo { id: n.garment_id().to_owned(), variant: n.variant().name().to_owned(), resolution: [h, w] }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub session_cap: usize,
    pub session: SessionConfig,
    /// Directory replay paths are resolved under; `None` disables replay.
    pub replay_root: Option<PathBuf>,
    /// Replay rate; `None` uses the sequence's own fps.
    pub replay_fps: Option<f64>,
    pub palette: Arc<Palette>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_cap: DEFAULT_SESSION_CAP,
            session: SessionConfig::default(),
            replay_root: None,
            replay_fps: None,
            palette: Palette::synthetic(),
        }
    }
}

pub struct AppState {
    pub registry: GarmentRegistry,
    /// Perception for client-pushed frames, indexed by the client's `t`.
    pub push_provider: Arc<dyn PerceptionProvider>,
    pub config: ServiceConfig,
    active: Arc<AtomicUsize>,
}

impl AppState {
    pub fn new(registry: GarmentRegistry, push_provider: Arc<dyn PerceptionProvider>, config: ServiceConfig) -> Self {
        Self { registry, push_provider, config, active: Arc::new(AtomicUsize::new(0)) }
    }

    pub fn active_sessions(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    fn try_acquire(&self) -> Option<SessionSlot> {
        let cap = self.config.session_cap;
        self.active
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < cap).then_some(n + 1))
            .ok()
            .map(|_| SessionSlot(self.active.clone()))
    }
}

/// A counted place under the session cap, released on drop.
pub(crate) struct SessionSlot(Arc<AtomicUsize>);

impl Drop for SessionSlot {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// `TRYON_PORT` when set, else `fallback`.
pub fn resolve_port(fallback: u16) -> Result<u16, ServiceError> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| ServiceError::BadPort(v)),
        Err(_) => Ok(fallback),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tryon", get(upgrade))
        .route("/healthz", get(healthz))
        .route("/garments", get(garments))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

pub async fn bind(port: u16) -> std::io::Result<TcpListener> {
    TcpListener::bind(SocketAddr::from(([0, 0, 0, 0], port))).await
}

async fn healthz() -> impl IntoResponse {
    Json(serde_json::json!({ "status": "ok", "version": VERSION }))
}

async fn garments(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    Json(ServerMessage::GarmentList { items: state.registry.items() })
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, state))
}

async fn connection(socket: WebSocket, state: Arc<AppState>) {
    let (mut sink, mut stream) = socket.split();
    let Some(slot) = state.try_acquire() else {
        let busy = ServerMessage::error(ErrorCode::Busy, format!("{} sessions already open", state.config.session_cap), None);
        let _ = sink.send(Message::Text(busy.to_json().into())).await;
        let _ = sink.close().await;
        return;
    };
    let (tx, mut rx) = mpsc::unbounded_channel::<ServerMessage>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if sink.send(Message::Text(msg.to_json().into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    let _ = tx.send(ServerMessage::GarmentList { items: state.registry.items() });

    let queue = Arc::new(JobQueue::new());
    match Worker::new(state.clone(), queue.clone(), tx.clone(), slot) {
        Ok(w) => {
            std::thread::spawn(move || w.run());
        }
        Err(e) => {
            let _ = tx.send(ServerMessage::error(ErrorCode::Runtime, e.to_string(), None));
            drop(tx);
            let _ = writer.await;
            return;
        }
    }

    let mut last_t: Option<u64> = None;
    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Binary(_) => {
                let _ = tx.send(ServerMessage::error(ErrorCode::Malformed, "binary messages are not supported", None));
                continue;
            }
            _ => continue,
        };
        let parsed: ClientMessage = match serde_json::from_str(text.as_str()) {
            Ok(m) => m,
            Err(e) => {
                let _ = tx.send(ServerMessage::error(ErrorCode::Malformed, e.to_string(), None));
                continue;
            }
        };
        let job = match parsed {
            ClientMessage::Frame { data, t } => {
                if last_t.is_some_and(|last| t <= last) {
                    let detail = format!("t must increase, got {t} after {}", last_t.unwrap_or_default());
                    let _ = tx.send(ServerMessage::error(ErrorCode::NonMonotonicT, detail, Some(t)));
                    continue;
                }
                last_t = Some(t);
                Job::Frame { t, data }
            }
            ClientMessage::SelectGarment { garment_id } => Job::Select(garment_id),
            ClientMessage::ResetState => Job::Reset,
            ClientMessage::SetSource { source, path } => Job::Source(source, path),
        };
        if let Some(dropped) = queue.push(job) {
            let _ = tx.send(ServerMessage::status(Status {
                event: Some(StatusEvent::Dropped),
                dropped: Some(dropped),
                pending: queue.pending_frames(),
                ..Default::default()
            }));
        }
    }
    queue.close();
    drop(tx);
    let _ = writer.await;
}
