//! The per-connection processing thread. It owns the try-on session, so
//! frames and controls are applied strictly in arrival order and a garment
//! switch can never interleave with a frame.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use tokio::sync::mpsc::UnboundedSender;
use tryon_core::perception::{DirectoryProvider, PerceptionProvider};
use tryon_core::raster::FrameImage;
use tryon_core::runtime::{FrameOutcome, TryOnSession};
use tryon_core::video;

use crate::protocol::{ErrorCode, ServerMessage, SourceKind, Status, StatusEvent};
use crate::{AppState, SessionSlot};

#[derive(Debug)]
pub(crate) enum Job {
    Frame { t: u64, data: String },
    Select(String),
    Reset,
    Source(SourceKind, Option<String>),
}

struct QueueState {
    jobs: VecDeque<Job>,
    closed: bool,
}

/// Ordered jobs holding at most one frame: a new frame evicts the pending
/// one.
pub(crate) struct JobQueue {
    state: Mutex<QueueState>,
    ready: Condvar,
}

enum Next {
    Job(Job),
    Timeout,
    Closed,
}

impl JobQueue {
    pub fn new() -> Self {
        Self { state: Mutex::new(QueueState { jobs: VecDeque::new(), closed: false }), ready: Condvar::new() }
    }

    /// Returns the `t` of a frame this push evicted.
    pub fn push(&self, job: Job) -> Option<u64> {
        let mut s = self.state.lock().expect("queue lock");
        let mut dropped = None;
        if matches!(job, Job::Frame { .. }) {
            if let Some(pos) = s.jobs.iter().position(|j| matches!(j, Job::Frame { .. })) {
                if let Some(Job::Frame { t, .. }) = s.jobs.remove(pos) {
                    dropped = Some(t);
                }
            }
        }
        s.jobs.push_back(job);
        self.ready.notify_one();
        dropped
    }

    pub fn pending_frames(&self) -> usize {
        let s = self.state.lock().expect("queue lock");
        s.jobs.iter().filter(|j| matches!(j, Job::Frame { .. })).count()
    }

    pub fn close(&self) {
        self.state.lock().expect("queue lock").closed = true;
        self.ready.notify_all();
    }

    fn next(&self, timeout: Option<Duration>) -> Next {
        let deadline = timeout.map(|d| Instant::now() + d);
        let mut s = self.state.lock().expect("queue lock");
        loop {
            if s.closed {
                return Next::Closed;
            }
            if let Some(job) = s.jobs.pop_front() {
                return Next::Job(job);
            }
            match deadline {
                None => s = self.ready.wait(s).expect("queue lock"),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Next::Timeout;
                    }
                    s = self.ready.wait_timeout(s, d - now).expect("queue lock").0;
                }
            }
        }
    }
}

/// Output rate over the last few frames.
struct FpsMeter {
    stamps: VecDeque<Instant>,
}

impl FpsMeter {
    const WINDOW: usize = 30;

    fn tick(&mut self) -> f64 {
        if self.stamps.len() == Self::WINDOW {
            self.stamps.pop_front();
        }
        self.stamps.push_back(Instant::now());
        match (self.stamps.front(), self.stamps.back()) {
            (Some(a), Some(b)) if self.stamps.len() > 1 && b > a => {
                (self.stamps.len() - 1) as f64 / (*b - *a).as_secs_f64()
            }
            _ => 0.0,
        }
    }
}

struct Replay {
    dir: PathBuf,
    provider: DirectoryProvider,
    count: usize,
    period: Duration,
    due: Instant,
    t: u64,
}

pub(crate) struct Worker {
    state: Arc<AppState>,
    queue: Arc<JobQueue>,
    out: UnboundedSender<ServerMessage>,
    session: TryOnSession,
    replay: Option<Replay>,
    fps: FpsMeter,
    _slot: SessionSlot,
}

impl Worker {
    pub fn new(
        state: Arc<AppState>,
        queue: Arc<JobQueue>,
        out: UnboundedSender<ServerMessage>,
        slot: SessionSlot,
    ) -> tryon_core::Result<Self> {
        let net = state.registry.default_network().clone();
        let session = TryOnSession::new(net, state.config.session.clone())?;
        Ok(Self { state, queue, out, session, replay: None, fps: FpsMeter { stamps: VecDeque::new() }, _slot: slot })
    }

    fn send(&self, msg: ServerMessage) {
        // The connection may already be gone; nothing left to tell.
        let _ = self.out.send(msg);
    }

    fn status(&self, status: Status) {
        self.send(ServerMessage::status(Status { pending: self.queue.pending_frames(), ..status }));
    }

    pub fn run(mut self) {
        self.status(Status {
            event: Some(StatusEvent::GarmentSelected),
            garment_id: Some(self.session.garment_id().to_owned()),
            source: Some(SourceKind::Push),
            ..Default::default()
        });
        loop {
            let timeout = self.replay.as_ref().map(|r| r.due.saturating_duration_since(Instant::now()));
            match self.queue.next(timeout) {
                Next::Closed => break,
                Next::Timeout => self.replay_step(),
                Next::Job(job) => self.handle(job),
            }
        }
        log::debug!("session worker for {} finished", self.session.garment_id());
    }

    fn handle(&mut self, job: Job) {
        match job {
            Job::Frame { t, data } => self.push_frame(t, &data),
            Job::Select(id) => match self.state.registry.get(&id) {
                None => self.send(ServerMessage::error(ErrorCode::UnknownGarment, format!("no garment `{id}`"), None)),
                Some(net) => match self.session.switch_network(net.clone()) {
                    Ok(()) => self.status(Status {
                        event: Some(StatusEvent::GarmentSelected),
                        garment_id: Some(id),
                        ..Default::default()
                    }),
                    Err(e) => self.send(ServerMessage::error(ErrorCode::Runtime, e.to_string(), None)),
                },
            },
            Job::Reset => match self.session.reset_state() {
                Ok(()) => self.status(Status { event: Some(StatusEvent::StateReset), ..Default::default() }),
                Err(e) => self.send(ServerMessage::error(ErrorCode::Runtime, e.to_string(), None)),
            },
            Job::Source(SourceKind::Push, _) => {
                self.replay = None;
                self.status(Status {
                    event: Some(StatusEvent::SourceChanged),
                    source: Some(SourceKind::Push),
                    ..Default::default()
                });
            }
            Job::Source(SourceKind::Replay, path) => match self.open_replay(path.as_deref()) {
                Ok(r) => {
                    self.replay = Some(r);
                    self.status(Status {
                        event: Some(StatusEvent::SourceChanged),
                        source: Some(SourceKind::Replay),
                        ..Default::default()
                    });
                }
                Err(detail) => self.send(ServerMessage::error(ErrorCode::BadPath, detail, None)),
            },
        }
    }

    fn open_replay(&self, path: Option<&str>) -> Result<Replay, String> {
        let root = self.state.config.replay_root.as_ref().ok_or("replay is disabled on this server")?;
        let rel = std::path::Path::new(path.ok_or("replay needs a path")?);
        if rel.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
            return Err(format!("`{}` must be a plain relative path", rel.display()));
        }
        let dir = root.join(rel);
        let count = video::frame_count(&dir).map_err(|e| e.to_string())?;
        if count == 0 {
            return Err(format!("`{}` holds no frames", rel.display()));
        }
        let resolution = self.session.network().resolution();
        let provider = DirectoryProvider::open(&dir, resolution, self.state.config.palette.clone())
            .map_err(|e| e.to_string())?;
        let fps = match self.state.config.replay_fps {
            Some(f) => f,
            None => video::read_info(&dir).map(|i| i.fps).unwrap_or(30.0),
        };
        let period = Duration::from_secs_f64(1.0 / fps.max(1e-3));
        Ok(Replay { dir, provider, count, period, due: Instant::now(), t: 0 })
    }

    fn replay_step(&mut self) {
        let Some(mut r) = self.replay.take() else { return };
        let t = r.t;
        let index = (t % r.count as u64) as usize;
        let result = FrameImage::load_image(video::frame_path(&r.dir, index), 3)
            .and_then(|frame| self.session.process_frame_at(index as u64, &frame, &r.provider));
        self.respond(t, result);
        r.t += 1;
        r.due += r.period;
        self.replay = Some(r);
    }

    fn push_frame(&mut self, t: u64, data: &str) {
        if self.replay.is_some() {
            let detail = "frames are ignored while a replay is streaming";
            return self.send(ServerMessage::error(ErrorCode::WrongSource, detail, Some(t)));
        }
        let frame = match BASE64.decode(data.as_bytes()) {
            Ok(bytes) => FrameImage::decode(&bytes, 3),
            Err(e) => return self.send(ServerMessage::error(ErrorCode::Decode, e.to_string(), Some(t))),
        };
        let frame = match frame {
            Ok(f) => f,
            Err(e) => return self.send(ServerMessage::error(ErrorCode::Decode, e.to_string(), Some(t))),
        };
        let expected = self.session.network().resolution();
        if frame.resolution() != expected {
            let detail = format!("frame is {:?}, the garment network works at {expected:?}", frame.resolution());
            return self.send(ServerMessage::error(ErrorCode::FrameSize, detail, Some(t)));
        }
        let provider: &dyn PerceptionProvider = self.state.push_provider.as_ref();
        let result = self.session.process_frame_at(t, &frame, provider);
        self.respond(t, result);
    }

    fn respond(&mut self, t: u64, result: tryon_core::Result<FrameOutcome>) {
        let outcome = match result {
            Ok(o) => o,
            Err(e) => return self.send(ServerMessage::error(ErrorCode::Runtime, e.to_string(), Some(t))),
        };
        let data = match outcome.image.encode_png() {
            Ok(png) => BASE64.encode(png),
            Err(e) => return self.send(ServerMessage::error(ErrorCode::Runtime, e.to_string(), Some(t))),
        };
        let fps = self.fps.tick();
        self.send(ServerMessage::TryonFrame { data, t, fps, composited: outcome.composited });
        if outcome.auto_reset {
            self.status(Status { event: Some(StatusEvent::AutoReset), ..Default::default() });
        }
    }
}
