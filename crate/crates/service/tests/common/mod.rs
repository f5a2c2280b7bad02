#![allow(dead_code, unused_imports)]

pub use std::sync::Arc;
pub use std::time::Duration;

pub use base64::engine::general_purpose::STANDARD as BASE64;
pub use base64::Engine;
pub use futures::{SinkExt, StreamExt};
pub use tokio::io::{AsyncReadExt, AsyncWriteExt};
pub use tokio::net::{TcpListener, TcpStream};
pub use tokio_tungstenite::tungstenite::Message;
pub use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};
pub use tryon_core::config::PipelineConfig;
pub use tryon_core::perception::{PerceptionProvider, SyntheticProvider};
pub use tryon_core::raster::FrameImage;
pub use tryon_core::regarsyn::{ReGarSynConfig, ReGarSynNetwork, Variant};
pub use tryon_core::runtime::{SessionConfig, TryOnSession};
pub use tryon_core::synth::{generate_sequence, GarmentStyle, SyntheticGarmentSpec};
pub use tryon_core::video;
pub use tryon_service::protocol::{ClientMessage, ErrorCode, ServerMessage, SourceKind, StatusEvent};
pub use tryon_service::{AppState, GarmentRegistry, ServiceConfig};

pub type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

pub const RES: (usize, usize) = (32, 24);

pub fn net(id: &str, seed: u64) -> Arc<ReGarSynNetwork> {
    let cfg = ReGarSynConfig { width: 4, residual_blocks: 1, seed, ..ReGarSynConfig::desk(&PipelineConfig::default()) };
    Arc::new(ReGarSynNetwork::new(&cfg, Variant::Recurrent, id, RES).unwrap())
}

pub struct Fixture {
    pub addr: std::net::SocketAddr,
    pub frames: Vec<FrameImage>,
    pub provider: SyntheticProvider,
    pub nets: [Arc<ReGarSynNetwork>; 2],
    _replay: tempfile::TempDir,
}

pub async fn start(session_cap: usize) -> Fixture {
    let spec = SyntheticGarmentSpec::preset(GarmentStyle::Tight);
    let recs = Arc::new(generate_sequence(&spec, 6, RES, 3).unwrap());
    let provider = SyntheticProvider::new(recs.clone(), spec.clone(), 3).unwrap().cyclic();
    let replay = tempfile::tempdir().unwrap();
    let info = video::SequenceInfo {
        person_id: "p".into(),
        frame_count: 6,
        resolution: [RES.0, RES.1],
        fps: 30.0,
        seed: 3,
        garment: Some(spec.clone()),
        motion: "default".into(),
    };
    let plain = SyntheticProvider::new(recs.clone(), spec, 3).unwrap();
    video::write_synthetic(replay.path().join("seq"), &plain, &info).unwrap();

    let nets = [net("a", 1), net("b", 2)];
    let registry = GarmentRegistry::new(nets.to_vec()).unwrap();
    let config = ServiceConfig {
        session_cap,
        replay_root: Some(replay.path().to_path_buf()),
        replay_fps: Some(200.0),
        ..Default::default()
    };
    let state = Arc::new(AppState::new(registry, Arc::new(provider.clone()), config));
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(tryon_service::serve(listener, state));
    Fixture { addr, frames: recs.iter().map(|r| r.raw.clone()).collect(), provider, nets, _replay: replay }
}

pub async fn connect(f: &Fixture) -> Client {
    connect_async(format!("ws://{}/tryon", f.addr)).await.unwrap().0
}

pub async fn recv(c: &mut Client) -> ServerMessage {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(20), c.next()).await.expect("server went quiet");
        match msg.expect("stream ended").unwrap() {
            Message::Text(t) => return serde_json::from_str(t.as_str()).unwrap(),
            Message::Close(_) => panic!("server closed the connection"),
            _ => continue,
        }
    }
}

pub async fn send(c: &mut Client, m: &ClientMessage) {
    c.send(Message::text(serde_json::to_string(m).unwrap())).await.unwrap();
}

pub fn frame_msg(frame: &FrameImage, t: u64) -> ClientMessage {
    ClientMessage::Frame { data: BASE64.encode(frame.encode_png().unwrap()), t }
}

/// Skips messages until one satisfies `pick`.
pub async fn until<T>(c: &mut Client, mut pick: impl FnMut(ServerMessage) -> Option<T>) -> T {
    loop {
        if let Some(v) = pick(recv(c).await) {
            return v;
        }
    }
}

pub async fn tryon_frame(c: &mut Client) -> (u64, FrameImage) {
    until(c, |m| match m {
        ServerMessage::TryonFrame { data, t, .. } => Some((t, FrameImage::decode(&BASE64.decode(data).unwrap(), 3).unwrap())),
        _ => None,
    })
    .await
}

/// What a fresh session of `net` outputs after the frames at `indices`,
/// passed through the same PNG round trip as the wire.
pub fn direct(f: &Fixture, net: &Arc<ReGarSynNetwork>, indices: &[u64]) -> FrameImage {
    let mut s = TryOnSession::new(net.clone(), SessionConfig::default()).unwrap();
    let mut last = None;
    for &i in indices {
        let frame = &f.frames[(i % 6) as usize];
        last = Some(s.process_frame_at(i, frame, &f.provider as &dyn PerceptionProvider).unwrap().image);
    }
    FrameImage::decode(&last.unwrap().encode_png().unwrap(), 3).unwrap()
}

