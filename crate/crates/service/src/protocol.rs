//! JSON messages exchanged over `/tryon`. Every message carries a `type`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// The client pushes frames.
    Push,
    /// The server streams a stored image sequence.
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SelectGarment {
        garment_id: String,
    },
    ResetState,
    /// `data` is a base64 PNG or JPEG; `t` must increase strictly.
    Frame {
        data: String,
        t: u64,
    },
    SetSource {
        source: SourceKind,
        /// Sequence directory relative to the server's replay root.
        #[serde(default)]
        path: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentInfo {
    pub id: String,
    pub variant: String,
    /// `[height, width]`.
    pub resolution: [usize; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusEvent {
    GarmentSelected,
    StateReset,
    /// Too many consecutive perception failures zeroed the state.
    AutoReset,
    SourceChanged,
    Dropped,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Status {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub event: Option<StatusEvent>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub garment_id: Option<String>,
    /// A frame superseded by a newer one before it was processed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropped: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceKind>,
    /// Frames waiting to be processed when the status was sent (0 or 1).
    pub pending: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnknownGarment,
    Decode,
    FrameSize,
    NonMonotonicT,
    WrongSource,
    BadPath,
    Busy,
    Runtime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    GarmentList {
        items: Vec<GarmentInfo>,
    },
    TryonFrame {
        data: String,
        t: u64,
        /// Frames per second over the session's recent outputs.
        fps: f64,
        /// False when perception failed and the input was passed through.
        composited: bool,
    },
    Status(Status),
    Error {
        code: ErrorCode,
        detail: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t: Option<u64>,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, detail: impl Into<String>, t: Option<u64>) -> Self {
        ServerMessage::Error { code, detail: detail.into(), t }
    }

    pub fn status(status: Status) -> Self {
        ServerMessage::Status(status)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}
