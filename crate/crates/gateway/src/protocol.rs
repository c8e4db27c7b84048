//! Wire format of the `/session` WebSocket.
//!
//! Every frame in either direction is a JSON text frame
//! `{"type": ..., "seq": n, "session": id, "payload": {...}}`. Sequence
//! numbers strictly increase per direction; the server starts at 1.

use dwellgrasp_core::fixation::TriggerMode;
use dwellgrasp_core::geometry::Vec3;
use dwellgrasp_core::intent::ResolvePolicy;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: String,
    pub seq: u64,
    #[serde(default)]
    pub session: String,
    #[serde(default = "empty_object")]
    pub payload: Value,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloPayload {
    pub client: String,
    #[serde(default)]
    pub mode: Option<TriggerMode>,
    #[serde(default)]
    pub policy: Option<ResolvePolicy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazePayload {
    pub t_ms: u64,
    pub origin: Vec3,
    pub dir: Vec3,
}

/// A cursor position in user-view image pixels, treated as a gaze target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointerPayload {
    pub t_ms: u64,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimePayload {
    pub t_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not JSON, or not an envelope.
    Malformed,
    UnknownType,
    /// `seq` did not increase.
    Sequence,
    /// Wrong or missing session id, or hello out of place.
    Session,
    /// Payload does not fit the message type.
    InvalidPayload,
    /// Timestamp went backwards.
    NonMonotonic,
    /// The session refused the input (bad ray, confirm in auto mode, halted).
    Rejected,
    /// Binary frames are not part of the protocol.
    Binary,
    /// The selection pipeline failed (detector or arm).
    Pipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
    /// `seq` of the offending client message, when it could be read.
    pub ref_seq: Option<u64>,
    /// Pipeline stage that failed, for `pipeline` errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThrottlePayload {
    pub limit_per_s: u32,
    pub window_start_ms: u64,
}

/// Best-effort `seq` from a frame that failed to parse as an envelope,
/// falling back to a textual scan when the frame is not JSON at all.
pub fn salvage_seq(text: &str) -> Option<u64> {
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        return v.get("seq")?.as_u64();
    }
    let rest = &text[text.find("\"seq\"")? + 5..];
    let rest = rest.trim_start().strip_prefix(':')?.trim_start();
    let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    rest[..end].parse().ok()
}
