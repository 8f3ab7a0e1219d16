//! Wire messages and framing.
//!
//! Each message is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON. Every JSON object carries `v` (protocol version), `session_id`,
//! `seq` and a `kind` tag; the remaining fields depend on `kind`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::feedback::FeedbackFrame;
use crate::skeleton::{ExerciseId, SkeletonFrame};

pub const PROTOCOL_VERSION: u32 = 1;
/// Frames longer than this are rejected and the connection closed.
pub const MAX_MESSAGE_BYTES: usize = 4 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientBody {
    StartSession {
        exercise: String,
    },
    /// The frame stays untyped until the server validates it, so a malformed
    /// frame is reported without losing the envelope.
    LiveFrame {
        frame: serde_json::Value,
    },
    EndSession,
    ListTemplates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMessage {
    pub v: u32,
    #[serde(default)]
    pub session_id: String,
    #[serde(default)]
    pub seq: u64,
    #[serde(flatten)]
    pub body: ClientBody,
}

impl ClientMessage {
    pub fn new(session_id: &str, seq: u64, body: ClientBody) -> Self {
        ClientMessage {
            v: PROTOCOL_VERSION,
            session_id: session_id.into(),
            seq,
            body,
        }
    }

    pub fn start(session_id: &str, seq: u64, exercise: &str) -> Self {
        Self::new(
            session_id,
            seq,
            ClientBody::StartSession {
                exercise: exercise.into(),
            },
        )
    }

    pub fn frame(session_id: &str, seq: u64, frame: &SkeletonFrame) -> Self {
        let frame = serde_json::to_value(frame).expect("frames always serialize");
        Self::new(session_id, seq, ClientBody::LiveFrame { frame })
    }

    pub fn end(session_id: &str, seq: u64) -> Self {
        Self::new(session_id, seq, ClientBody::EndSession)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    /// Frame failed validation (wrong joint count, non-finite values, ...).
    BadFrame,
    UnknownExercise,
    UnknownSession,
    SessionExists,
    /// `seq` did not increase within the session.
    BadSequence,
    /// Unparsable JSON or a missing field.
    BadMessage,
    UnsupportedVersion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateInfo {
    pub exercise: ExerciseId,
    pub name: String,
    pub frames: usize,
    /// Whether a scoring model is loaded for the exercise.
    pub scoring: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    /// Frames that produced feedback.
    pub frames: usize,
    /// Mean dissimilarity per joint over the session.
    pub mean_t: Vec<f64>,
    pub overall: f64,
    /// Clinical-scale score in `[0, 50]`; absent without a scoring model or
    /// with fewer than two frames.
    pub predicted_score: Option<f64>,
    /// True when fewer than half the template's frames were received.
    pub partial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerBody {
    SessionStarted {
        exercise: ExerciseId,
        name: String,
        template_frames: usize,
    },
    Feedback {
        feedback: FeedbackFrame,
    },
    SessionSummary(SessionSummary),
    Error {
        code: ErrorCode,
        text: String,
    },
    /// A live frame was discarded because the session queue was full.
    Dropped {
        text: String,
    },
    Templates {
        templates: Vec<TemplateInfo>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub v: u32,
    pub session_id: String,
    pub seq: u64,
    #[serde(flatten)]
    pub body: ServerBody,
}

impl ServerMessage {
    pub fn new(session_id: &str, seq: u64, body: ServerBody) -> Self {
        ServerMessage {
            v: PROTOCOL_VERSION,
            session_id: session_id.into(),
            seq,
            body,
        }
    }

    pub fn error(session_id: &str, seq: u64, code: ErrorCode, text: impl Into<String>) -> Self {
        Self::new(
            session_id,
            seq,
            ServerBody::Error {
                code,
                text: text.into(),
            },
        )
    }

    pub fn feedback(&self) -> Option<&FeedbackFrame> {
        match &self.body {
            ServerBody::Feedback { feedback } => Some(feedback),
            _ => None,
        }
    }
}

/// Writes one length-prefixed frame.
pub fn write_frame(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&len.to_be_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream before the prefix.
pub fn read_frame(r: &mut impl Read, max_len: usize) -> io::Result<Option<Vec<u8>>> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > max_len {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds the {max_len}-byte limit"),
        ));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

pub fn write_message<T: Serialize>(w: &mut impl Write, msg: &T) -> io::Result<()> {
    let bytes = serde_json::to_vec(msg).map_err(io::Error::other)?;
    write_frame(w, &bytes)
}

/// Reads and decodes one message; `Ok(None)` at end of stream.
pub fn read_message<T: for<'de> Deserialize<'de>>(r: &mut impl Read) -> io::Result<Option<T>> {
    match read_frame(r, MAX_MESSAGE_BYTES)? {
        None => Ok(None),
        Some(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{}").unwrap();
        write_frame(&mut buf, b"[1]").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 2]);
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r, 16).unwrap().unwrap(), b"{}");
        assert_eq!(read_frame(&mut r, 16).unwrap().unwrap(), b"[1]");
        assert!(read_frame(&mut r, 16).unwrap().is_none());
    }

    #[test]
    fn oversized_and_truncated_frames() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &[b' '; 32]).unwrap();
        assert!(read_frame(&mut &buf[..], 8).is_err());
        assert!(read_frame(&mut &buf[..10], 64).is_err());
    }

    #[test]
    fn message_json_shape() {
        let m = ClientMessage::start("s1", 0, "E1");
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"v": 1, "session_id": "s1", "seq": 0, "kind": "start_session", "exercise": "E1"})
        );
        let e = ServerMessage::error("s1", 3, ErrorCode::BadFrame, "x");
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["code"], "BAD_FRAME");
        assert_eq!(v["kind"], "error");
        let back: ServerMessage = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }
}
