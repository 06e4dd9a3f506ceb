//! Binary wire format: RGBD frame messages and the length-prefixed
//! envelope that carries frames, odometry, commands and pings over a
//! reliable stream.
//!
//! Frame layout, little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `RGBD` |
//! | 4 | seq, u32 |
//! | 8 | timestamp_ms, u64 |
//! | 2, 2 | width, height, u16 |
//! | 96 | pose, 12 × f64 row-major `[R | t]` |
//! | 2·w·h | depth, u16 millimeters |
//! | 3·w·h | color, RGB |
//!
//! Envelope: `TH`, version u8, kind u8, payload length u32, payload.

use serde::{Deserialize, Serialize};
use telehaptic_core::camera::RgbdFrame;
use telehaptic_core::geometry::RigidTransform;
use telehaptic_core::sim::Pose2;

pub const FRAME_MAGIC: [u8; 4] = *b"RGBD";
pub const FRAME_HEADER_LEN: usize = 116;
pub const ENVELOPE_MAGIC: [u8; 2] = *b"TH";
pub const PROTOCOL_VERSION: u8 = 1;
pub const ENVELOPE_HEADER_LEN: usize = 8;
/// Largest payload accepted by the stream decoder.
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(&'static str),
    #[error("protocol version {got}, expected {PROTOCOL_VERSION}")]
    VersionMismatch { got: u8 },
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("bad json payload: {0}")]
    Json(String),
}

/// Byte length of an encoded frame of the given size.
pub fn frame_len(width: usize, height: usize) -> usize {
    FRAME_HEADER_LEN + width * height * 5
}

pub fn encode_frame(frame: &RgbdFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame_len(frame.width, frame.height));
    write_frame(frame, &mut out);
    out
}

pub fn write_frame(frame: &RgbdFrame, out: &mut Vec<u8>) {
    assert!(frame.width <= u16::MAX as usize && frame.height <= u16::MAX as usize);
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&frame.seq.to_le_bytes());
    out.extend_from_slice(&frame.timestamp_ms.to_le_bytes());
    out.extend_from_slice(&(frame.width as u16).to_le_bytes());
    out.extend_from_slice(&(frame.height as u16).to_le_bytes());
    for v in frame.pose.to_row_major() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for d in &frame.depth {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for c in &frame.color {
        out.extend_from_slice(c);
    }
}

/// Decodes one frame from the front of `buf`, returning it with the number
/// of bytes consumed.
pub fn decode_frame_prefix(buf: &[u8]) -> Result<(RgbdFrame, usize), WireError> {
    if buf.len() < FRAME_HEADER_LEN {
        return Err(WireError::MalformedFrame("truncated header"));
    }
    if buf[..4] != FRAME_MAGIC {
        return Err(WireError::MalformedFrame("bad magic"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
    let seq = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    let timestamp_ms = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes"));
    let width = u16_at(16) as usize;
    let height = u16_at(18) as usize;
    let mut pose = [0.0; 12];
    for (k, v) in pose.iter_mut().enumerate() {
        let o = 20 + 8 * k;
        *v = f64::from_le_bytes(buf[o..o + 8].try_into().expect("8 bytes"));
    }
    let n = width * height;
    let total = frame_len(width, height);
    if buf.len() < total {
        return Err(WireError::MalformedFrame("truncated pixels"));
    }
    let depth_at = FRAME_HEADER_LEN;
    let depth = (0..n).map(|i| u16_at(depth_at + 2 * i)).collect();
    let color_at = depth_at + 2 * n;
    let color = buf[color_at..total].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let frame = RgbdFrame {
        seq,
        timestamp_ms,
        width,
        height,
        depth,
        color,
        pose: RigidTransform::from_row_major(&pose),
    };
    Ok((frame, total))
}

/// Decodes a buffer holding exactly one frame.
pub fn decode_frame(buf: &[u8]) -> Result<RgbdFrame, WireError> {
    let (frame, used) = decode_frame_prefix(buf)?;
    if used != buf.len() {
        return Err(WireError::MalformedFrame("trailing bytes"));
    }
    Ok(frame)
}

/// Robot pose report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometryMessage {
    pub seq: u32,
    pub t_ms: u64,
    pub pose: [f64; 3],
}

impl OdometryMessage {
    pub fn new(seq: u32, t_ms: u64, pose: &Pose2) -> Self {
        Self {
            seq,
            t_ms,
            pose: [pose.x, pose.y, pose.theta],
        }
    }

    pub fn pose2(&self) -> Pose2 {
        Pose2::new(self.pose[0], self.pose[1], self.pose[2])
    }
}

/// Server to robot: the goal to track and the server-side velocity hint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandMessage {
    pub seq: u32,
    pub t_ms: u64,
    pub goal: [f64; 2],
    pub cmd: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Frame(RgbdFrame),
    Odometry(OdometryMessage),
    Command(CommandMessage),
    Ping { seq: u32 },
    Pong { seq: u32 },
    /// Raw interface-event JSON.
    Event(String),
}

impl Message {
    fn kind(&self) -> u8 {
        match self {
            Message::Frame(_) => 1,
            Message::Odometry(_) => 2,
            Message::Command(_) => 3,
            Message::Ping { .. } => 4,
            Message::Pong { .. } => 5,
            Message::Event(_) => 6,
        }
    }
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    match msg {
        Message::Frame(f) => write_frame(f, &mut payload),
        Message::Odometry(o) => payload = serde_json::to_vec(o).expect("serializable"),
        Message::Command(c) => payload = serde_json::to_vec(c).expect("serializable"),
        Message::Ping { seq } | Message::Pong { seq } => payload.extend_from_slice(&seq.to_le_bytes()),
        Message::Event(s) => payload.extend_from_slice(s.as_bytes()),
    }
    let mut out = Vec::with_capacity(ENVELOPE_HEADER_LEN + payload.len());
    out.extend_from_slice(&ENVELOPE_MAGIC);
    out.push(PROTOCOL_VERSION);
    out.push(msg.kind());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

fn decode_payload(kind: u8, p: &[u8]) -> Result<Message, WireError> {
    let json = |e: serde_json::Error| WireError::Json(e.to_string());
    let seq = || -> Result<u32, WireError> {
        let b: [u8; 4] = p.try_into().map_err(|_| WireError::MalformedFrame("bad ping payload"))?;
        Ok(u32::from_le_bytes(b))
    };
    Ok(match kind {
        1 => Message::Frame(decode_frame(p)?),
        2 => Message::Odometry(serde_json::from_slice(p).map_err(json)?),
        3 => Message::Command(serde_json::from_slice(p).map_err(json)?),
        4 => Message::Ping { seq: seq()? },
        5 => Message::Pong { seq: seq()? },
        6 => Message::Event(String::from_utf8(p.to_vec()).map_err(|_| WireError::MalformedFrame("event is not utf-8"))?),
        k => return Err(WireError::UnknownKind(k)),
    })
}

/// Incremental envelope parser for a byte stream.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete message, `Ok(None)` if more bytes are needed. After an
    /// error the stream is unusable.
    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        if self.buf.len() < ENVELOPE_HEADER_LEN {
            return Ok(None);
        }
        if self.buf[..2] != ENVELOPE_MAGIC {
            return Err(WireError::MalformedFrame("bad envelope magic"));
        }
        if self.buf[2] != PROTOCOL_VERSION {
            return Err(WireError::VersionMismatch { got: self.buf[2] });
        }
        let kind = self.buf[3];
        let len = u32::from_le_bytes(self.buf[4..8].try_into().expect("4 bytes")) as usize;
        if len > MAX_PAYLOAD {
            return Err(WireError::MalformedFrame("payload too large"));
        }
        if self.buf.len() < ENVELOPE_HEADER_LEN + len {
            return Ok(None);
        }
        let msg = decode_payload(kind, &self.buf[ENVELOPE_HEADER_LEN..ENVELOPE_HEADER_LEN + len]);
        self.buf.drain(..ENVELOPE_HEADER_LEN + len);
        msg.map(Some)
    }
}
