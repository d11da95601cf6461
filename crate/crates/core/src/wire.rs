//! CRWP v1, the steering wire protocol.
//!
//! Every frame is `magic u32 | type u8 | payload length u32 | payload`, all
//! little-endian. Vector dimension is not sent explicitly in steer frames; it
//! follows from the payload length and the entry count.
//!
//! | type | message    | payload                                            |
//! |------|------------|----------------------------------------------------|
//! | 0x01 | HELLO      | version u16, profile digest [u8; 32]               |
//! | 0x02 | HELLO_ACK  | d u32, head count u32                              |
//! | 0x10 | STEER_REQ  | request_id u64, k u32, k × (layer u16, head u16, d × f32) |
//! | 0x11 | STEER_RESP | same as STEER_REQ                                  |
//! | 0x7F | ERROR      | code u16, message length u16, UTF-8 message        |

use thiserror::Error;

use crate::steer::HeadActivation;
use crate::trace::HeadId;

pub const MAGIC: u32 = 0x4352_5750;
pub const PROTOCOL_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 9;
pub const MAX_PAYLOAD: u32 = 64 * 1024 * 1024;

pub const TYPE_HELLO: u8 = 0x01;
pub const TYPE_HELLO_ACK: u8 = 0x02;
pub const TYPE_STEER_REQ: u8 = 0x10;
pub const TYPE_STEER_RESP: u8 = 0x11;
pub const TYPE_ERROR: u8 = 0x7F;

/// Error codes carried by ERROR messages.
pub mod code {
    pub const HANDSHAKE_REQUIRED: u16 = 1;
    pub const UNKNOWN_HEAD: u16 = 2;
    pub const DIMENSION_MISMATCH: u16 = 3;
    pub const MALFORMED_FRAME: u16 = 4;
    pub const UNSUPPORTED_VERSION: u16 = 5;
    pub const PROFILE_MISMATCH: u16 = 6;
    pub const UNEXPECTED_MESSAGE: u16 = 7;
    pub const INTERNAL: u16 = 8;
}

/// Digest value that matches any profile in HELLO.
pub const ANY_PROFILE: [u8; 32] = [0; 32];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed frame at byte offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("payload length {0} exceeds the {MAX_PAYLOAD}-byte cap")]
    Oversized(u32),
    #[error("cannot encode message: {0}")]
    Encode(String),
}

pub type Result<T> = std::result::Result<T, WireError>;

fn malformed<T>(offset: usize, reason: impl Into<String>) -> Result<T> {
    Err(WireError::Malformed { offset, reason: reason.into() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteerFrame {
    pub request_id: u64,
    pub entries: Vec<HeadActivation>,
}

impl SteerFrame {
    /// Common vector length, or `None` when entries disagree or the frame is empty.
    pub fn dim(&self) -> Option<usize> {
        let d = self.entries.first()?.x.len();
        self.entries.iter().all(|e| e.x.len() == d).then_some(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { version: u16, profile_digest: [u8; 32] },
    HelloAck { head_dim: u32, head_count: u32 },
    SteerReq(SteerFrame),
    SteerResp(SteerFrame),
    Error { code: u16, message: String },
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello { .. } => TYPE_HELLO,
            Message::HelloAck { .. } => TYPE_HELLO_ACK,
            Message::SteerReq(_) => TYPE_STEER_REQ,
            Message::SteerResp(_) => TYPE_STEER_RESP,
            Message::Error { .. } => TYPE_ERROR,
        }
    }

    pub fn error(code: u16, message: impl Into<String>) -> Self {
        Message::Error { code, message: message.into() }
    }
}

fn encode_steer(frame: &SteerFrame, out: &mut Vec<u8>) -> Result<()> {
    let d = frame
        .dim()
        .ok_or_else(|| WireError::Encode("steer frame must be non-empty with equal-length vectors".into()))?;
    if d == 0 {
        return Err(WireError::Encode("vectors must have at least one component".into()));
    }
    let k = u32::try_from(frame.entries.len()).map_err(|_| WireError::Encode("too many entries".into()))?;
    out.extend_from_slice(&frame.request_id.to_le_bytes());
    out.extend_from_slice(&k.to_le_bytes());
    for e in &frame.entries {
        out.extend_from_slice(&e.head.layer.to_le_bytes());
        out.extend_from_slice(&e.head.head.to_le_bytes());
        for v in &e.x {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    match msg {
        Message::Hello { version, profile_digest } => {
            payload.extend_from_slice(&version.to_le_bytes());
            payload.extend_from_slice(profile_digest);
        }
        Message::HelloAck { head_dim, head_count } => {
            payload.extend_from_slice(&head_dim.to_le_bytes());
            payload.extend_from_slice(&head_count.to_le_bytes());
        }
        Message::SteerReq(f) | Message::SteerResp(f) => encode_steer(f, &mut payload)?,
        Message::Error { code, message } => {
            let mut text = message.as_str();
            // truncate on a char boundary to fit the u16 length
            while text.len() > u16::MAX as usize {
                let mut cut = u16::MAX as usize;
                while !text.is_char_boundary(cut) {
                    cut -= 1;
                }
                text = &text[..cut];
            }
            payload.extend_from_slice(&code.to_le_bytes());
            payload.extend_from_slice(&(text.len() as u16).to_le_bytes());
            payload.extend_from_slice(text.as_bytes());
        }
    }
    let len = u32::try_from(payload.len()).ok().filter(|&l| l <= MAX_PAYLOAD).ok_or_else(|| {
        WireError::Encode(format!("payload of {} bytes exceeds the cap", payload.len()))
    })?;
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(msg.type_byte());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses the 9-byte frame header into `(type, payload length)`, enforcing the cap.
pub fn decode_header(header: &[u8]) -> Result<(u8, u32)> {
    if header.len() < FRAME_HEADER_LEN {
        return malformed(header.len(), format!("frame header needs {FRAME_HEADER_LEN} bytes, got {}", header.len()));
    }
    let magic = u32::from_le_bytes(header[0..4].try_into().unwrap());
    if magic != MAGIC {
        return malformed(0, format!("bad magic {magic:#010x}"));
    }
    let ty = header[4];
    if !matches!(ty, TYPE_HELLO | TYPE_HELLO_ACK | TYPE_STEER_REQ | TYPE_STEER_RESP | TYPE_ERROR) {
        return malformed(4, format!("unknown message type {ty:#04x}"));
    }
    let len = u32::from_le_bytes(header[5..9].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversized(len));
    }
    Ok((ty, len))
}

fn exact_len(payload: &[u8], want: usize, what: &str) -> Result<()> {
    if payload.len() != want {
        return malformed(
            FRAME_HEADER_LEN + payload.len().min(want),
            format!("{what} payload must be {want} bytes, got {}", payload.len()),
        );
    }
    Ok(())
}

fn decode_steer(p: &[u8]) -> Result<SteerFrame> {
    let base = FRAME_HEADER_LEN;
    if p.len() < 12 {
        return malformed(base + p.len(), format!("steer payload needs at least 12 bytes, got {}", p.len()));
    }
    let request_id = u64::from_le_bytes(p[0..8].try_into().unwrap());
    let k = u32::from_le_bytes(p[8..12].try_into().unwrap()) as usize;
    if k == 0 {
        return malformed(base + 8, "steer frame has no entries");
    }
    let body = p.len() - 12;
    if !body.is_multiple_of(k) {
        return malformed(base + 12, format!("{body} entry bytes do not divide into {k} entries"));
    }
    let entry_len = body / k;
    if entry_len < 8 || !(entry_len - 4).is_multiple_of(4) {
        return malformed(base + 12, format!("entry size {entry_len} is not 4 + 4*d with d >= 1"));
    }
    let d = (entry_len - 4) / 4;
    let entries = p[12..]
        .chunks_exact(entry_len)
        .map(|e| HeadActivation {
            head: HeadId::new(u16::from_le_bytes([e[0], e[1]]), u16::from_le_bytes([e[2], e[3]])),
            x: e[4..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        })
        .collect::<Vec<_>>();
    debug_assert!(entries.iter().all(|e| e.x.len() == d));
    Ok(SteerFrame { request_id, entries })
}

/// Decodes the payload of a frame whose header was already checked.
pub fn decode_payload(ty: u8, p: &[u8]) -> Result<Message> {
    let base = FRAME_HEADER_LEN;
    match ty {
        TYPE_HELLO => {
            exact_len(p, 34, "HELLO")?;
            let mut digest = [0u8; 32];
            digest.copy_from_slice(&p[2..34]);
            Ok(Message::Hello { version: u16::from_le_bytes([p[0], p[1]]), profile_digest: digest })
        }
        TYPE_HELLO_ACK => {
            exact_len(p, 8, "HELLO_ACK")?;
            Ok(Message::HelloAck {
                head_dim: u32::from_le_bytes(p[0..4].try_into().unwrap()),
                head_count: u32::from_le_bytes(p[4..8].try_into().unwrap()),
            })
        }
        TYPE_STEER_REQ => decode_steer(p).map(Message::SteerReq),
        TYPE_STEER_RESP => decode_steer(p).map(Message::SteerResp),
        TYPE_ERROR => {
            if p.len() < 4 {
                return malformed(base + p.len(), "ERROR payload shorter than 4 bytes");
            }
            let code = u16::from_le_bytes([p[0], p[1]]);
            let n = u16::from_le_bytes([p[2], p[3]]) as usize;
            exact_len(p, 4 + n, "ERROR")?;
            let message = std::str::from_utf8(&p[4..])
                .map_err(|e| WireError::Malformed { offset: base + 4 + e.valid_up_to(), reason: "invalid UTF-8".into() })?
                .to_string();
            Ok(Message::Error { code, message })
        }
        other => malformed(4, format!("unknown message type {other:#04x}")),
    }
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    let (ty, len) = decode_header(bytes)?;
    let end = FRAME_HEADER_LEN + len as usize;
    if bytes.len() < end {
        return malformed(bytes.len(), format!("truncated payload: declared {len} bytes, got {}", bytes.len() - FRAME_HEADER_LEN));
    }
    if bytes.len() > end {
        return malformed(end, format!("{} trailing bytes after frame", bytes.len() - end));
    }
    decode_payload(ty, &bytes[FRAME_HEADER_LEN..end])
}

#[cfg(feature = "async")]
mod io {
    use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

    use super::*;

    #[derive(Debug, Error)]
    pub enum FrameIoError {
        #[error(transparent)]
        Wire(#[from] WireError),
        #[error("i/o error: {0}")]
        Io(#[from] std::io::Error),
        #[error("connection closed")]
        Closed,
    }

    /// Reads one frame; a clean EOF before the first header byte is `Closed`.
    pub async fn read_message<R: AsyncRead + Unpin>(reader: &mut R) -> std::result::Result<Message, FrameIoError> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        let mut filled = 0;
        while filled < FRAME_HEADER_LEN {
            let n = reader.read(&mut header[filled..]).await?;
            if n == 0 {
                return if filled == 0 {
                    Err(FrameIoError::Closed)
                } else {
                    Err(WireError::Malformed { offset: filled, reason: "connection closed inside frame header".into() }.into())
                };
            }
            filled += n;
        }
        let (ty, len) = decode_header(&header)?;
        let mut payload = vec![0u8; len as usize];
        let mut got = 0;
        while got < payload.len() {
            let n = reader.read(&mut payload[got..]).await?;
            if n == 0 {
                return Err(WireError::Malformed {
                    offset: FRAME_HEADER_LEN + got,
                    reason: format!("connection closed after {got} of {len} payload bytes"),
                }
                .into());
            }
            got += n;
        }
        Ok(decode_payload(ty, &payload)?)
    }

    pub async fn write_message<W: AsyncWrite + Unpin>(writer: &mut W, msg: &Message) -> std::result::Result<(), FrameIoError> {
        let bytes = encode_message(msg)?;
        writer.write_all(&bytes).await?;
        writer.flush().await?;
        Ok(())
    }
}

#[cfg(feature = "async")]
pub use io::{read_message, write_message, FrameIoError};
