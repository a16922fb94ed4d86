//! Length-prefixed binary framing.
//!
//! ```text
//! u32 payload length (big-endian) | u8 type | payload
//! ```
//!
//! | type | name            | payload                                                      |
//! |------|-----------------|--------------------------------------------------------------|
//! | 0x01 | INIT            | u16 H, u16 W, u32 n, n bytes of JSON options, H*W*3 RGB8      |
//! | 0x02 | CONTROL_BLOCK   | 4 frames RGB8, row-major, frame-major                        |
//! | 0x03 | GENERATED_BLOCK | same as CONTROL_BLOCK                                        |
//! | 0x04 | STATS           | JSON text `{fps, last_block_ms, frames_emitted}`             |
//! | 0x05 | ERROR           | u16 n, n bytes of code, rest is the message (UTF-8)          |
//! | 0x06 | CLOSE           | empty                                                        |
//!
//! Frame sizes of block payloads are fixed by the preceding INIT.

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

pub const MAX_PAYLOAD: usize = 16 << 20;
pub const HEADER_LEN: usize = 5;

pub const INIT: u8 = 0x01;
pub const CONTROL_BLOCK: u8 = 0x02;
pub const GENERATED_BLOCK: u8 = 0x03;
pub const STATS: u8 = 0x04;
pub const ERROR: u8 = 0x05;
pub const CLOSE: u8 = 0x06;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    Oversize(usize),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("malformed {kind} payload: {reason}")]
    Malformed { kind: &'static str, reason: String },
}

impl ProtocolError {
    /// Short code sent in ERROR messages.
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::Oversize(_) => "oversize",
            ProtocolError::UnknownType(_) => "unknown_type",
            ProtocolError::Malformed { .. } => "malformed",
        }
    }
}

/// Session options carried by INIT.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitOptions {
    pub seed: u64,
    /// KV cache eviction window in latent frames.
    pub window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Init {
    pub height: u16,
    pub width: u16,
    pub options: InitOptions,
    /// `height * width * 3` bytes.
    pub first_frame: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub fps: f64,
    pub last_block_ms: f64,
    pub frames_emitted: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Init(Init),
    ControlBlock(Vec<u8>),
    GeneratedBlock(Vec<u8>),
    Stats(Stats),
    Error { code: String, message: String },
    Close,
}

impl WireMessage {
    pub fn kind(&self) -> u8 {
        match self {
            WireMessage::Init(_) => INIT,
            WireMessage::ControlBlock(_) => CONTROL_BLOCK,
            WireMessage::GeneratedBlock(_) => GENERATED_BLOCK,
            WireMessage::Stats(_) => STATS,
            WireMessage::Error { .. } => ERROR,
            WireMessage::Close => CLOSE,
        }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        WireMessage::Error {
            code: code.into(),
            message: message.into(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            WireMessage::Init(init) => {
                let opts = serde_json::to_vec(&init.options).expect("options serialize");
                let mut p = Vec::with_capacity(8 + opts.len() + init.first_frame.len());
                p.extend_from_slice(&init.height.to_be_bytes());
                p.extend_from_slice(&init.width.to_be_bytes());
                p.extend_from_slice(&(opts.len() as u32).to_be_bytes());
                p.extend_from_slice(&opts);
                p.extend_from_slice(&init.first_frame);
                p
            }
            WireMessage::ControlBlock(b) | WireMessage::GeneratedBlock(b) => b.clone(),
            WireMessage::Stats(s) => serde_json::to_vec(s).expect("stats serialize"),
            WireMessage::Error { code, message } => {
                let mut p = Vec::with_capacity(2 + code.len() + message.len());
                p.extend_from_slice(&(code.len() as u16).to_be_bytes());
                p.extend_from_slice(code.as_bytes());
                p.extend_from_slice(message.as_bytes());
                p
            }
            WireMessage::Close => Vec::new(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let payload = self.payload();
        if payload.len() > MAX_PAYLOAD {
            return Err(ProtocolError::Oversize(payload.len()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.push(self.kind());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode_payload(kind: u8, p: &[u8]) -> Result<Self, ProtocolError> {
        let bad = |kind: &'static str, reason: &str| ProtocolError::Malformed {
            kind,
            reason: reason.to_string(),
        };
        match kind {
            INIT => {
                if p.len() < 8 {
                    return Err(bad("INIT", "truncated header"));
                }
                let height = u16::from_be_bytes([p[0], p[1]]);
                let width = u16::from_be_bytes([p[2], p[3]]);
                let n = u32::from_be_bytes([p[4], p[5], p[6], p[7]]) as usize;
                let rest = &p[8..];
                if rest.len() < n {
                    return Err(bad("INIT", "truncated options"));
                }
                let options = serde_json::from_slice(&rest[..n]).map_err(|e| bad("INIT", &e.to_string()))?;
                let first_frame = rest[n..].to_vec();
                if first_frame.len() != height as usize * width as usize * 3 {
                    return Err(bad("INIT", "first frame size does not match height and width"));
                }
                Ok(WireMessage::Init(Init {
                    height,
                    width,
                    options,
                    first_frame,
                }))
            }
            CONTROL_BLOCK => Ok(WireMessage::ControlBlock(p.to_vec())),
            GENERATED_BLOCK => Ok(WireMessage::GeneratedBlock(p.to_vec())),
            STATS => Ok(WireMessage::Stats(serde_json::from_slice(p).map_err(|e| bad("STATS", &e.to_string()))?)),
            ERROR => {
                if p.len() < 2 {
                    return Err(bad("ERROR", "truncated header"));
                }
                let n = u16::from_be_bytes([p[0], p[1]]) as usize;
                if p.len() < 2 + n {
                    return Err(bad("ERROR", "truncated code"));
                }
                let code = String::from_utf8(p[2..2 + n].to_vec()).map_err(|e| bad("ERROR", &e.to_string()))?;
                let message = String::from_utf8(p[2 + n..].to_vec()).map_err(|e| bad("ERROR", &e.to_string()))?;
                Ok(WireMessage::Error { code, message })
            }
            CLOSE if p.is_empty() => Ok(WireMessage::Close),
            CLOSE => Err(bad("CLOSE", "non-empty payload")),
            other => Err(ProtocolError::UnknownType(other)),
        }
    }

    /// Decodes one complete frame; `Ok(None)` when `buf` holds less than a frame.
    /// Returns the message and the number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<Option<(Self, usize)>, ProtocolError> {
        if buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
        if len > MAX_PAYLOAD {
            return Err(ProtocolError::Oversize(len));
        }
        if buf.len() < HEADER_LEN + len {
            return Ok(None);
        }
        let msg = Self::decode_payload(buf[4], &buf[HEADER_LEN..HEADER_LEN + len])?;
        Ok(Some((msg, HEADER_LEN + len)))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReadError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a header.
pub async fn read_message<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<WireMessage>, ReadError> {
    let mut header = [0u8; HEADER_LEN];
    match r.read_exact(&mut header).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes([header[0], header[1], header[2], header[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize(len).into());
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).await?;
    Ok(Some(WireMessage::decode_payload(header[4], &payload)?))
}

pub async fn write_message<W: AsyncWrite + Unpin>(w: &mut W, msg: &WireMessage) -> Result<(), ReadError> {
    w.write_all(&msg.encode()?).await?;
    w.flush().await?;
    Ok(())
}
