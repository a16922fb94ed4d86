//! Streaming server: one session per connection, raw TCP or WebSocket.
//!
//! A WebSocket peer sends each wire frame, header included, as one binary
//! message. Raw TCP peers send frames back to back.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use futures::{SinkExt, StreamExt};
use interplay_core::stream_engine::{open_session, Generator, Session, SessionOptions};
use interplay_core::{Image, Video};
use tokio::io::BufReader;
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::WebSocketStream;

use crate::protocol::{self, Init, ProtocolError, ReadError, Stats, WireMessage};

pub const BLOCK_FRAMES: usize = 4;

/// What answers control blocks.
pub enum Backend {
    /// Returns every control block unchanged.
    Echo,
    Model {
        generator: Arc<Generator>,
        options: SessionOptions,
    },
}

impl Backend {
    pub fn model(generator: Arc<Generator>) -> Self {
        Backend::Model {
            generator,
            options: SessionOptions::default(),
        }
    }
}

enum Active {
    Echo { since: Instant, frames: u64 },
    /// Empty only while a block is on the blocking pool.
    Model(Option<Box<Session>>),
}

struct State {
    height: usize,
    width: usize,
    active: Active,
}

impl State {
    fn block_len(&self) -> usize {
        BLOCK_FRAMES * self.height * self.width * 3
    }

    fn stats(&self, last_block_ms: f64) -> Stats {
        match &self.active {
            Active::Echo { since, frames } => {
                let secs = since.elapsed().as_secs_f64();
                Stats {
                    fps: if secs > 0.0 { *frames as f64 / secs } else { 0.0 },
                    last_block_ms,
                    frames_emitted: *frames,
                }
            }
            Active::Model(s) => {
                let st = s.as_ref().map(|s| s.stats().clone()).unwrap_or_default();
                Stats {
                    fps: st.fps(),
                    last_block_ms: st.last_block_ms.unwrap_or(last_block_ms),
                    frames_emitted: st.frames_emitted as u64,
                }
            }
        }
    }
}

enum Conn {
    Tcp {
        reader: BufReader<OwnedReadHalf>,
        writer: OwnedWriteHalf,
    },
    Ws(Box<WebSocketStream<TcpStream>>),
}

impl Conn {
    async fn recv(&mut self) -> Result<Option<WireMessage>, ReadError> {
        match self {
            Conn::Tcp { reader, .. } => protocol::read_message(reader).await,
            Conn::Ws(ws) => loop {
                let Some(msg) = ws.next().await else {
                    return Ok(None);
                };
                let msg = msg.map_err(|e| ReadError::Io(std::io::Error::other(e)))?;
                match msg {
                    Message::Binary(b) => {
                        return match WireMessage::decode(&b)? {
                            Some((m, used)) if used == b.len() => Ok(Some(m)),
                            _ => Err(ProtocolError::Malformed {
                                kind: "websocket",
                                reason: "binary message must hold exactly one frame".into(),
                            }
                            .into()),
                        }
                    }
                    Message::Close(_) => return Ok(None),
                    Message::Text(_) => {
                        return Err(ProtocolError::Malformed {
                            kind: "websocket",
                            reason: "text messages are not part of the protocol".into(),
                        }
                        .into())
                    }
                    _ => continue,
                }
            },
        }
    }

    async fn send(&mut self, msg: &WireMessage) -> Result<(), ReadError> {
        match self {
            Conn::Tcp { writer, .. } => protocol::write_message(writer, msg).await,
            Conn::Ws(ws) => ws
                .send(Message::Binary(msg.encode()?.into()))
                .await
                .map_err(|e| ReadError::Io(std::io::Error::other(e))),
        }
    }

    async fn shutdown(mut self) {
        if let Conn::Ws(ws) = &mut self {
            let _ = SinkExt::close(ws).await;
        }
    }
}

/// A raw-TCP peer opens with a u32 length; "GET " read as one would exceed the
/// payload limit, so the first four bytes tell the transports apart.
async fn is_http_upgrade(stream: &TcpStream) -> std::io::Result<bool> {
    let mut buf = [0u8; 4];
    loop {
        let n = stream.peek(&mut buf).await?;
        if n == 0 || buf[..n] != b"GET "[..n] {
            return Ok(false);
        }
        if n == 4 {
            return Ok(true);
        }
        tokio::time::sleep(std::time::Duration::from_millis(1)).await;
    }
}

async fn accept_conn(stream: TcpStream) -> std::io::Result<Conn> {
    stream.set_nodelay(true)?;
    if is_http_upgrade(&stream).await? {
        let ws = tokio_tungstenite::accept_async(stream).await.map_err(std::io::Error::other)?;
        Ok(Conn::Ws(Box::new(ws)))
    } else {
        let (r, w) = stream.into_split();
        Ok(Conn::Tcp {
            reader: BufReader::new(r),
            writer: w,
        })
    }
}

async fn fail(conn: &mut Conn, code: &str, message: impl Into<String>) -> Result<(), ReadError> {
    conn.send(&WireMessage::error(code, message)).await?;
    conn.send(&WireMessage::Close).await
}

async fn start(backend: &Backend, init: Init) -> Result<State, String> {
    let (height, width) = (init.height as usize, init.width as usize);
    if height == 0 || width == 0 {
        return Err("frame size must be positive".into());
    }
    let active = match backend {
        Backend::Echo => Active::Echo {
            since: Instant::now(),
            frames: 1,
        },
        Backend::Model { generator, options } => {
            let first = Image::from_raw(height, width, init.first_frame).map_err(|e| e.to_string())?;
            let mut options = options.clone();
            options.seed = init.options.seed;
            if init.options.window.is_some() {
                options.window = init.options.window;
            }
            let generator = generator.clone();
            let session = tokio::task::spawn_blocking(move || open_session(generator, &first, None, &options))
                .await
                .map_err(|e| e.to_string())?
                .map_err(|e| e.to_string())?;
            Active::Model(Some(Box::new(session)))
        }
    };
    Ok(State { height, width, active })
}

async fn answer(state: &mut State, payload: Vec<u8>) -> Result<Vec<u8>, String> {
    match &mut state.active {
        Active::Echo { frames, .. } => {
            *frames += BLOCK_FRAMES as u64;
            Ok(payload)
        }
        Active::Model(slot) => {
            let block = Video::from_raw(BLOCK_FRAMES, state.height, state.width, payload).map_err(|e| e.to_string())?;
            let mut session = slot.take().ok_or("session lost after an earlier failure")?;
            let (session, out) = tokio::task::spawn_blocking(move || {
                let out = session.push_control_video(&block);
                (session, out)
            })
            .await
            .map_err(|e| e.to_string())?;
            *slot = Some(session);
            Ok(out.map_err(|e| e.to_string())?.data)
        }
    }
}

/// Runs one connection to completion.
pub async fn handle_connection(stream: TcpStream, backend: Arc<Backend>) -> Result<(), ReadError> {
    let peer = stream.peer_addr().ok();
    let mut conn = accept_conn(stream).await?;
    let mut state: Option<State> = None;
    loop {
        let msg = match conn.recv().await {
            Ok(Some(m)) => m,
            Ok(None) => break,
            Err(ReadError::Protocol(e)) => {
                tracing::debug!(?peer, error = %e, "protocol error");
                fail(&mut conn, e.code(), e.to_string()).await?;
                break;
            }
            Err(e) => return Err(e),
        };
        match msg {
            WireMessage::Init(init) => match start(&backend, init).await {
                Ok(s) => {
                    let stats = s.stats(0.0);
                    state = Some(s);
                    conn.send(&WireMessage::Stats(stats)).await?;
                }
                Err(e) => {
                    fail(&mut conn, "init_failed", e).await?;
                    break;
                }
            },
            WireMessage::ControlBlock(payload) => {
                let Some(s) = state.as_mut() else {
                    conn.send(&WireMessage::error("uninitialized", "CONTROL_BLOCK before INIT")).await?;
                    continue;
                };
                if payload.len() != s.block_len() {
                    let msg = format!("block of {} bytes, expected {}", payload.len(), s.block_len());
                    fail(&mut conn, "malformed", msg).await?;
                    break;
                }
                let t = Instant::now();
                match answer(s, payload).await {
                    Ok(out) => {
                        let ms = t.elapsed().as_secs_f64() * 1000.0;
                        conn.send(&WireMessage::GeneratedBlock(out)).await?;
                        conn.send(&WireMessage::Stats(s.stats(ms))).await?;
                    }
                    Err(e) => {
                        fail(&mut conn, "generation_failed", e).await?;
                        break;
                    }
                }
            }
            WireMessage::Close => {
                conn.send(&WireMessage::Close).await?;
                break;
            }
            other => {
                let msg = format!("clients may not send type {:#04x}", other.kind());
                fail(&mut conn, "unexpected", msg).await?;
                break;
            }
        }
    }
    conn.shutdown().await;
    Ok(())
}

/// Accepts connections until the listener fails.
pub async fn serve(listener: TcpListener, backend: Arc<Backend>) -> std::io::Result<()> {
    loop {
        let (stream, addr) = listener.accept().await?;
        let backend = backend.clone();
        tokio::spawn(async move {
            if let Err(e) = handle_connection(stream, backend).await {
                tracing::warn!(%addr, error = %e, "connection ended with an error");
            }
        });
    }
}

/// Binds `addr` and serves in the background; returns the bound address.
pub async fn spawn(addr: &str, backend: Backend) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, tokio::spawn(serve(listener, Arc::new(backend)))))
}
