//! TCP front end for steering. A model runner connects, performs the HELLO
//! handshake and then exchanges STEER_REQ/STEER_RESP frames in lockstep.

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use headsteer_core::profile::SteeringProfile;
use headsteer_core::steer::{SteerError, Steerer};
use headsteer_core::wire::{self, code, FrameIoError, Message, SteerFrame, ANY_PROFILE, PROTOCOL_VERSION};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite, BufReader, BufWriter};
use tokio::net::{TcpListener, TcpStream, ToSocketAddrs};
use tokio::task::JoinSet;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("profile is invalid: {0}")]
    InvalidProfile(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// What the connection loop should do after a reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum After {
    Continue,
    Close,
}

/// Per-connection protocol state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Session {
    #[default]
    AwaitingHello,
    Ready,
}

/// Immutable steering state shared read-only by every connection.
#[derive(Debug)]
pub struct SteeringService {
    steerer: Steerer<Arc<SteeringProfile>>,
    digest: [u8; 32],
    strict: bool,
}

impl SteeringService {
    pub fn new(profile: SteeringProfile, strict: bool) -> Result<Self, ServiceError> {
        let violations = profile.violations();
        if !violations.is_empty() {
            return Err(ServiceError::InvalidProfile(violations.join("; ")));
        }
        let digest = profile.digest().map_err(|e| ServiceError::InvalidProfile(e.to_string()))?;
        Ok(Self { steerer: Steerer::new(Arc::new(profile)), digest, strict })
    }

    pub fn profile(&self) -> &SteeringProfile {
        self.steerer.profile()
    }

    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn strict(&self) -> bool {
        self.strict
    }

    /// Protocol state machine for one incoming message. Pure, so it can be
    /// exercised without sockets.
    pub fn handle(&self, session: &mut Session, msg: Message) -> (Message, After) {
        match (*session, msg) {
            (Session::AwaitingHello, Message::Hello { version, profile_digest }) => {
                if version != PROTOCOL_VERSION {
                    let text = format!("protocol version {version} not supported, server speaks {PROTOCOL_VERSION}");
                    return (Message::error(code::UNSUPPORTED_VERSION, text), After::Close);
                }
                if profile_digest != ANY_PROFILE && profile_digest != self.digest {
                    return (Message::error(code::PROFILE_MISMATCH, "profile digest does not match the served profile"), After::Close);
                }
                *session = Session::Ready;
                let ack = Message::HelloAck {
                    head_dim: self.profile().head_dim,
                    head_count: self.profile().entries.len() as u32,
                };
                (ack, After::Continue)
            }
            (Session::AwaitingHello, Message::SteerReq(_)) => {
                (Message::error(code::HANDSHAKE_REQUIRED, "HELLO must precede STEER_REQ"), After::Close)
            }
            (Session::Ready, Message::SteerReq(frame)) => match self.handle_steer(&frame) {
                Ok(resp) => (Message::SteerResp(resp), After::Continue),
                // The request was well formed; the stream is still in sync.
                Err(err) => (err, After::Continue),
            },
            (_, other) => {
                let text = format!("unexpected message type 0x{:02x}", other.type_byte());
                (Message::error(code::UNEXPECTED_MESSAGE, text), After::Close)
            }
        }
    }

    /// Edits one frame. Errors come back as ERROR messages.
    pub fn handle_steer(&self, frame: &SteerFrame) -> Result<SteerFrame, Message> {
        let d = self.profile().dim();
        if let Some(e) = frame.entries.iter().find(|e| e.x.len() != d) {
            let text = format!("head {} carries {} values, negotiated d = {d}", e.head, e.x.len());
            return Err(Message::error(code::DIMENSION_MISMATCH, text));
        }
        if self.strict {
            if let Some(e) = frame.entries.iter().find(|e| !self.steerer.contains(e.head)) {
                return Err(Message::error(code::UNKNOWN_HEAD, format!("head {} is not in the profile", e.head)));
            }
        }
        match self.steerer.apply(&frame.entries) {
            Ok(entries) => Ok(SteerFrame { request_id: frame.request_id, entries }),
            Err(SteerError::Dimension { head, expected, got }) => {
                let at = head.map(|h| format!(" at head {h}")).unwrap_or_default();
                Err(Message::error(code::DIMENSION_MISMATCH, format!("expected {expected} values, got {got}{at}")))
            }
            Err(e) => Err(Message::error(code::INTERNAL, e.to_string())),
        }
    }

    /// Runs the request loop on one byte stream until the peer hangs up or a
    /// protocol violation closes it.
    pub async fn serve_connection<S>(&self, stream: S) -> io::Result<()>
    where
        S: AsyncRead + AsyncWrite + Unpin,
    {
        let (r, w) = tokio::io::split(stream);
        let mut reader = BufReader::new(r);
        let mut writer = BufWriter::new(w);
        let mut session = Session::default();
        loop {
            let (reply, after) = match wire::read_message(&mut reader).await {
                Ok(msg) => self.handle(&mut session, msg),
                Err(FrameIoError::Closed) => return Ok(()),
                Err(FrameIoError::Io(e)) => return Err(e),
                Err(FrameIoError::Wire(e)) => (Message::error(code::MALFORMED_FRAME, e.to_string()), After::Close),
            };
            match wire::write_message(&mut writer, &reply).await {
                Ok(()) => {}
                Err(FrameIoError::Io(e)) => return Err(e),
                Err(e) => return Err(io::Error::other(e)),
            }
            if after == After::Close {
                return Ok(());
            }
        }
    }
}

pub async fn bind<A: ToSocketAddrs + std::fmt::Display>(addr: A) -> Result<TcpListener, ServiceError> {
    let shown = addr.to_string();
    TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr: shown, source })
}

/// Accepts connections until `shutdown` resolves, then drops the listener and
/// aborts connections still open.
pub async fn serve<F>(listener: TcpListener, service: Arc<SteeringService>, shutdown: F) -> Result<(), ServiceError>
where
    F: Future<Output = ()>,
{
    let mut tasks = JoinSet::new();
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => {
                let (stream, peer) = match accepted {
                    Ok(pair) => pair,
                    Err(e) => {
                        tracing::warn!("accept failed: {e}");
                        continue;
                    }
                };
                tasks.spawn(handle_tcp(service.clone(), stream, peer));
            }
            Some(_) = tasks.join_next(), if !tasks.is_empty() => {}
        }
    }
    tasks.shutdown().await;
    Ok(())
}

async fn handle_tcp(service: Arc<SteeringService>, stream: TcpStream, peer: SocketAddr) {
    let _ = stream.set_nodelay(true);
    tracing::debug!(%peer, "connection opened");
    if let Err(e) = service.serve_connection(stream).await {
        tracing::debug!(%peer, "connection ended with error: {e}");
    }
}
