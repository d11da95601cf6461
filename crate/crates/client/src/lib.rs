//! Client side of the CRWP steering protocol.

use headsteer_core::steer::HeadActivation;
use headsteer_core::wire::{self, FrameIoError, Message, SteerFrame, WireError, ANY_PROFILE, PROTOCOL_VERSION};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncWrite, BufReader, BufWriter, ReadHalf, WriteHalf};
use tokio::net::{TcpStream, ToSocketAddrs};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("server closed the connection")]
    Closed,
    #[error("server error {code}: {message}")]
    Server { code: u16, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<FrameIoError> for ClientError {
    fn from(e: FrameIoError) -> Self {
        match e {
            FrameIoError::Wire(w) => ClientError::Wire(w),
            FrameIoError::Io(io) => ClientError::Io(io),
            FrameIoError::Closed => ClientError::Closed,
        }
    }
}

/// Values the server reported in HELLO_ACK.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Session {
    pub head_dim: u32,
    pub head_count: u32,
}

pub struct SteerClient<S> {
    reader: BufReader<ReadHalf<S>>,
    writer: BufWriter<WriteHalf<S>>,
    session: Session,
    next_id: u64,
}

impl SteerClient<TcpStream> {
    /// Connects and performs the handshake. Pass `None` to accept whatever
    /// profile the server holds.
    pub async fn connect<A: ToSocketAddrs>(addr: A, profile_digest: Option<[u8; 32]>) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        Self::handshake(stream, profile_digest).await
    }
}

impl<S: AsyncRead + AsyncWrite + Unpin> SteerClient<S> {
    pub async fn handshake(stream: S, profile_digest: Option<[u8; 32]>) -> Result<Self, ClientError> {
        let (r, w) = tokio::io::split(stream);
        let mut reader = BufReader::new(r);
        let mut writer = BufWriter::new(w);
        let hello = Message::Hello { version: PROTOCOL_VERSION, profile_digest: profile_digest.unwrap_or(ANY_PROFILE) };
        wire::write_message(&mut writer, &hello).await?;
        let session = match wire::read_message(&mut reader).await? {
            Message::HelloAck { head_dim, head_count } => Session { head_dim, head_count },
            Message::Error { code, message } => return Err(ClientError::Server { code, message }),
            other => return Err(ClientError::Protocol(format!("expected HELLO_ACK, got type 0x{:02x}", other.type_byte()))),
        };
        Ok(Self { reader, writer, session, next_id: 0 })
    }

    pub fn session(&self) -> Session {
        self.session
    }

    /// Sends one frame and waits for its response.
    pub async fn steer_frame(&mut self, frame: &SteerFrame) -> Result<SteerFrame, ClientError> {
        wire::write_message(&mut self.writer, &Message::SteerReq(frame.clone())).await?;
        match wire::read_message(&mut self.reader).await? {
            Message::SteerResp(resp) if resp.request_id == frame.request_id => Ok(resp),
            Message::SteerResp(resp) => Err(ClientError::Protocol(format!(
                "response id {} does not match request id {}",
                resp.request_id, frame.request_id
            ))),
            Message::Error { code, message } => Err(ClientError::Server { code, message }),
            other => Err(ClientError::Protocol(format!("expected STEER_RESP, got type 0x{:02x}", other.type_byte()))),
        }
    }

    /// Like `steer_frame` with a request id assigned from a counter.
    pub async fn steer(&mut self, entries: Vec<HeadActivation>) -> Result<Vec<HeadActivation>, ClientError> {
        let frame = SteerFrame { request_id: self.next_id, entries };
        self.next_id = self.next_id.wrapping_add(1);
        Ok(self.steer_frame(&frame).await?.entries)
    }
}
