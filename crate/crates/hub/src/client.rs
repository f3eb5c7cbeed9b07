//! Minimal async client for the hub protocol, used by the CLI probe and the
//! test suites.

use std::collections::{BTreeMap, VecDeque};

use serde_json::Value;
use thalamus_core::wire::{Hello, Role};
use thalamus_core::{
    decode_frame, encode_frame, FrameReader, Message, Sample, SignalDescriptor, SignalKey, TransformSpec, WireError,
};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpStream, ToSocketAddrs};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connect error: {0}")]
    Connect(#[source] std::io::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    /// The hub answered with an error frame or a negative ack.
    #[error("{code}: {detail}")]
    Rejected { code: String, detail: String },
    #[error("connection closed by hub")]
    Closed,
}

impl ClientError {
    /// Hub error code for rejections, otherwise a local category.
    pub fn code(&self) -> &str {
        match self {
            ClientError::Connect(_) => "connect_error",
            ClientError::Io(_) => "io_error",
            ClientError::Wire(_) => "decode_error",
            ClientError::Rejected { code, .. } => code,
            ClientError::Closed => "closed",
        }
    }
}

/// One received frame: the raw line (no trailing newline) and its decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub line: Vec<u8>,
    pub message: Message,
}

pub struct Client {
    rd: OwnedReadHalf,
    wr: OwnedWriteHalf,
    reader: FrameReader,
    /// Frames skipped while waiting for a reply.
    inbox: VecDeque<Frame>,
    /// Frames decoded from the socket but not yet examined.
    decoded: VecDeque<Frame>,
    buf: Vec<u8>,
}

impl Client {
    pub async fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await.map_err(ClientError::Connect)?;
        Ok(Self::from_stream(stream))
    }

    pub fn from_stream(stream: TcpStream) -> Self {
        let _ = stream.set_nodelay(true);
        let (rd, wr) = stream.into_split();
        Client {
            rd,
            wr,
            reader: FrameReader::default(),
            inbox: VecDeque::new(),
            decoded: VecDeque::new(),
            buf: vec![0; 64 * 1024],
        }
    }

    /// Client handshake; returns the catalog.
    pub async fn hello(&mut self, id: &str) -> Result<Vec<SignalDescriptor>, ClientError> {
        self.send(&Message::Hello(Hello {
            role: Role::Client,
            id: id.to_string(),
            signals: Vec::new(),
        }))
        .await?;
        match self.reply(|m| matches!(m, Message::Catalog { .. })).await? {
            Message::Catalog { signals } => Ok(signals),
            _ => unreachable!(),
        }
    }

    /// Device-style hello: registers `signals` and acquires publish grants.
    pub async fn register(&mut self, id: &str, signals: Vec<SignalDescriptor>) -> Result<(), ClientError> {
        self.send(&Message::Hello(Hello {
            role: Role::Device,
            id: id.to_string(),
            signals,
        }))
        .await?;
        self.ack("hello").await.map(drop)
    }

    /// Returns the ack detail on success.
    pub async fn subscribe(
        &mut self,
        selection: Vec<SignalKey>,
        transforms: Vec<TransformSpec>,
    ) -> Result<String, ClientError> {
        self.send(&Message::Subscribe { selection, transforms }).await?;
        self.ack("subscribe").await
    }

    pub async fn control(&mut self, action: &str, params: BTreeMap<String, Value>) -> Result<String, ClientError> {
        self.send(&Message::Control {
            action: action.to_string(),
            params,
        })
        .await?;
        self.ack("control").await
    }

    pub async fn publish(&mut self, sample: Sample) -> Result<(), ClientError> {
        self.send(&Message::data(sample)).await
    }

    pub async fn send(&mut self, m: &Message) -> Result<(), ClientError> {
        let frame = encode_frame(m)?;
        self.send_raw(&frame).await
    }

    pub async fn send_raw(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        self.wr.write_all(bytes).await?;
        Ok(())
    }

    /// Next frame from the hub, including ones that arrived while waiting for
    /// a reply. `None` once the hub closes the connection.
    pub async fn next_frame(&mut self) -> Result<Option<Frame>, ClientError> {
        if let Some(f) = self.inbox.pop_front() {
            return Ok(Some(f));
        }
        self.read_frame().await
    }

    /// Next frame not yet examined, reading the socket if needed.
    async fn read_frame(&mut self) -> Result<Option<Frame>, ClientError> {
        loop {
            if let Some(f) = self.decoded.pop_front() {
                return Ok(Some(f));
            }
            let n = self.rd.read(&mut self.buf).await?;
            if n == 0 {
                return Ok(None);
            }
            for line in self.reader.push_raw(&self.buf[..n]) {
                let line = line?;
                let message = decode_frame(&line)?;
                self.decoded.push_back(Frame { line, message });
            }
        }
    }

    /// Reads until a frame matching `want` arrives; other frames are kept
    /// for `next_frame`. An error frame ends the wait.
    async fn reply(&mut self, want: impl Fn(&Message) -> bool) -> Result<Message, ClientError> {
        loop {
            let f = self.read_frame().await?.ok_or(ClientError::Closed)?;
            if want(&f.message) {
                return Ok(f.message);
            }
            if let Message::Error { code, message } = f.message {
                return Err(ClientError::Rejected { code, detail: message });
            }
            self.inbox.push_back(f);
        }
    }

    async fn ack(&mut self, of: &str) -> Result<String, ClientError> {
        match self.reply(|m| matches!(m, Message::Ack { of: o, .. } if o == of)).await? {
            Message::Ack { ok: true, detail, .. } => Ok(detail),
            Message::Ack { detail, .. } => {
                let (code, rest) = detail.split_once(": ").unwrap_or(("REJECTED", detail.as_str()));
                Err(ClientError::Rejected {
                    code: code.to_string(),
                    detail: rest.to_string(),
                })
            }
            _ => unreachable!(),
        }
    }
}
