//! Moving federated rounds over a wire.
//!
//! [`wire`] defines the framed envelope format, [`transport`] carries
//! frames over in-process channels or TCP, and [`federation`] runs the
//! synchronous server and client loops on top of either.

pub mod federation;
pub mod transport;
pub mod wire;

pub use federation::{run_client, run_federation, serve, Transport};
pub use transport::{channel_pair, ChannelConnection, Connection, StreamConnection};
pub use wire::{decode, encode, FrameDecoder, Message, MsgKind, RoundEnvelope, PROTOCOL_VERSION};

/// Frame-level decoding failures.
#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("bad magic: not an FSIM frame")]
    BadMagic,
    #[error("protocol version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u8, found: u8 },
    #[error("checksum mismatch: frame says {sent:#010x}, computed {computed:#010x}")]
    Checksum { sent: u32, computed: u32 },
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} bytes after the end of the frame")]
    TrailingBytes(usize),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload of {0} bytes exceeds the frame limit")]
    TooLarge(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] fedsim_core::Error),
    #[error("connection closed")]
    Disconnected,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("rejected by peer: {0}")]
    Rejected(String),
    #[error("client {client_id}: {source}")]
    Client {
        client_id: u32,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable short name for the failure, for logs and tests.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Wire(w) => match w {
                WireError::BadMagic => "bad_magic",
                WireError::VersionMismatch { .. } => "version_mismatch",
                WireError::Checksum { .. } => "checksum",
                WireError::Truncated { .. } => "truncated",
                WireError::TrailingBytes(_) => "trailing_bytes",
                WireError::UnknownKind(_) => "unknown_kind",
                WireError::TooLarge(_) => "too_large",
                WireError::Malformed(_) => "malformed",
            },
            Error::Io(_) => "io",
            Error::Core(_) => "core",
            Error::Disconnected => "disconnected",
            Error::Protocol(_) => "protocol",
            Error::Rejected(_) => "rejected",
            Error::Client { source, .. } => source.code(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
