use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the store, log, dispatcher and DFG runtime can surface.
///
/// Each variant owns a stable numeric code (see [`Error::code`]) that is
/// carried on the wire; codes are never reused or renumbered.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no registered pool prefixes key {0:?}")]
    NoSuchPool(String),
    #[error("malformed key {key:?}: {reason}")]
    MalformedKey { key: String, reason: &'static str },
    #[error("invalid pool {path:?}: {reason}")]
    InvalidPool { path: String, reason: String },
    #[error("key {0:?} not found")]
    KeyNotFound(String),
    #[error("version {version} of key {key:?} not found")]
    VersionNotFound { key: String, version: u64 },
    #[error("read of key {0:?} retried too many times while a writer was active")]
    RetryExhausted(String),
    #[error("key {key:?} has no version at or before t={t_us}us")]
    NotFound { key: String, t_us: u64 },
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("log size budget of {budget} bytes exceeded")]
    LogFull { budget: u64 },
    #[error("log is corrupt: {0}")]
    CorruptLog(String),
    #[error("lambda {lambda:?} already registered at {prefix:?}")]
    DuplicateRegistration { lambda: String, prefix: String },
    #[error("upcall queue {0} is full")]
    QueueFull(usize),
    #[error("vertex {0:?} has no out-edges")]
    NoOutEdges(String),
    #[error("dfg schema error at {field}: {message}")]
    Schema { field: String, message: String },
    #[error("dfg references unknown pool {0:?}")]
    UnknownPool(String),
    #[error("dfg references unknown lambda {0:?}")]
    UnknownLambda(String),
    #[error("pool {0:?} is volatile and keeps no version history")]
    NotPersistent(String),
    #[error("shard unavailable: {0}")]
    ShardUnavailable(String),
    #[error("membership view changed during the operation")]
    ViewChanged,
    #[error("commit timed out waiting for member {0}")]
    CommitTimeout(u32),
    #[error("node {0} unreachable")]
    NodeUnreachable(u32),
    #[error("lambda failed: {0}")]
    Lambda(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("bootstrap timed out waiting for peer {0}")]
    BootstrapTimeout(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("node {0} is not the sequencer for this shard")]
    NotSequencer(u32),
    /// An error reported by a remote node, carrying that node's code.
    #[error("{message}")]
    Remote { code: u16, message: String },
}

impl Error {
    /// Stable wire code.
    pub fn code(&self) -> u16 {
        match self {
            Error::NoSuchPool(_) => 1,
            Error::MalformedKey { .. } => 2,
            Error::InvalidPool { .. } => 3,
            Error::KeyNotFound(_) => 4,
            Error::VersionNotFound { .. } => 5,
            Error::RetryExhausted(_) => 6,
            Error::NotFound { .. } => 7,
            Error::Timeout(_) => 8,
            Error::LogFull { .. } => 9,
            Error::CorruptLog(_) => 10,
            Error::DuplicateRegistration { .. } => 11,
            Error::QueueFull(_) => 12,
            Error::NoOutEdges(_) => 13,
            Error::Schema { .. } => 14,
            Error::UnknownPool(_) => 15,
            Error::UnknownLambda(_) => 16,
            Error::NotPersistent(_) => 17,
            Error::ShardUnavailable(_) => 18,
            Error::ViewChanged => 19,
            Error::CommitTimeout(_) => 20,
            Error::NodeUnreachable(_) => 21,
            Error::Lambda(_) => 22,
            Error::Config(_) => 23,
            Error::BootstrapTimeout(_) => 24,
            Error::Protocol(_) => 25,
            Error::Io(_) => 26,
            Error::NotSequencer(_) => 27,
            Error::Remote { code, .. } => *code,
        }
    }

    pub(crate) fn malformed(key: &str, reason: &'static str) -> Self {
        Error::MalformedKey {
            key: key.to_string(),
            reason,
        }
    }
}
