use thiserror::Error;

/// Errors surfaced by packet construction, table management and the harness.
///
/// Per-packet processing failures are not errors: they are reported as
/// [`crate::ProcessOutcome::Drop`] so a relay can silently discard the packet.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("path has {hops} hops but the routing vector only holds {max}")]
    PathTooLong { hops: usize, max: usize },
    #[error("path must contain at least one hop")]
    EmptyPath,
    #[error("payload of {len} bytes exceeds the {max} byte limit")]
    PayloadTooLong { len: usize, max: usize },
    #[error("keystream request of {0} bytes exceeds the cap")]
    KeystreamTooLong(usize),
    #[error("slot index {index} out of range (vector has {slots} slots)")]
    SlotOutOfRange { index: usize, slots: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(&'static str),
    #[error("invalid group element encoding")]
    InvalidGroupElement,
    #[error("window size {0} outside [1, 1024]")]
    InvalidWindow(usize),
    #[error("pattern table capacity of {0} entries exceeded")]
    TableFull(usize),
    #[error("entry (session {session}, t={t}) already consumed")]
    Replay { session: u64, t: u64 },
    #[error("t={t} is outside the live window of session {session}")]
    OutOfWindow { session: u64, t: u64 },
    #[error("unknown session {0}")]
    UnknownSession(u64),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("no link from {from} to {to}")]
    NoLink { from: String, to: String },
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
