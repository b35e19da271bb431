//! Shielded teleoperation sessions served over TCP.
//!
//! A human operator drives an environment through the same delayed link
//! and shield runtime the simulator uses. The server owns the true state,
//! the channel and the shield; the client only ever sees the delayed view.
//!
//! # Wire protocol
//!
//! Every message is a 4-byte big-endian length followed by that many bytes
//! of UTF-8 JSON. Each JSON object carries `"version"` (currently
//! [`PROTOCOL_VERSION`]) and a `"type"` tag:
//!
//! | type         | direction | fields |
//! |--------------|-----------|--------|
//! | `create`     | client    | `env`, `channel`, `shield`, `mode`, optional `seed`, `horizon` |
//! | `created`    | server    | `session`, `env`, `channel`, `shield`, `mode`, `seed`, `horizon`, `guarantee`, `frame` |
//! | `act`        | client    | `session`, `action` |
//! | `frame`      | server    | see [`Frame`] |
//! | `error`      | server    | `session` (nullable), `code`, `message` |
//! | `terminated` | server    | `session`, `summary`, `transcript` |
//! | `list`       | client    | none |
//! | `listing`    | server    | `envs`, `channels`, `shields` with digests |
//!
//! `mode` is `{"kind": "turn-based"}` or `{"kind": "ticked", "period_ms": 500}`.
//! In turn-based mode each `act` advances one tick and is answered by a
//! `frame`. In ticked mode the server advances on a fixed period, applying
//! the latest pending `act` or the environment's safe action if none
//! arrived before the deadline.
//!
//! Requests outside the actions available in the observed state are
//! answered with an `error` and do not advance the session. Accepted
//! requests are filtered by the shield with the metric-nearest fallback.
//! Frames never contain the true state; the `terminated` message carries
//! the full transcript, true states included, once the session is over.

mod catalog;
mod server;
mod wire;


use thiserror::Error;

pub use catalog::{Catalog, Channel, ChannelInfo, EnvInfo, ProductEntry, ShieldInfo};
pub use server::{TeleopClient, TeleopServer};
pub use wire::{
    read_message, write_message, ActionInfo, ErrorCode, Frame, Guarantee, LastStep, Message, SessionMode,
    SessionStatus, MAX_MESSAGE_BYTES, PROTOCOL_VERSION,
};

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed message: {0}")]
    Json(#[from] serde_json::Error),
    #[error("message of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("protocol version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("unknown {what} '{id}'")]
    Unknown { what: &'static str, id: String },
    #[error("shield/model mismatch: {0}")]
    Mismatch(String),
    #[error("catalog: {0}")]
    Catalog(String),
    #[error("unexpected reply: {0}")]
    Unexpected(String),
}
