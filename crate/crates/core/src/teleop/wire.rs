use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::catalog::{ChannelInfo, EnvInfo, ShieldInfo};
use super::TeleopError;
use crate::envs::StateView;
use crate::shield::SynthesisMode;
use crate::sim::{EpisodeSummary, Outcome, TickRecord};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_MESSAGE_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SessionMode {
    TurnBased,
    Ticked { period_ms: u64 },
}

impl Default for SessionMode {
    fn default() -> Self {
        SessionMode::TurnBased
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    Live,
    Win,
    Loss,
    Draw,
    Safe,
    Violated,
}

impl From<Option<Outcome>> for SessionStatus {
    fn from(outcome: Option<Outcome>) -> Self {
        match outcome {
            None => SessionStatus::Live,
            Some(Outcome::Win) => SessionStatus::Win,
            Some(Outcome::Loss) => SessionStatus::Loss,
            Some(Outcome::Draw) => SessionStatus::Draw,
            Some(Outcome::Safe) => SessionStatus::Safe,
            Some(Outcome::Violated) => SessionStatus::Violated,
        }
    }
}

/// One action of the observed state as the shield sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionInfo {
    pub action: usize,
    pub name: String,
    /// Whether the shield lets the action through unchanged.
    pub allowed: bool,
    /// Maximal probability of staying safe after taking the action.
    pub q_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LastStep {
    pub requested: usize,
    pub executed: usize,
    pub overridden: bool,
    /// The request was the safe action substituted at a ticked deadline.
    pub timed_out: bool,
}

/// What the operator sees after each tick: the delayed observation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub session: u64,
    /// Decision ticks elapsed, including the initial idle ticks of a
    /// constant-delay link.
    pub tick: usize,
    pub observed_state: usize,
    pub observed: StateView,
    pub delay: usize,
    /// Actions executed since the observation, oldest first.
    pub buffer: Vec<usize>,
    /// Actions available in the observed state.
    pub actions: Vec<ActionInfo>,
    pub last: Option<LastStep>,
    pub status: SessionStatus,
}

/// Certified lower bound on safety under any operator, from the stored
/// synthesis metadata of a policy-free shield.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Guarantee {
    pub delta: f64,
    pub certified: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    BadMessage,
    Version,
    UnknownEnv,
    UnknownChannel,
    UnknownShield,
    UnknownSession,
    ModelMismatch,
    BadAction,
    Busy,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Message {
    Create {
        env: String,
        channel: String,
        shield: String,
        #[serde(default)]
        mode: SessionMode,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        horizon: Option<usize>,
    },
    Created {
        session: u64,
        env: String,
        channel: String,
        shield: String,
        mode: SessionMode,
        seed: u64,
        horizon: usize,
        shield_mode: Option<SynthesisMode>,
        guarantee: Option<Guarantee>,
        frame: Frame,
    },
    Act {
        session: u64,
        action: usize,
    },
    Frame(Frame),
    Error {
        session: Option<u64>,
        code: ErrorCode,
        message: String,
    },
    Terminated {
        session: u64,
        summary: EpisodeSummary,
        transcript: Vec<TickRecord>,
    },
    List,
    Listing {
        envs: Vec<EnvInfo>,
        channels: Vec<ChannelInfo>,
        shields: Vec<ShieldInfo>,
    },
}

impl Message {
    pub fn error(session: Option<u64>, code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error { session, code, message: message.into() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Create { .. } => "create",
            Message::Created { .. } => "created",
            Message::Act { .. } => "act",
            Message::Frame(_) => "frame",
            Message::Error { .. } => "error",
            Message::Terminated { .. } => "terminated",
            Message::List => "list",
            Message::Listing { .. } => "listing",
        }
    }
}

pub fn write_message<W: Write>(out: &mut W, message: &Message) -> Result<(), TeleopError> {
    let mut value = serde_json::to_value(message)?;
    value
        .as_object_mut()
        .expect("messages serialize to objects")
        .insert("version".into(), PROTOCOL_VERSION.into());
    let bytes = serde_json::to_vec(&value)?;
    if bytes.len() > MAX_MESSAGE_BYTES {
        return Err(TeleopError::TooLarge(bytes.len()));
    }
    out.write_all(&(bytes.len() as u32).to_be_bytes())?;
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Reads one message; `Ok(None)` on a clean end of stream.
pub fn read_message<R: Read>(input: &mut R) -> Result<Option<Message>, TeleopError> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_MESSAGE_BYTES {
        return Err(TeleopError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    input.read_exact(&mut body)?;
    let mut value: Value = serde_json::from_slice(&body)?;
    let found = value
        .as_object_mut()
        .and_then(|o| o.remove("version"))
        .and_then(|v| v.as_u64())
        .ok_or_else(|| TeleopError::Unexpected("message has no version tag".into()))?;
    if found != PROTOCOL_VERSION as u64 {
        return Err(TeleopError::Version { found: found as u32, expected: PROTOCOL_VERSION });
    }
    Ok(Some(serde_json::from_value(value)?))
}
