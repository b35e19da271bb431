use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::catalog::{Catalog, ProductEntry};
use super::wire::{
    read_message, write_message, ActionInfo, ErrorCode, Frame, Guarantee, LastStep, Message, SessionMode,
};
use super::TeleopError;
use crate::shield::SynthesisMode;
use crate::sim::{Episode, RuntimeFallback, ShieldBinding, SimSetup};

/// Slack on a stored certificate before a policy-free shield is refused.
const CERTIFICATE_SLACK: f64 = 2e-6;

/// Accepts connections and serves each on its own thread.
pub struct TeleopServer {
    listener: TcpListener,
    catalog: Arc<Catalog>,
    ids: Arc<AtomicU64>,
}

impl TeleopServer {
    pub fn bind(addr: impl ToSocketAddrs, catalog: Arc<Catalog>) -> io::Result<Self> {
        Ok(TeleopServer { listener: TcpListener::bind(addr)?, catalog, ids: Arc::new(AtomicU64::new(1)) })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves forever.
    pub fn run(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let catalog = self.catalog.clone();
            let ids = self.ids.clone();
            thread::spawn(move || {
                let _ = serve_connection(stream, catalog, ids);
            });
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> io::Result<(SocketAddr, JoinHandle<io::Result<()>>)> {
        let addr = self.local_addr()?;
        Ok((addr, thread::spawn(move || self.run())))
    }
}

struct Session {
    episode: Episode,
    entry: Arc<ProductEntry>,
    mode: SessionMode,
    pending: Option<usize>,
    deadline: Option<Instant>,
}

struct Connection {
    out: BufWriter<TcpStream>,
    catalog: Arc<Catalog>,
    ids: Arc<AtomicU64>,
    sessions: BTreeMap<u64, Session>,
}

fn serve_connection(stream: TcpStream, catalog: Arc<Catalog>, ids: Arc<AtomicU64>) -> Result<(), TeleopError> {
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut input = BufReader::new(reader);
        loop {
            match read_message(&mut input) {
                Ok(Some(m)) => {
                    if tx.send(Ok(m)).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let fatal = matches!(e, TeleopError::Io(_) | TeleopError::TooLarge(_));
                    if tx.send(Err(e)).is_err() || fatal {
                        break;
                    }
                }
            }
        }
    });
    let mut conn = Connection { out: BufWriter::new(stream), catalog, ids, sessions: BTreeMap::new() };
    loop {
        let incoming = match conn.next_deadline() {
            Some(at) => match rx.recv_timeout(at.saturating_duration_since(Instant::now())) {
                Ok(m) => Some(m),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => return Ok(()),
            },
            None => match rx.recv() {
                Ok(m) => Some(m),
                Err(_) => return Ok(()),
            },
        };
        match incoming {
            Some(Ok(message)) => conn.handle(message)?,
            Some(Err(TeleopError::Version { found, expected })) => conn.send(&Message::error(
                None,
                ErrorCode::Version,
                format!("protocol version {found} not supported, expected {expected}"),
            ))?,
            Some(Err(TeleopError::Json(e))) => {
                conn.send(&Message::error(None, ErrorCode::BadMessage, e.to_string()))?
            }
            Some(Err(TeleopError::Unexpected(e))) => conn.send(&Message::error(None, ErrorCode::BadMessage, e))?,
            Some(Err(e)) => return Err(e),
            None => {}
        }
        conn.fire_deadlines()?;
    }
}

impl Connection {
    fn send(&mut self, message: &Message) -> Result<(), TeleopError> {
        write_message(&mut self.out, message)
    }

    fn next_deadline(&self) -> Option<Instant> {
        self.sessions.values().filter_map(|s| s.deadline).min()
    }

    fn handle(&mut self, message: Message) -> Result<(), TeleopError> {
        match message {
            Message::Create { env, channel, shield, mode, seed, horizon } => {
                match self.create(env, channel, shield, mode, seed, horizon) {
                    Ok(id) => self.after_step(id),
                    Err(reply) => self.send(&reply),
                }
            }
            Message::Act { session, action } => self.act(session, action),
            Message::List => {
                let listing = Message::Listing {
                    envs: self.catalog.env_infos(),
                    channels: self.catalog.channel_infos(),
                    shields: self.catalog.shield_infos(),
                };
                self.send(&listing)
            }
            other => self.send(&Message::error(
                None,
                ErrorCode::BadMessage,
                format!("'{}' is a server message", other.kind()),
            )),
        }
    }

    fn create(
        &mut self,
        env_id: String,
        channel_id: String,
        shield_id: String,
        mode: SessionMode,
        seed: Option<u64>,
        horizon: Option<usize>,
    ) -> Result<u64, Message> {
        let fail = |code, message: String| Message::error(None, code, message);
        let env = self.catalog.env(&env_id).map_err(|e| fail(ErrorCode::UnknownEnv, e.to_string()))?.clone();
        let channel = self.catalog.channel(&channel_id).map_err(|e| fail(ErrorCode::UnknownChannel, e.to_string()))?;
        let link = channel.link_for(&env);
        let shield = self.catalog.shield(&shield_id).map_err(|e| fail(ErrorCode::UnknownShield, e.to_string()))?.clone();
        if let SessionMode::Ticked { period_ms: 0 } = mode {
            return Err(fail(ErrorCode::BadMessage, "tick period must be positive".into()));
        }
        let entry = self.catalog.product(&env_id, &channel_id).map_err(|e| fail(ErrorCode::Internal, e.to_string()))?;
        let mismatch = |detail: String| fail(ErrorCode::ModelMismatch, format!("shield/model mismatch: {detail}"));
        shield.check_digest(entry.dc.digest()).map_err(|e| fail(ErrorCode::ModelMismatch, e.to_string()))?;
        if shield.state_count() != entry.dc.state_count() {
            return Err(mismatch("shield covers a different number of states".into()));
        }
        let guarantee = match (shield.mode, shield.delta, shield.achieved) {
            (Some(SynthesisMode::PolicyFree), Some(delta), Some(certified)) => {
                if certified + CERTIFICATE_SLACK < delta {
                    return Err(mismatch(format!("stored certificate {certified} is below its target {delta}")));
                }
                Some(Guarantee { delta, certified, epsilon: shield.epsilon })
            }
            _ => None,
        };
        let id = self.ids.fetch_add(1, Ordering::Relaxed);
        let seed = seed.unwrap_or(id);
        let horizon = horizon.unwrap_or(env.meta.horizon);
        let setup = SimSetup::new(env, link, horizon)
            .and_then(|s| s.with_product(entry.dc.clone()))
            .and_then(|s| s.with_shield(ShieldBinding { shield: shield.clone(), fallback: RuntimeFallback::Nearest }))
            .map_err(|e| mismatch(e.to_string()))?;
        let episode = Episode::new(setup, seed);
        let deadline = match mode {
            SessionMode::Ticked { period_ms } => Some(Instant::now() + Duration::from_millis(period_ms)),
            SessionMode::TurnBased => None,
        };
        let session = Session { episode, entry, mode, pending: None, deadline };
        let frame = frame(id, &session, None).map_err(|e| fail(ErrorCode::Internal, e))?;
        self.sessions.insert(id, session);
        let created = Message::Created {
            session: id,
            env: env_id,
            channel: channel_id,
            shield: shield_id,
            mode,
            seed,
            horizon,
            shield_mode: shield.mode,
            guarantee,
            frame,
        };
        self.send(&created).map_err(|e| fail(ErrorCode::Internal, e.to_string()))?;
        Ok(id)
    }

    fn act(&mut self, id: u64, action: usize) -> Result<(), TeleopError> {
        let Some(session) = self.sessions.get_mut(&id) else {
            return self.send(&Message::error(Some(id), ErrorCode::UnknownSession, format!("no live session {id}")));
        };
        let observed = match session.episode.view() {
            Ok(v) => v.observed,
            Err(e) => return self.send(&Message::error(Some(id), ErrorCode::Internal, e.to_string())),
        };
        let env = &session.episode.setup().env;
        if !env.mdp.allowed(observed).contains(action) {
            let message = format!("action {action} is not available in the observed state");
            return self.send(&Message::error(Some(id), ErrorCode::BadAction, message));
        }
        match session.mode {
            SessionMode::TurnBased => {
                self.step(id, action, false)?;
                self.after_step(id)
            }
            SessionMode::Ticked { .. } => {
                if session.pending.is_some() {
                    let message = "an action is already pending for this tick";
                    return self.send(&Message::error(Some(id), ErrorCode::Busy, message));
                }
                session.pending = Some(action);
                Ok(())
            }
        }
    }

    fn step(&mut self, id: u64, requested: usize, timed_out: bool) -> Result<(), TeleopError> {
        let session = self.sessions.get_mut(&id).expect("live session");
        match session.episode.step(requested) {
            Ok(record) => {
                let last = LastStep { requested, executed: record.executed, overridden: record.overridden, timed_out };
                match frame(id, session, Some(last)) {
                    Ok(f) => self.send(&Message::Frame(f)),
                    Err(e) => self.send(&Message::error(Some(id), ErrorCode::Internal, e)),
                }
            }
            Err(e) => self.send(&Message::error(Some(id), ErrorCode::Internal, e.to_string())),
        }
    }

    /// Closes the session with its transcript once it has ended.
    fn after_step(&mut self, id: u64) -> Result<(), TeleopError> {
        if !self.sessions.get(&id).is_some_and(|s| s.episode.is_done()) {
            return Ok(());
        }
        let session = self.sessions.remove(&id).expect("checked");
        let result = session.episode.finish();
        self.send(&Message::Terminated { session: id, summary: result.summary, transcript: result.records })
    }

    fn fire_deadlines(&mut self) -> Result<(), TeleopError> {
        let now = Instant::now();
        let due: Vec<u64> =
            self.sessions.iter().filter(|(_, s)| s.deadline.is_some_and(|d| d <= now)).map(|(id, _)| *id).collect();
        for id in due {
            let session = self.sessions.get_mut(&id).expect("live session");
            let SessionMode::Ticked { period_ms } = session.mode else { continue };
            let period = Duration::from_millis(period_ms);
            let next = session.deadline.expect("ticked") + period;
            session.deadline = Some(if next <= now { now + period } else { next });
            let (requested, timed_out) = match session.pending.take() {
                Some(a) => (a, false),
                None => (idle_action(session), true),
            };
            self.step(id, requested, timed_out)?;
            self.after_step(id)?;
        }
        Ok(())
    }
}

/// The safe action, or the lowest available one where it is unavailable.
fn idle_action(session: &Session) -> usize {
    let env = &session.episode.setup().env;
    let observed = session.episode.view().map(|v| v.observed).unwrap_or(0);
    let allowed = env.mdp.allowed(observed);
    if allowed.contains(env.meta.safe_action) {
        env.meta.safe_action
    } else {
        allowed.iter().next().unwrap_or(env.meta.safe_action)
    }
}

fn frame(id: u64, session: &Session, last: Option<LastStep>) -> Result<Frame, String> {
    let episode = &session.episode;
    let view = episode.view().map_err(|e| e.to_string())?;
    let env = &episode.setup().env;
    let x = view.dc_state.ok_or("session has no product state")?;
    let shield = &episode.setup().shield().ok_or("session has no shield")?.shield;
    let allowed = shield.allowed(x);
    let actions = env
        .mdp
        .allowed(view.observed)
        .iter()
        .map(|a| ActionInfo {
            action: a,
            name: env.meta.action_names[a].clone(),
            allowed: allowed.contains(a),
            q_max: session.entry.qmax.get(x, a).unwrap_or(0.0),
        })
        .collect();
    Ok(Frame {
        session: id,
        tick: episode.ticks(),
        observed_state: view.observed,
        observed: env.view(view.observed),
        delay: view.delay,
        buffer: view.buffer,
        actions,
        last,
        status: episode.outcome().into(),
    })
}

/// Blocking client for scripts and tests.
pub struct TeleopClient {
    input: BufReader<TcpStream>,
    output: TcpStream,
}

impl TeleopClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TeleopError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TeleopClient { input: BufReader::new(stream.try_clone()?), output: stream })
    }

    pub fn set_timeout(&self, timeout: Option<Duration>) -> Result<(), TeleopError> {
        self.output.set_read_timeout(timeout)?;
        Ok(())
    }

    pub fn send(&mut self, message: &Message) -> Result<(), TeleopError> {
        write_message(&mut self.output, message)
    }

    pub fn recv(&mut self) -> Result<Message, TeleopError> {
        read_message(&mut self.input)?.ok_or_else(|| TeleopError::Unexpected("connection closed".into()))
    }

    pub fn request(&mut self, message: &Message) -> Result<Message, TeleopError> {
        self.send(message)?;
        self.recv()
    }
}
