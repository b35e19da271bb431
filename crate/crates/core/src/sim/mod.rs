//! Lockstep closed-loop simulation of a controller acting over a delayed
//! link, optionally filtered by a shield.
//!
//! Each tick the controller sees the delayed view `(s_{t-τ}, buffer, τ)`
//! where the buffer holds the `τ` actions executed since that observation,
//! oldest first. Its request is filtered by the shield using the view's
//! product-state index, the true state advances with the executed action,
//! and the next delay is drawn from the link. Under a constant-delay link
//! the first `τ` ticks execute the safe action before the controller's
//! first decision arrives.
//!
//! Randomness comes from three independent ChaCha8 streams derived from
//! the episode seed: 0 for the environment, 1 for the channel and 2 for
//! the initial state.

mod batch;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcmdp::{DcMdp, Link};
use crate::digest::mdp_digest;
use crate::envs::{Env, EnvKind};
use crate::mdp::{Policy, QTable};
use crate::shield::{Fallback, Shield, ShieldError};

pub use batch::{
    aggregate, aggregate_log, read_log, run_batch, AggregateReport, BatchOptions, LogRecord,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("shield/model mismatch: {0}")]
    Mismatch(String),
    #[error("delayed view (base {observed}, buffer {buffer:?}) is not a state of the bound product")]
    NotEnumerated { observed: usize, buffer: Vec<usize> },
    #[error("action {action} is not available in observed state {state}")]
    BadAction { action: usize, state: usize },
    #[error("episode already terminated")]
    Finished,
    #[error("invalid simulation setup: {0}")]
    BadSetup(String),
    #[error("log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<ShieldError> for SimError {
    fn from(e: ShieldError) -> Self {
        SimError::Mismatch(e.to_string())
    }
}

/// Rejected requests are replaced by the safest allowed action or by the
/// allowed action nearest under the environment's action metric.
#[derive(Debug, Clone)]
pub enum RuntimeFallback {
    Safest(Arc<QTable>),
    Nearest,
}

/// A shield together with the product it indexes.
#[derive(Debug, Clone)]
pub struct ShieldBinding {
    pub shield: Arc<Shield>,
    pub fallback: RuntimeFallback,
}

/// Everything fixed across the episodes of one experiment.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub env: Arc<Env>,
    pub link: Link,
    pub horizon: usize,
    dc: Option<Arc<DcMdp>>,
    shield: Option<ShieldBinding>,
}

impl SimSetup {
    pub fn new(env: Arc<Env>, link: Link, horizon: usize) -> Result<Self, SimError> {
        if let Link::Constant { safe_action, tau } = link {
            if tau > 0 && safe_action != env.meta.safe_action {
                return Err(SimError::BadSetup(format!(
                    "link idles with action {safe_action}, environment's safe action is {}",
                    env.meta.safe_action
                )));
            }
        }
        Ok(SimSetup { env, link, horizon, dc: None, shield: None })
    }

    /// Attaches the product built from this environment and link, so every
    /// view can be located in it.
    pub fn with_product(mut self, dc: Arc<DcMdp>) -> Result<Self, SimError> {
        if dc.link() != &self.link {
            return Err(SimError::Mismatch("product was built for a different link".into()));
        }
        if mdp_digest(dc.base()) != mdp_digest(&self.env.mdp) {
            return Err(SimError::Mismatch("product was built for a different environment".into()));
        }
        self.dc = Some(dc);
        Ok(self)
    }

    /// Attaches a shield; requires the product it was synthesized on.
    pub fn with_shield(mut self, binding: ShieldBinding) -> Result<Self, SimError> {
        let dc = self.dc.as_ref().ok_or_else(|| SimError::BadSetup("a shield needs its product".into()))?;
        binding.shield.check_digest(dc.digest())?;
        if let RuntimeFallback::Safest(q) = &binding.fallback {
            if q.state_count() != dc.state_count() {
                return Err(SimError::Mismatch("Q table covers a different product".into()));
            }
        }
        self.shield = Some(binding);
        Ok(self)
    }

    pub fn product(&self) -> Option<&Arc<DcMdp>> {
        self.dc.as_ref()
    }

    pub fn shield(&self) -> Option<&ShieldBinding> {
        self.shield.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    /// The robot reached the goal without collision.
    Win,
    /// The unsafe set was entered.
    Loss,
    /// The horizon elapsed first.
    Draw,
    /// Car-following: the horizon elapsed without violation.
    Safe,
    /// Car-following: the unsafe set was entered.
    Violated,
}

impl Outcome {
    pub fn is_safe(self) -> bool {
        !matches!(self, Outcome::Loss | Outcome::Violated)
    }
}

/// What the controller sees at a tick.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct View {
    pub observed: usize,
    /// Actions executed since the observation, oldest first.
    pub buffer: Vec<usize>,
    pub delay: usize,
    /// Index of the view in the bound product, if any.
    pub dc_state: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: usize,
    pub true_state: usize,
    pub observed: usize,
    pub delay: usize,
    pub buffer: Vec<usize>,
    pub dc_state: Option<usize>,
    /// `None` on ticks before any decision arrived.
    pub requested: Option<usize>,
    pub executed: usize,
    pub overridden: bool,
    pub next_state: usize,
    pub next_delay: usize,
    /// Which delay transition followed: 1 no new observation, 2 fresh
    /// observation, 3 older observation; 0 before the first decision.
    pub case: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub seed: u64,
    pub outcome: Outcome,
    pub steps: usize,
    pub min_separation: f64,
    pub mean_separation: f64,
    pub interventions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub summary: EpisodeSummary,
    pub records: Vec<TickRecord>,
}

/// The three independent random streams of an episode.
fn streams(seed: u64) -> [ChaCha8Rng; 3] {
    [0, 1, 2].map(|k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    })
}

fn sample(rng: &mut ChaCha8Rng, items: impl IntoIterator<Item = (usize, f64)>) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (x, p) in items {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        if u < acc {
            return x;
        }
        last = Some(x);
    }
    last.expect("distribution has positive mass")
}

/// One episode, advanced a tick at a time.
#[derive(Debug, Clone)]
pub struct Episode {
    setup: SimSetup,
    episode: u64,
    seed: u64,
    states: Vec<usize>,
    actions: Vec<usize>,
    delay: usize,
    env_rng: ChaCha8Rng,
    channel_rng: ChaCha8Rng,
    records: Vec<TickRecord>,
    outcome: Option<Outcome>,
    separation_sum: f64,
    separation_min: f64,
    interventions: usize,
}

impl Episode {
    /// Samples the initial state and, under a constant-delay link, plays
    /// the safe action until the first decision can arrive.
    pub fn new(setup: SimSetup, seed: u64) -> Self {
        Self::numbered(setup, 0, seed)
    }

    pub fn numbered(setup: SimSetup, episode: u64, seed: u64) -> Self {
        let [env_rng, channel_rng, mut init_rng] = streams(seed);
        let s0 = sample(&mut init_rng, setup.env.mdp.init().iter().copied());
        let sep = setup.env.separation(s0);
        let mut ep = Episode {
            setup,
            episode,
            seed,
            states: vec![s0],
            actions: Vec::new(),
            delay: 0,
            env_rng,
            channel_rng,
            records: Vec::new(),
            outcome: None,
            separation_sum: sep,
            separation_min: sep,
            interventions: 0,
        };
        ep.check_terminal();
        if let Link::Constant { tau, safe_action } = ep.setup.link {
            for _ in 0..tau {
                if ep.outcome.is_some() {
                    break;
                }
                let t = ep.actions.len();
                let z = ep.current();
                let next = ep.advance(safe_action);
                ep.records.push(TickRecord {
                    t,
                    true_state: z,
                    observed: ep.states[0],
                    delay: t,
                    buffer: ep.actions[..t].to_vec(),
                    dc_state: None,
                    requested: None,
                    executed: safe_action,
                    overridden: false,
                    next_state: next,
                    next_delay: t + 1,
                    case: 0,
                });
            }
            ep.delay = tau;
        }
        ep
    }

    fn current(&self) -> usize {
        *self.states.last().expect("non-empty")
    }

    fn advance(&mut self, action: usize) -> usize {
        let z = self.current();
        let (targets, probs) = self.setup.env.mdp.kernel(z, action);
        let next = sample(&mut self.env_rng, targets.iter().map(|t| *t as usize).zip(probs.iter().copied()));
        self.states.push(next);
        self.actions.push(action);
        let sep = self.setup.env.separation(next);
        self.separation_sum += sep;
        self.separation_min = self.separation_min.min(sep);
        self.check_terminal();
        next
    }

    fn check_terminal(&mut self) {
        let z = self.current();
        let grid = self.setup.env.kind() == EnvKind::Gridworld;
        if self.setup.env.is_unsafe(z) {
            self.outcome = Some(if grid { Outcome::Loss } else { Outcome::Violated });
        } else if self.setup.env.is_goal(z) {
            self.outcome = Some(Outcome::Win);
        } else if self.actions.len() >= self.setup.horizon {
            self.outcome = Some(if grid { Outcome::Draw } else { Outcome::Safe });
        }
    }

    pub fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn ticks(&self) -> usize {
        self.actions.len()
    }

    pub fn setup(&self) -> &SimSetup {
        &self.setup
    }

    pub fn records(&self) -> &[TickRecord] {
        &self.records
    }

    /// The true state. Not part of what the controller sees.
    pub fn true_state(&self) -> usize {
        self.current()
    }

    pub fn view(&self) -> Result<View, SimError> {
        let n = self.states.len();
        let observed = self.states[n - 1 - self.delay];
        let buffer = self.actions[self.actions.len() - self.delay..].to_vec();
        let dc_state = match &self.setup.dc {
            Some(dc) => Some(
                dc.index_of(observed, &buffer)
                    .ok_or_else(|| SimError::NotEnumerated { observed, buffer: buffer.clone() })?,
            ),
            None => None,
        };
        Ok(View { observed, buffer, delay: self.delay, dc_state })
    }

    /// The action the shield would execute for `requested` in the current
    /// view, and whether it differs.
    pub fn filter(&self, view: &View, requested: usize) -> Result<(usize, bool), SimError> {
        if !self.setup.env.mdp.allowed(view.observed).contains(requested) {
            return Err(SimError::BadAction { action: requested, state: view.observed });
        }
        let Some(binding) = &self.setup.shield else { return Ok((requested, false)) };
        let x = view.dc_state.expect("a bound shield implies a bound product");
        let metric = &self.setup.env.meta.metric;
        let fallback = match &binding.fallback {
            RuntimeFallback::Safest(q) => Fallback::Safest(q),
            RuntimeFallback::Nearest => Fallback::Nearest(metric),
        };
        Ok(binding.shield.filter(x, requested, fallback))
    }

    /// Executes one decision tick.
    pub fn step(&mut self, requested: usize) -> Result<TickRecord, SimError> {
        if self.outcome.is_some() {
            return Err(SimError::Finished);
        }
        let view = self.view()?;
        let (executed, overridden) = self.filter(&view, requested)?;
        let t = self.actions.len();
        let z = self.current();
        let next = self.advance(executed);
        let next_delay = match &self.setup.link {
            Link::Constant { tau, .. } => *tau,
            Link::Random(m) => {
                let row = m.row(self.delay);
                sample(&mut self.channel_rng, row.iter().copied().enumerate())
            }
        };
        let case = if next_delay == self.delay + 1 {
            1
        } else if next_delay == 0 {
            2
        } else {
            3
        };
        self.delay = next_delay;
        if overridden {
            self.interventions += 1;
        }
        let record = TickRecord {
            t,
            true_state: z,
            observed: view.observed,
            delay: view.delay,
            buffer: view.buffer,
            dc_state: view.dc_state,
            requested: Some(requested),
            executed,
            overridden,
            next_state: next,
            next_delay,
            case,
        };
        self.records.push(record.clone());
        Ok(record)
    }

    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            episode: self.episode,
            seed: self.seed,
            outcome: self.outcome.unwrap_or(Outcome::Draw),
            steps: self.actions.len(),
            min_separation: self.separation_min,
            mean_separation: self.separation_sum / self.states.len() as f64,
            interventions: self.interventions,
        }
    }

    pub fn finish(self) -> EpisodeResult {
        EpisodeResult { summary: self.summary(), records: self.records }
    }
}

/// Re-runs an episode from its seed with a recorded sequence of requests,
/// e.g. a teleoperation transcript. Stops early if the episode ends.
pub fn replay(setup: &SimSetup, seed: u64, requests: &[usize]) -> Result<EpisodeResult, SimError> {
    let mut episode = Episode::new(setup.clone(), seed);
    for &a in requests {
        if episode.is_done() {
            break;
        }
        episode.step(a)?;
    }
    Ok(episode.finish())
}

/// Runs one episode of `controller`, which acts on the observed base state.
pub fn run_episode(setup: &SimSetup, controller: &Policy, seed: u64) -> Result<EpisodeResult, SimError> {
    run_numbered(setup, controller, 0, seed)
}

pub(crate) fn run_numbered(
    setup: &SimSetup,
    controller: &Policy,
    episode: u64,
    seed: u64,
) -> Result<EpisodeResult, SimError> {
    if controller.len() != setup.env.mdp.state_count() {
        return Err(SimError::BadSetup("controller does not cover the environment".into()));
    }
    let mut ep = Episode::numbered(setup.clone(), episode, seed);
    while !ep.is_done() {
        let observed = ep.view()?.observed;
        ep.step(controller.action(observed))?;
    }
    Ok(ep.finish())
}

#[cfg(test)]
mod tests;
