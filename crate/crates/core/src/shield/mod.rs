//! ε-shields: per-state sets of allowed actions derived from the maximal
//! safety probabilities, the runtime filter that enforces them, and the
//! synthesis procedure that picks ε to guarantee a target safety level.

mod file;
mod synth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::ActionMetric;
use crate::mdp::{
    compute_safety_values, ActionSet, Model, QTable, Restricted, SolveError, SolveOptions,
    ValueMode, ValueVector,
};

pub use file::{load_shield, read_shield, save_shield, write_shield};
pub use synth::{
    epsilon_grid, synthesize, FallbackChoice, SweepPoint, SynthesisMode, SynthesisOptions,
    SynthesisResult, DEFAULT_ETA,
};

#[derive(Debug, Error)]
pub enum ShieldError {
    #[error("infeasible target: delta {delta} exceeds the feasibility bound E_init[V^max] = {bound}")]
    Infeasible { delta: f64, bound: f64 },
    #[error("epsilon must lie in [0,1], got {0}")]
    BadEpsilon(f64),
    #[error("delta must be a non-negative probability, got {0}")]
    BadDelta(f64),
    #[error("eta must lie in (0,1], got {0}")]
    BadEta(f64),
    #[error("a policy is required exactly in with-policy mode")]
    PolicyMismatch,
    #[error("value table does not match the model: {0}")]
    TableMismatch(String),
    #[error("shield/model mismatch: shield was built for {expected}, model is {found}")]
    DigestMismatch { expected: String, found: String },
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("shield covers {shield} states, model has {model}")]
    StateCountMismatch { shield: usize, model: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-state allowed action sets for one ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shield {
    pub epsilon: f64,
    action_count: usize,
    allowed: Vec<ActionSet>,
    /// Digest of the model the shield was built on.
    pub model_digest: Option<String>,
    /// Synthesis target and outcome, when the shield came from [`synthesize`].
    pub delta: Option<f64>,
    pub mode: Option<SynthesisMode>,
    pub achieved: Option<f64>,
}

/// What the filter executes when a request is rejected.
#[derive(Debug, Clone, Copy)]
pub enum Fallback<'a> {
    /// The allowed action with the highest `Q^max`.
    Safest(&'a QTable),
    /// The allowed action closest to the request.
    Nearest(&'a ActionMetric),
}

impl Shield {
    pub fn from_sets(epsilon: f64, action_count: usize, allowed: Vec<ActionSet>) -> Self {
        Shield {
            epsilon,
            action_count,
            allowed,
            model_digest: None,
            delta: None,
            mode: None,
            achieved: None,
        }
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn allowed(&self, s: usize) -> ActionSet {
        self.allowed[s]
    }

    pub fn sets(&self) -> &[ActionSet] {
        &self.allowed
    }

    pub fn state_count(&self) -> usize {
        self.allowed.len()
    }

    /// Fails unless the shield was built on a model with this digest.
    pub fn check_digest(&self, model_digest: &str) -> Result<(), ShieldError> {
        match &self.model_digest {
            Some(d) if d == model_digest => Ok(()),
            other => Err(ShieldError::DigestMismatch {
                expected: other.clone().unwrap_or_else(|| "<none>".into()),
                found: model_digest.to_string(),
            }),
        }
    }

    /// Executes `requested` unchanged when allowed, otherwise the fallback's
    /// choice among the allowed actions. Returns the executed action and
    /// whether the request was overridden.
    pub fn filter(&self, s: usize, requested: usize, fallback: Fallback<'_>) -> (usize, bool) {
        let allowed = self.allowed[s];
        if allowed.contains(requested) {
            return (requested, false);
        }
        let a = match fallback {
            Fallback::Safest(q) => q.argmax_in(s, allowed),
            Fallback::Nearest(m) => m.nearest(requested, allowed).expect("allowed sets are non-empty"),
        };
        (a, true)
    }

    /// Total number of allowed state-action pairs.
    pub fn size(&self) -> usize {
        self.allowed.iter().map(|a| a.len()).sum()
    }
}

/// Builds the ε-shield: where `V^max(s) >= ε`, every action with
/// `Q^max(s,a) >= ε`; elsewhere the single safest action.
pub fn build_shield<M: Model + ?Sized>(
    model: &M,
    vmax: &ValueVector,
    qmax: &QTable,
    epsilon: f64,
) -> Result<Shield, ShieldError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(ShieldError::BadEpsilon(epsilon));
    }
    check_tables(model, vmax, qmax)?;
    let allowed = (0..model.state_count()).map(|s| shield_set(vmax, qmax, s, epsilon)).collect();
    let mut shield = Shield::from_sets(epsilon, model.action_count(), allowed);
    shield.model_digest = model.model_digest();
    Ok(shield)
}

pub(crate) fn shield_set(vmax: &ValueVector, qmax: &QTable, s: usize, epsilon: f64) -> ActionSet {
    if vmax.values[s] >= epsilon {
        let set: ActionSet = qmax.row(s).filter(|(_, q)| *q >= epsilon).map(|(a, _)| a).collect();
        if !set.is_empty() {
            return set;
        }
    }
    ActionSet::single(qmax.argmax(s))
}

fn check_tables<M: Model + ?Sized>(model: &M, vmax: &ValueVector, qmax: &QTable) -> Result<(), ShieldError> {
    if vmax.mode != ValueMode::Max || qmax.mode != ValueMode::Max {
        return Err(ShieldError::TableMismatch("expected max-mode values".into()));
    }
    if vmax.len() != model.state_count() || qmax.state_count() != model.state_count() {
        return Err(ShieldError::TableMismatch(format!(
            "{} values, {} Q rows, {} states",
            vmax.len(),
            qmax.state_count(),
            model.state_count()
        )));
    }
    Ok(())
}

/// Minimal safety of the model restricted to the shield's allowed actions,
/// a lower bound on the safety of any controller filtered by the shield.
pub fn min_safety_under_shield<M: Model + ?Sized>(
    model: &M,
    shield: &Shield,
    opts: &SolveOptions,
) -> Result<ValueVector, ShieldError> {
    if shield.state_count() != model.state_count() {
        return Err(ShieldError::StateCountMismatch {
            shield: shield.state_count(),
            model: model.state_count(),
        });
    }
    let restricted = Restricted::new(model, shield.sets());
    Ok(compute_safety_values(&restricted, ValueMode::Min, None, opts)?)
}
