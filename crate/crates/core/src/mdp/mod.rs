//! Finite MDPs and the verification engine.
//!
//! [`BasicMdp`] is the explicit, sparse representation. Anything that can
//! produce one-step expectations implements [`Model`], which is all the
//! value-iteration engine in [`solve`] needs; the delayed-communication
//! product in [`crate::dcmdp`] uses that to avoid materializing its rows.

pub mod format;
pub mod solve;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub use solve::{
    cast_reach_avoid, compute_q, compute_reach_values, compute_safety_values,
    expected_initial_value, optimally_safe_policy, satisfaction_values, Objective, QTable,
    SolveError, SolveOptions, ValueMode, ValueVector,
};

/// Row sums and init mass must match 1 within this bound.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Label naming the unsafe set.
pub const UNSAFE: &str = "unsafe";
/// Label naming the goal set (reach-avoid).
pub const GOAL: &str = "goal";

/// A set of action indices. Supports up to 64 actions.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ActionSet(u64);

impl ActionSet {
    pub const MAX_ACTIONS: usize = 64;

    pub const fn empty() -> Self {
        ActionSet(0)
    }

    pub fn all(action_count: usize) -> Self {
        assert!(action_count <= Self::MAX_ACTIONS);
        if action_count == 64 {
            ActionSet(u64::MAX)
        } else {
            ActionSet((1u64 << action_count) - 1)
        }
    }

    pub fn single(action: usize) -> Self {
        ActionSet(1u64 << action)
    }

    pub fn from_bits(bits: u64) -> Self {
        ActionSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn insert(&mut self, action: usize) {
        self.0 |= 1u64 << action;
    }

    pub fn contains(self, action: usize) -> bool {
        action < 64 && self.0 & (1u64 << action) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset(self, other: ActionSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Smallest action index in the set.
    pub fn first(self) -> Option<usize> {
        (self.0 != 0).then(|| self.0.trailing_zeros() as usize)
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let a = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(a)
            }
        })
    }
}

impl fmt::Debug for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl FromIterator<usize> for ActionSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut set = ActionSet::empty();
        for a in iter {
            set.insert(a);
        }
        set
    }
}

/// Membership vector over the states of a model.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct StateSet {
    bits: Vec<bool>,
}

impl StateSet {
    pub fn new(state_count: usize) -> Self {
        StateSet { bits: vec![false; state_count] }
    }

    pub fn from_indices(state_count: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut set = StateSet::new(state_count);
        for s in indices {
            set.insert(s);
        }
        set
    }

    pub fn from_fn(state_count: usize, f: impl Fn(usize) -> bool) -> Self {
        StateSet { bits: (0..state_count).map(f).collect() }
    }

    pub fn insert(&mut self, s: usize) {
        self.bits[s] = true;
    }

    pub fn contains(&self, s: usize) -> bool {
        self.bits.get(s).copied().unwrap_or(false)
    }

    /// Size of the universe, not the number of members.
    pub fn universe(&self) -> usize {
        self.bits.len()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter_map(|(i, b)| b.then_some(i))
    }

    pub fn is_subset(&self, other: &StateSet) -> bool {
        self.iter().all(|s| other.contains(s))
    }

    pub fn intersects(&self, other: &StateSet) -> bool {
        self.iter().any(|s| other.contains(s))
    }

    pub fn union(&self, other: &StateSet) -> StateSet {
        StateSet {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }
}

/// Anything the value-iteration engine can solve.
///
/// `expectations` fills `out[s * action_count + a]` with
/// `sum_{s'} P(s'|s,a) * values[s']` for every `a` in `allowed(s)`; the
/// remaining entries are left unspecified.
pub trait Model: Sync {
    fn state_count(&self) -> usize;
    fn action_count(&self) -> usize;
    fn allowed(&self, s: usize) -> ActionSet;
    fn expectations(&self, values: &[f64], out: &mut [f64]);
    /// `out[s] = sum_{s'} P(s'|s,policy(s)) values[s']`, one entry per state.
    fn policy_expectations(&self, values: &[f64], policy: &Policy, out: &mut [f64]) {
        let na = self.action_count();
        let mut all = vec![0.0; self.state_count() * na];
        self.expectations(values, &mut all);
        for (s, o) in out.iter_mut().enumerate() {
            *o = all[s * na + policy.action(s)];
        }
    }
    /// Explicit successor distribution of `(s, a)`, sorted by state.
    fn successors(&self, s: usize, a: usize) -> Vec<(usize, f64)>;
    fn init(&self) -> &[(usize, f64)];
    fn label(&self, name: &str) -> Option<&StateSet>;
    /// Content digest identifying the model, when it has one.
    fn model_digest(&self) -> Option<String> {
        None
    }
}

/// A model whose available actions are overridden by a per-state subset,
/// e.g. the shield-restricted MDP.
pub struct Restricted<'a, M: Model + ?Sized> {
    inner: &'a M,
    allowed: &'a [ActionSet],
}

impl<'a, M: Model + ?Sized> Restricted<'a, M> {
    pub fn new(inner: &'a M, allowed: &'a [ActionSet]) -> Self {
        assert_eq!(inner.state_count(), allowed.len());
        Restricted { inner, allowed }
    }
}

impl<M: Model + ?Sized> Model for Restricted<'_, M> {
    fn state_count(&self) -> usize {
        self.inner.state_count()
    }
    fn action_count(&self) -> usize {
        self.inner.action_count()
    }
    fn allowed(&self, s: usize) -> ActionSet {
        self.allowed[s]
    }
    fn expectations(&self, values: &[f64], out: &mut [f64]) {
        self.inner.expectations(values, out)
    }
    fn policy_expectations(&self, values: &[f64], policy: &Policy, out: &mut [f64]) {
        self.inner.policy_expectations(values, policy, out)
    }
    fn successors(&self, s: usize, a: usize) -> Vec<(usize, f64)> {
        self.inner.successors(s, a)
    }
    fn init(&self) -> &[(usize, f64)] {
        self.inner.init()
    }
    fn label(&self, name: &str) -> Option<&StateSet> {
        self.inner.label(name)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MdpError {
    #[error("invalid MDP:\n{0}")]
    Invalid(ValidationReport),
    #[error("action {action} not available in state {state}")]
    ActionNotAllowed { state: usize, action: usize },
    #[error("policy covers {got} states, model has {expected}")]
    PolicyLength { expected: usize, got: usize },
    #[error("unsafe and goal labels overlap (inconsistent labels) at state {0}")]
    InconsistentLabels(usize),
    #[error("missing label '{0}'")]
    MissingLabel(String),
    #[error("{0} actions exceed the supported maximum of 64")]
    TooManyActions(usize),
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Issue {
    RowSum { state: usize, action: usize, sum: f64 },
    DanglingSuccessor { state: usize, action: usize, successor: usize },
    BadProbability { state: usize, action: usize, successor: usize, p: f64 },
    NoActions { state: usize },
    InitSum { sum: f64 },
    InitOutOfRange { state: usize },
    BadInitProbability { state: usize, p: f64 },
    LabelOutOfRange { label: String, state: usize },
    ActionOutOfRange { state: usize, action: usize },
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::RowSum { state, action, sum } => {
                write!(f, "row sum {sum} at ({state},{action})")
            }
            Issue::DanglingSuccessor { state, action, successor } => {
                write!(f, "dangling successor {successor} at ({state},{action})")
            }
            Issue::BadProbability { state, action, successor, p } => {
                write!(f, "probability {p} outside [0,1] at ({state},{action})->{successor}")
            }
            Issue::NoActions { state } => write!(f, "state {state} has no available action"),
            Issue::InitSum { sum } => write!(f, "init sums to {sum}"),
            Issue::InitOutOfRange { state } => write!(f, "init state {state} out of range"),
            Issue::BadInitProbability { state, p } => {
                write!(f, "init probability {p} outside [0,1] at state {state}")
            }
            Issue::LabelOutOfRange { label, state } => {
                write!(f, "label '{label}' names state {state} out of range")
            }
            Issue::ActionOutOfRange { state, action } => {
                write!(f, "action {action} out of range at state {state}")
            }
        }
    }
}

/// Every invariant violation found by a validator; empty iff valid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<(), MdpError> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(MdpError::Invalid(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            writeln!(f, "  {issue}")?;
        }
        Ok(())
    }
}

/// Explicit finite MDP with sparse rows.
///
/// Row `(s, a)` lives at `offsets[s * action_count + a] ..
/// offsets[s * action_count + a + 1]`. An action is available in `s` iff its
/// row is non-empty.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicMdp {
    state_count: usize,
    action_count: usize,
    offsets: Vec<usize>,
    targets: Vec<u32>,
    probs: Vec<f64>,
    allowed: Vec<ActionSet>,
    init: Vec<(usize, f64)>,
    labels: BTreeMap<String, StateSet>,
    identity: Vec<u32>,
}

impl BasicMdp {
    /// Builds the MDP without checking invariants; call [`BasicMdp::validate`]
    /// (or use [`MdpBuilder`]) before trusting the result.
    pub fn from_rows(
        state_count: usize,
        action_count: usize,
        rows: impl IntoIterator<Item = ((usize, usize), Vec<(usize, f64)>)>,
        init: Vec<(usize, f64)>,
        labels: BTreeMap<String, StateSet>,
    ) -> Result<Self, MdpError> {
        if action_count > ActionSet::MAX_ACTIONS {
            return Err(MdpError::TooManyActions(action_count));
        }
        let mut grouped: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
        let mut issues = Vec::new();
        for ((s, a), row) in rows {
            if s >= state_count || a >= action_count {
                issues.push(Issue::ActionOutOfRange { state: s, action: a });
                continue;
            }
            grouped.entry((s, a)).or_default().extend(row);
        }
        if !issues.is_empty() {
            return Err(MdpError::Invalid(ValidationReport { issues }));
        }
        let mut offsets = Vec::with_capacity(state_count * action_count + 1);
        let mut targets = Vec::new();
        let mut probs = Vec::new();
        let mut allowed = vec![ActionSet::empty(); state_count];
        offsets.push(0);
        let mut it = grouped.into_iter().peekable();
        for s in 0..state_count {
            for a in 0..action_count {
                if let Some(((rs, ra), _)) = it.peek() {
                    if (*rs, *ra) == (s, a) {
                        let (_, mut row) = it.next().unwrap();
                        row.sort_by_key(|(t, _)| *t);
                        // merge duplicates
                        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
                        for (t, p) in row {
                            match merged.last_mut() {
                                Some((lt, lp)) if *lt == t => *lp += p,
                                _ => merged.push((t, p)),
                            }
                        }
                        if !merged.is_empty() {
                            allowed[s].insert(a);
                        }
                        for (t, p) in merged {
                            targets.push(u32::try_from(t).unwrap_or(u32::MAX));
                            probs.push(p);
                        }
                    }
                }
                offsets.push(targets.len());
            }
        }
        Ok(BasicMdp {
            state_count,
            action_count,
            offsets,
            targets,
            probs,
            allowed,
            init,
            labels,
            identity: (0..state_count as u32).collect(),
        })
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn allowed(&self, s: usize) -> ActionSet {
        self.allowed[s]
    }

    pub fn init(&self) -> &[(usize, f64)] {
        &self.init
    }

    pub fn labels(&self) -> &BTreeMap<String, StateSet> {
        &self.labels
    }

    pub fn label(&self, name: &str) -> Option<&StateSet> {
        self.labels.get(name)
    }

    pub fn set_label(&mut self, name: impl Into<String>, set: StateSet) {
        self.labels.insert(name.into(), set);
    }

    pub fn set_init(&mut self, init: Vec<(usize, f64)>) {
        self.init = init;
    }

    /// Sparse row of `(s, a)`; empty when `a` is not available.
    pub fn row(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let k = s * self.action_count + a;
        let range = self.offsets[k]..self.offsets[k + 1];
        self.targets[range.clone()]
            .iter()
            .zip(&self.probs[range])
            .map(|(t, p)| (*t as usize, *p))
    }

    /// Row of `(s, a)` if available, otherwise the state is held in place.
    ///
    /// Used when a buffered action reaches a state that does not offer it.
    pub fn kernel(&self, s: usize, a: usize) -> (&[u32], &[f64]) {
        if self.allowed[s].contains(a) {
            let k = s * self.action_count + a;
            let range = self.offsets[k]..self.offsets[k + 1];
            (&self.targets[range.clone()], &self.probs[range])
        } else {
            (std::slice::from_ref(&self.identity[s]), &[1.0])
        }
    }

    pub fn transition_count(&self) -> usize {
        self.targets.len()
    }

    /// Reports every violated invariant.
    pub fn validate(&self) -> ValidationReport {
        let mut issues = Vec::new();
        for s in 0..self.state_count {
            if self.allowed[s].is_empty() {
                issues.push(Issue::NoActions { state: s });
            }
            for a in self.allowed[s].iter() {
                let mut sum = 0.0;
                for (t, p) in self.row(s, a) {
                    if t >= self.state_count {
                        issues.push(Issue::DanglingSuccessor { state: s, action: a, successor: t });
                    }
                    if !(0.0..=1.0).contains(&p) || p.is_nan() {
                        issues.push(Issue::BadProbability { state: s, action: a, successor: t, p });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() >= STOCHASTIC_TOL {
                    issues.push(Issue::RowSum { state: s, action: a, sum });
                }
            }
        }
        let mut init_sum = 0.0;
        for &(s, p) in &self.init {
            if s >= self.state_count {
                issues.push(Issue::InitOutOfRange { state: s });
            }
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                issues.push(Issue::BadInitProbability { state: s, p });
            }
            init_sum += p;
        }
        if (init_sum - 1.0).abs() >= STOCHASTIC_TOL {
            issues.push(Issue::InitSum { sum: init_sum });
        }
        for (name, set) in &self.labels {
            if set.universe() != self.state_count {
                issues.push(Issue::LabelOutOfRange {
                    label: name.clone(),
                    state: set.universe(),
                });
            }
        }
        ValidationReport { issues }
    }
}

/// Diagnostic check of every [`BasicMdp`] invariant.
pub fn validate_mdp(mdp: &BasicMdp) -> ValidationReport {
    mdp.validate()
}

impl Model for BasicMdp {
    fn state_count(&self) -> usize {
        self.state_count
    }
    fn action_count(&self) -> usize {
        self.action_count
    }
    fn allowed(&self, s: usize) -> ActionSet {
        self.allowed[s]
    }
    fn expectations(&self, values: &[f64], out: &mut [f64]) {
        let n = self.action_count;
        for s in 0..self.state_count {
            for a in self.allowed[s].iter() {
                let k = s * n + a;
                let mut acc = 0.0;
                for i in self.offsets[k]..self.offsets[k + 1] {
                    acc += self.probs[i] * values[self.targets[i] as usize];
                }
                out[k] = acc;
            }
        }
    }
    fn policy_expectations(&self, values: &[f64], policy: &Policy, out: &mut [f64]) {
        for (s, o) in out.iter_mut().enumerate() {
            let k = s * self.action_count + policy.action(s);
            let mut acc = 0.0;
            for i in self.offsets[k]..self.offsets[k + 1] {
                acc += self.probs[i] * values[self.targets[i] as usize];
            }
            *o = acc;
        }
    }
    fn successors(&self, s: usize, a: usize) -> Vec<(usize, f64)> {
        self.row(s, a).collect()
    }
    fn init(&self) -> &[(usize, f64)] {
        &self.init
    }
    fn label(&self, name: &str) -> Option<&StateSet> {
        self.labels.get(name)
    }
    fn model_digest(&self) -> Option<String> {
        Some(crate::digest::mdp_digest(self))
    }
}

/// Incremental construction of a validated [`BasicMdp`].
#[derive(Debug, Clone)]
pub struct MdpBuilder {
    state_count: usize,
    action_count: usize,
    rows: BTreeMap<(usize, usize), Vec<(usize, f64)>>,
    init: Vec<(usize, f64)>,
    labels: BTreeMap<String, StateSet>,
}

impl MdpBuilder {
    pub fn new(state_count: usize, action_count: usize) -> Self {
        MdpBuilder {
            state_count,
            action_count,
            rows: BTreeMap::new(),
            init: Vec::new(),
            labels: BTreeMap::new(),
        }
    }

    pub fn transition(&mut self, s: usize, a: usize, next: usize, p: f64) -> &mut Self {
        self.rows.entry((s, a)).or_default().push((next, p));
        self
    }

    pub fn row(&mut self, s: usize, a: usize, row: impl IntoIterator<Item = (usize, f64)>) -> &mut Self {
        self.rows.entry((s, a)).or_default().extend(row);
        self
    }

    pub fn init(&mut self, init: Vec<(usize, f64)>) -> &mut Self {
        self.init = init;
        self
    }

    pub fn label(&mut self, name: &str, states: impl IntoIterator<Item = usize>) -> &mut Self {
        let set = StateSet::from_indices(self.state_count, states);
        self.labels.insert(name.to_string(), set);
        self
    }

    pub fn build(&self) -> Result<BasicMdp, MdpError> {
        let mdp = BasicMdp::from_rows(
            self.state_count,
            self.action_count,
            self.rows.clone(),
            self.init.clone(),
            self.labels.clone(),
        )?;
        mdp.validate().into_result()?;
        Ok(mdp)
    }
}

/// Deterministic stationary policy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Policy {
    actions: Vec<u32>,
}

impl Policy {
    /// Checks `actions[s]` is available in `s` for every state.
    pub fn new<M: Model + ?Sized>(model: &M, actions: Vec<usize>) -> Result<Self, MdpError> {
        if actions.len() != model.state_count() {
            return Err(MdpError::PolicyLength {
                expected: model.state_count(),
                got: actions.len(),
            });
        }
        for (s, &a) in actions.iter().enumerate() {
            if !model.allowed(s).contains(a) {
                return Err(MdpError::ActionNotAllowed { state: s, action: a });
            }
        }
        Ok(Policy { actions: actions.into_iter().map(|a| a as u32).collect() })
    }

    pub fn action(&self, s: usize) -> usize {
        self.actions[s] as usize
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.actions.iter().map(|a| *a as usize)
    }
}
