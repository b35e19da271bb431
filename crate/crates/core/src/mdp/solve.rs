//! Reachability value iteration and everything derived from it.
//!
//! Safety values are always computed through the reachability dual:
//! `V_safe = 1 - V_reach(unsafe)`, with min-safety taken from max-reach and
//! max-safety from min-reach.

use thiserror::Error;

use super::{ActionSet, BasicMdp, MdpError, Model, Policy, StateSet, GOAL, UNSAFE};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueMode {
    Min,
    Max,
    Policy,
}

/// Which property a value vector measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecKind {
    /// Eventually reach the target set.
    Reach,
    /// Always avoid the unsafe set.
    Safety,
    /// Avoid the unsafe set until the goal set is reached.
    ReachAvoid,
}

/// The satisfaction objective a shield protects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    #[default]
    Safety,
    ReachAvoid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Stop once the largest per-state change of a sweep, and the distance
    /// to the fixed point estimated from the contraction rate, are both
    /// below this.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: DEFAULT_TOL, max_iterations: DEFAULT_MAX_ITERATIONS }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("iteration limit reached after {iterations} sweeps (residual {residual:e})")]
    IterationLimit { iterations: usize, residual: f64 },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("a policy is required exactly when the mode is 'policy'")]
    PolicyMismatch,
    #[error("expected a {expected:?}-mode table, got {got:?}")]
    WrongMode { expected: ValueMode, got: ValueMode },
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Per-state probabilities of satisfying a property.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueVector {
    pub values: Vec<f64>,
    pub mode: ValueMode,
    pub spec: SpecKind,
    /// Sweeps performed before the stopping rule fired.
    pub iterations: usize,
    /// Largest per-state change of the final sweep.
    pub residual: f64,
}

impl ValueVector {
    pub fn get(&self, s: usize) -> f64 {
        self.values[s]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy)]
enum Reduce<'a> {
    Min,
    Max,
    Policy(&'a Policy),
}

impl<'a> Reduce<'a> {
    fn new(mode: ValueMode, policy: Option<&'a Policy>) -> Result<Self, SolveError> {
        match (mode, policy) {
            (ValueMode::Min, None) => Ok(Reduce::Min),
            (ValueMode::Max, None) => Ok(Reduce::Max),
            (ValueMode::Policy, Some(p)) => Ok(Reduce::Policy(p)),
            _ => Err(SolveError::PolicyMismatch),
        }
    }

    /// Entries per state of the backup buffer.
    fn width(self, action_count: usize) -> usize {
        match self {
            Reduce::Policy(_) => 1,
            _ => action_count,
        }
    }

    fn backup<M: Model + ?Sized>(self, model: &M, values: &[f64], out: &mut [f64]) {
        match self {
            Reduce::Policy(p) => model.policy_expectations(values, p, out),
            _ => model.expectations(values, out),
        }
    }

    #[inline]
    fn value(self, q: &[f64], na: usize, allowed: ActionSet, s: usize) -> f64 {
        let row = |a: usize| q[s * na + a];
        match self {
            Reduce::Min => allowed.iter().map(row).fold(f64::INFINITY, f64::min),
            Reduce::Max => allowed.iter().map(row).fold(f64::NEG_INFINITY, f64::max),
            Reduce::Policy(_) => q[s],
        }
    }
}

/// Probability of eventually reaching `target`, per state.
///
/// States that cannot reach the target are fixed at 0 by a graph pre-pass
/// before iterating: for max and policy mode these are the states with no
/// path to the target, for min mode the states from which some strategy
/// avoids the target forever.
pub fn compute_reach_values<M: Model + ?Sized>(
    model: &M,
    target: &StateSet,
    mode: ValueMode,
    policy: Option<&Policy>,
    opts: &SolveOptions,
) -> Result<ValueVector, SolveError> {
    let reduce = Reduce::new(mode, policy)?;
    let (values, iterations, residual) = reach_fixpoint(model, target, reduce, opts, None, None)?.expect("no stop rule");
    Ok(ValueVector { values, mode, spec: SpecKind::Reach, iterations, residual })
}

/// Like [`compute_reach_values`], starting from `start` instead of zero.
///
/// For max mode the start must be a lower bound with `start <= B(start)`
/// for the result to be the least fixed point.
pub fn compute_reach_values_from<M: Model + ?Sized>(
    model: &M,
    target: &StateSet,
    mode: ValueMode,
    policy: Option<&Policy>,
    opts: &SolveOptions,
    start: &[f64],
) -> Result<ValueVector, SolveError> {
    let reduce = Reduce::new(mode, policy)?;
    let (values, iterations, residual) =
        reach_fixpoint(model, target, reduce, opts, Some(start), None)?.expect("no stop rule");
    Ok(ValueVector { values, mode, spec: SpecKind::Reach, iterations, residual })
}

/// Reach iteration from zero that gives up as soon as `stop` holds for an
/// iterate. Iterates from zero are lower bounds that increase towards the
/// fixed point, so `stop` may test whether the answer is already known to
/// exceed some level. Returns `None` when stopped early.
pub fn compute_reach_values_until<M: Model + ?Sized>(
    model: &M,
    target: &StateSet,
    mode: ValueMode,
    policy: Option<&Policy>,
    opts: &SolveOptions,
    stop: &dyn Fn(&[f64]) -> bool,
) -> Result<Option<ValueVector>, SolveError> {
    let reduce = Reduce::new(mode, policy)?;
    Ok(reach_fixpoint(model, target, reduce, opts, None, Some(stop))?.map(|(values, iterations, residual)| {
        ValueVector { values, mode, spec: SpecKind::Reach, iterations, residual }
    }))
}

fn reach_fixpoint<M: Model + ?Sized>(
    model: &M,
    target: &StateSet,
    reduce: Reduce<'_>,
    opts: &SolveOptions,
    start: Option<&[f64]>,
    stop: Option<&dyn Fn(&[f64]) -> bool>,
) -> Result<Option<(Vec<f64>, usize, f64)>, SolveError> {
    if !(opts.tol > 0.0) {
        return Err(SolveError::BadTolerance(opts.tol));
    }
    let n = model.state_count();
    let na = model.action_count();
    if target.is_empty() {
        return Ok(Some((vec![0.0; n], 0, 0.0)));
    }
    let zero = zero_states(model, target, reduce);
    let fixed: Vec<bool> = (0..n).map(|s| target.contains(s) || zero[s]).collect();

    let mut values = match start {
        Some(v) => v.to_vec(),
        None => vec![0.0; n],
    };
    for s in 0..n {
        if target.contains(s) {
            values[s] = 1.0;
        } else if zero[s] {
            values[s] = 0.0;
        }
    }
    let mut next = values.clone();
    let mut q = vec![0.0; n * reduce.width(na)];
    let mut iterations = 0;
    let mut history = [f64::INFINITY; 3];
    loop {
        reduce.backup(model, &values, &mut q);
        let mut residual: f64 = 0.0;
        for s in 0..n {
            if fixed[s] {
                continue;
            }
            let v = reduce.value(&q, na, model.allowed(s), s);
            residual = residual.max((v - values[s]).abs());
            next[s] = v;
        }
        std::mem::swap(&mut values, &mut next);
        iterations += 1;
        if residual < opts.tol && error_estimate(residual, history) < 0.5 * opts.tol {
            return Ok(Some((values, iterations, residual)));
        }
        history = [residual, history[0], history[1]];
        if stop.is_some_and(|f| f(&values)) {
            return Ok(None);
        }
        if iterations >= opts.max_iterations {
            return Err(SolveError::IterationLimit { iterations, residual });
        }
    }
}

/// Distance to the fixed point implied by the recent contraction rate:
/// a sweep contracting by `rho` leaves at most `residual * rho / (1 - rho)`.
/// The rate is the slowest over the last three sweeps, which guards
/// against residuals that alternate or change regime.
fn error_estimate(residual: f64, history: [f64; 3]) -> f64 {
    if residual == 0.0 {
        return 0.0;
    }
    let rho = (residual / history[0])
        .max(history[0] / history[1])
        .max(history[1] / history[2])
        .max((residual / history[1]).sqrt());
    if rho >= 1.0 || rho.is_nan() {
        return f64::INFINITY;
    }
    residual * rho / (1.0 - rho)
}

/// States whose reach value is exactly zero, from graph structure alone.
fn zero_states<M: Model + ?Sized>(model: &M, target: &StateSet, reduce: Reduce<'_>) -> Vec<bool> {
    let n = model.state_count();
    let na = model.action_count();
    match reduce {
        Reduce::Min => {
            let mut q = vec![0.0; n * na];
            // Greatest set Z outside the target where some action keeps all
            // successors inside Z. `outside[s] = 1` marks s not in Z.
            let mut outside: Vec<f64> =
                (0..n).map(|s| if target.contains(s) { 1.0 } else { 0.0 }).collect();
            loop {
                model.expectations(&outside, &mut q);
                let mut changed = false;
                for s in 0..n {
                    if outside[s] == 1.0 {
                        continue;
                    }
                    let row = &q[s * na..(s + 1) * na];
                    if !model.allowed(s).iter().any(|a| row[a] == 0.0) {
                        outside[s] = 1.0;
                        changed = true;
                    }
                }
                if !changed {
                    return outside.iter().map(|x| *x == 0.0).collect();
                }
            }
        }
        Reduce::Max | Reduce::Policy(_) => {
            let mut reach: Vec<f64> =
                (0..n).map(|s| if target.contains(s) { 1.0 } else { 0.0 }).collect();
            let mut q = vec![0.0; n * reduce.width(na)];
            loop {
                reduce.backup(model, &reach, &mut q);
                let mut changed = false;
                for s in 0..n {
                    if reach[s] == 1.0 {
                        continue;
                    }
                    let positive = match reduce {
                        Reduce::Policy(_) => q[s] > 0.0,
                        _ => model.allowed(s).iter().any(|a| q[s * na + a] > 0.0),
                    };
                    if positive {
                        reach[s] = 1.0;
                        changed = true;
                    }
                }
                if !changed {
                    return reach.iter().map(|x| *x == 0.0).collect();
                }
            }
        }
    }
}

/// States with no path to `target` under any available action.
pub fn cannot_reach<M: Model + ?Sized>(model: &M, target: &StateSet) -> StateSet {
    let zero = zero_states(model, target, Reduce::Max);
    StateSet::from_fn(zero.len(), |s| zero[s])
}

fn dual(mode: ValueMode) -> ValueMode {
    match mode {
        ValueMode::Min => ValueMode::Max,
        ValueMode::Max => ValueMode::Min,
        ValueMode::Policy => ValueMode::Policy,
    }
}

/// Probability of never visiting the `unsafe` label, per state.
pub fn compute_safety_values<M: Model + ?Sized>(
    model: &M,
    mode: ValueMode,
    policy: Option<&Policy>,
    opts: &SolveOptions,
) -> Result<ValueVector, SolveError> {
    let unsafe_set = model
        .label(UNSAFE)
        .ok_or_else(|| MdpError::MissingLabel(UNSAFE.into()))?;
    let reach = compute_reach_values(model, unsafe_set, dual(mode), policy, opts)?;
    Ok(ValueVector {
        values: reach.values.iter().map(|r| (1.0 - r).max(0.0)).collect(),
        mode,
        spec: SpecKind::Safety,
        iterations: reach.iterations,
        residual: reach.residual,
    })
}

/// Satisfaction probabilities of `objective`, per state.
pub fn satisfaction_values<M: Model + ?Sized>(
    model: &M,
    objective: Objective,
    mode: ValueMode,
    policy: Option<&Policy>,
    opts: &SolveOptions,
) -> Result<ValueVector, SolveError> {
    match objective {
        Objective::Safety => compute_safety_values(model, mode, policy, opts),
        Objective::ReachAvoid => {
            let (wrapped, goal) = Absorbing::reach_avoid(model)?;
            let mut v = compute_reach_values(&wrapped, &goal, mode, policy, opts)?;
            v.spec = SpecKind::ReachAvoid;
            Ok(v)
        }
    }
}

/// Wraps a model so that a set of states becomes absorbing under every
/// available action.
pub struct Absorbing<'a, M: Model + ?Sized> {
    inner: &'a M,
    absorbing: StateSet,
}

impl<'a, M: Model + ?Sized> Absorbing<'a, M> {
    pub fn new(inner: &'a M, absorbing: StateSet) -> Self {
        Absorbing { inner, absorbing }
    }

    /// Goal and unsafe states made absorbing, plus the goal as target.
    pub fn reach_avoid(inner: &'a M) -> Result<(Self, StateSet), MdpError> {
        let unsafe_set = inner.label(UNSAFE).ok_or_else(|| MdpError::MissingLabel(UNSAFE.into()))?;
        let goal = inner.label(GOAL).ok_or_else(|| MdpError::MissingLabel(GOAL.into()))?;
        if let Some(s) = unsafe_set.iter().find(|s| goal.contains(*s)) {
            return Err(MdpError::InconsistentLabels(s));
        }
        let absorbing = unsafe_set.union(goal);
        Ok((Absorbing { inner, absorbing }, goal.clone()))
    }
}

impl<M: Model + ?Sized> Model for Absorbing<'_, M> {
    fn state_count(&self) -> usize {
        self.inner.state_count()
    }
    fn action_count(&self) -> usize {
        self.inner.action_count()
    }
    fn allowed(&self, s: usize) -> ActionSet {
        self.inner.allowed(s)
    }
    fn expectations(&self, values: &[f64], out: &mut [f64]) {
        self.inner.expectations(values, out);
        let na = self.action_count();
        for s in self.absorbing.iter() {
            for a in self.inner.allowed(s).iter() {
                out[s * na + a] = values[s];
            }
        }
    }
    fn policy_expectations(&self, values: &[f64], policy: &Policy, out: &mut [f64]) {
        self.inner.policy_expectations(values, policy, out);
        for s in self.absorbing.iter() {
            out[s] = values[s];
        }
    }
    fn successors(&self, s: usize, a: usize) -> Vec<(usize, f64)> {
        if self.absorbing.contains(s) {
            vec![(s, 1.0)]
        } else {
            self.inner.successors(s, a)
        }
    }
    fn init(&self) -> &[(usize, f64)] {
        self.inner.init()
    }
    fn label(&self, name: &str) -> Option<&StateSet> {
        self.inner.label(name)
    }
}

/// Rewrites an MDP so that max-reach of the returned target equals the max
/// probability of `not unsafe U goal` on the original: goal and unsafe
/// states keep a single self-loop action (their lowest available one).
pub fn cast_reach_avoid(
    mdp: &BasicMdp,
    unsafe_set: &StateSet,
    goal: &StateSet,
) -> Result<(BasicMdp, StateSet), MdpError> {
    if let Some(s) = unsafe_set.iter().find(|s| goal.contains(*s)) {
        return Err(MdpError::InconsistentLabels(s));
    }
    let mut rows = Vec::new();
    for s in 0..mdp.state_count() {
        if unsafe_set.contains(s) || goal.contains(s) {
            let a = mdp.allowed(s).first().unwrap_or(0);
            rows.push(((s, a), vec![(s, 1.0)]));
        } else {
            for a in mdp.allowed(s).iter() {
                rows.push(((s, a), mdp.row(s, a).collect()));
            }
        }
    }
    let cast = BasicMdp::from_rows(
        mdp.state_count(),
        mdp.action_count(),
        rows,
        mdp.init().to_vec(),
        mdp.labels().clone(),
    )?;
    Ok((cast, goal.clone()))
}

/// Per state-action satisfaction probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    q: Vec<f64>,
    action_count: usize,
    allowed: Vec<ActionSet>,
    pub mode: ValueMode,
}

impl QTable {
    pub fn state_count(&self) -> usize {
        self.allowed.len()
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn allowed(&self, s: usize) -> ActionSet {
        self.allowed[s]
    }

    /// `None` when `a` is not available in `s`.
    pub fn get(&self, s: usize, a: usize) -> Option<f64> {
        self.allowed[s].contains(a).then(|| self.q[s * self.action_count + a])
    }

    pub fn row(&self, s: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.allowed[s].iter().map(move |a| (a, self.q[s * self.action_count + a]))
    }

    /// Highest-valued action, lowest index on ties.
    pub fn argmax(&self, s: usize) -> usize {
        self.argmax_in(s, self.allowed[s])
    }

    /// Highest-valued action within `among`, lowest index on ties.
    pub fn argmax_in(&self, s: usize, among: ActionSet) -> usize {
        let mut best = None;
        for a in among.iter() {
            let v = self.q[s * self.action_count + a];
            match best {
                Some((_, bv)) if v <= bv => {}
                _ => best = Some((a, v)),
            }
        }
        best.expect("argmax over an empty action set").0
    }

    pub fn max(&self, s: usize) -> f64 {
        self.row(s).map(|(_, v)| v).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `Q(s,a) = sum_{s'} P(s'|s,a) V(s')` for every available action.
///
/// Safety tables are evaluated through the complement (`1 - E[1 - V]`) so
/// that states with exactly zero risk keep an exact 1.
pub fn compute_q<M: Model + ?Sized>(model: &M, values: &ValueVector) -> QTable {
    let n = model.state_count();
    let na = model.action_count();
    let mut q = vec![f64::NAN; n * na];
    let allowed: Vec<ActionSet> = (0..n).map(|s| model.allowed(s)).collect();
    if values.spec == SpecKind::Safety {
        let risk: Vec<f64> = values.values.iter().map(|v| 1.0 - v).collect();
        model.expectations(&risk, &mut q);
        for s in 0..n {
            for a in allowed[s].iter() {
                q[s * na + a] = (1.0 - q[s * na + a]).clamp(0.0, 1.0);
            }
        }
    } else {
        model.expectations(&values.values, &mut q);
        for s in 0..n {
            for a in allowed[s].iter() {
                q[s * na + a] = q[s * na + a].clamp(0.0, 1.0);
            }
        }
    }
    for s in 0..n {
        for a in 0..na {
            if !allowed[s].contains(a) {
                q[s * na + a] = f64::NAN;
            }
        }
    }
    QTable { q, action_count: na, allowed, mode: values.mode }
}

/// Per state, the action maximizing `Q^max` (lowest index on ties).
pub fn optimally_safe_policy<M: Model + ?Sized>(
    model: &M,
    qmax: &QTable,
) -> Result<Policy, SolveError> {
    if qmax.mode != ValueMode::Max {
        return Err(SolveError::WrongMode { expected: ValueMode::Max, got: qmax.mode });
    }
    let actions = (0..model.state_count()).map(|s| qmax.argmax(s)).collect();
    Ok(Policy::new(model, actions)?)
}

/// Expectation of `values` under an initial distribution.
pub fn expected_initial_value(values: &[f64], init: &[(usize, f64)]) -> f64 {
    init.iter().map(|&(s, p)| p * values[s]).sum::<f64>().clamp(0.0, 1.0)
}
