//! Choosing ε: the smallest grid value whose shield meets a safety target.

use serde::{Deserialize, Serialize};

use super::{build_shield, shield_set, Fallback, Shield, ShieldError};
use crate::envs::ActionMetric;
use crate::mdp::solve::{compute_reach_values, compute_reach_values_from, compute_reach_values_until};
use crate::mdp::{
    compute_q, compute_safety_values, expected_initial_value, ActionSet, MdpError, Model, Policy,
    QTable, Restricted, SolveOptions, StateSet, ValueMode, ValueVector, UNSAFE,
};

pub const DEFAULT_ETA: f64 = 0.01;

/// Resolution of the optional bisection refinement.
const REFINE_RESOLUTION: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthesisMode {
    /// Check the safety of the shielded controller.
    WithPolicy,
    /// Check the worst case over every controller the shield admits.
    PolicyFree,
}

impl std::fmt::Display for SynthesisMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthesisMode::WithPolicy => "with-policy",
            SynthesisMode::PolicyFree => "policy-free",
        })
    }
}

impl std::str::FromStr for SynthesisMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "with-policy" => Ok(SynthesisMode::WithPolicy),
            "policy-free" => Ok(SynthesisMode::PolicyFree),
            other => Err(format!("unknown synthesis mode '{other}'")),
        }
    }
}

/// How the shielded controller replaces rejected actions during with-policy
/// evaluation.
#[derive(Debug, Clone, Default)]
pub enum FallbackChoice {
    #[default]
    Safest,
    Nearest(ActionMetric),
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub eta: f64,
    pub fallback: FallbackChoice,
    /// Bisect between the first passing grid point and its predecessor.
    pub refine: bool,
    pub solve: SolveOptions,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            eta: DEFAULT_ETA,
            fallback: FallbackChoice::Safest,
            refine: false,
            solve: SolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    /// Certified safety at this ε. For with-policy points rejected before
    /// the solve converged this is an upper bound already below target.
    pub achieved: f64,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub epsilon_star: f64,
    pub shield: Shield,
    /// Expected initial safety certified for the returned shield.
    pub achieved: f64,
    /// Expected initial maximal safety, the best any shield can certify.
    pub bound: f64,
    pub sweep_log: Vec<SweepPoint>,
    pub vmax: ValueVector,
    pub qmax: QTable,
}

/// The ε grid `0, η, 2η, …` closed with 1.
pub fn epsilon_grid(eta: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut i = 0u64;
    loop {
        let e = i as f64 * eta;
        if e >= 1.0 - 1e-12 {
            break;
        }
        grid.push(e);
        i += 1;
    }
    grid.push(1.0);
    grid
}

/// Finds the smallest ε on the grid whose shield certifies `delta`.
///
/// In with-policy mode the shielded controller is evaluated exactly; in
/// policy-free mode the certificate is the minimal safety over every
/// controller that respects the shield.
pub fn synthesize<M: Model + ?Sized>(
    model: &M,
    policy: Option<&Policy>,
    delta: f64,
    mode: SynthesisMode,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, ShieldError> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(ShieldError::BadDelta(delta));
    }
    if !(opts.eta > 0.0 && opts.eta <= 1.0) {
        return Err(ShieldError::BadEta(opts.eta));
    }
    match (mode, policy) {
        (SynthesisMode::WithPolicy, Some(p)) if p.len() == model.state_count() => {}
        (SynthesisMode::PolicyFree, None) => {}
        _ => return Err(ShieldError::PolicyMismatch),
    }
    let vmax = compute_safety_values(model, ValueMode::Max, None, &opts.solve)?;
    let qmax = compute_q(model, &vmax);
    let bound = expected_initial_value(&vmax.values, model.init());
    if delta > bound + 1e-9 {
        return Err(ShieldError::Infeasible { delta, bound });
    }
    let ctx = Ctx { model, policy, vmax: &vmax, qmax: &qmax, opts, slack: 2.0 * opts.solve.tol };
    let grid = epsilon_grid(opts.eta);
    let (mut log, pass) = match mode {
        SynthesisMode::WithPolicy => ctx.sweep_with_policy(&grid, delta)?,
        SynthesisMode::PolicyFree => ctx.sweep_policy_free(&grid, delta)?,
    };
    let idx = pass.ok_or(ShieldError::Infeasible { delta, bound })?;
    let (mut epsilon_star, mut achieved) = (log[idx].epsilon, log[idx].achieved);
    if opts.refine && idx > 0 {
        let lo = log[idx - 1].epsilon;
        (epsilon_star, achieved) = ctx.refine(mode, lo, epsilon_star, achieved, delta, &mut log)?;
    }
    let mut shield = build_shield(model, &vmax, &qmax, epsilon_star)?;
    shield.delta = Some(delta);
    shield.mode = Some(mode);
    shield.achieved = Some(achieved);
    Ok(SynthesisResult { epsilon_star, shield, achieved, bound, sweep_log: log, vmax, qmax })
}

struct Ctx<'a, M: Model + ?Sized> {
    model: &'a M,
    policy: Option<&'a Policy>,
    vmax: &'a ValueVector,
    qmax: &'a QTable,
    opts: &'a SynthesisOptions,
    slack: f64,
}

impl<M: Model + ?Sized> Ctx<'_, M> {
    fn sets(&self, epsilon: f64) -> Vec<ActionSet> {
        (0..self.model.state_count()).map(|s| shield_set(self.vmax, self.qmax, s, epsilon)).collect()
    }

    fn passes(&self, epsilon: f64, achieved: f64, delta: f64) -> bool {
        let slack = if epsilon >= 1.0 { self.slack } else { 0.0 };
        achieved + slack >= delta
    }

    /// Actions the controller executes through a shield with these sets.
    fn filtered(&self, sets: &[ActionSet]) -> Result<Vec<usize>, ShieldError> {
        let policy = self.policy.ok_or(ShieldError::PolicyMismatch)?;
        let shield = Shield::from_sets(0.0, self.model.action_count(), sets.to_vec());
        let fallback = match &self.opts.fallback {
            FallbackChoice::Safest => Fallback::Safest(self.qmax),
            FallbackChoice::Nearest(m) => Fallback::Nearest(m),
        };
        Ok((0..self.model.state_count()).map(|s| shield.filter(s, policy.action(s), fallback).0).collect())
    }

    /// Reach probability of the unsafe set under fixed actions.
    fn policy_risk(&self, actions: Vec<usize>) -> Result<Vec<f64>, ShieldError> {
        let policy = Policy::new(self.model, actions).map_err(crate::mdp::SolveError::from)?;
        let r = compute_reach_values(self.model, self.unsafe_set()?, ValueMode::Policy, Some(&policy), &self.opts.solve)?;
        Ok(r.values)
    }

    /// Like `policy_risk`, but abandons the solve once the iterates prove
    /// the point fails; the returned safety is then only an upper bound.
    fn policy_risk_or_reject(
        &self,
        actions: &[usize],
        epsilon: f64,
        delta: f64,
    ) -> Result<(f64, Option<Vec<f64>>), ShieldError> {
        let policy = Policy::new(self.model, actions.to_vec()).map_err(crate::mdp::SolveError::from)?;
        let bound = std::cell::Cell::new(1.0);
        let stop = |risk: &[f64]| {
            let upper = self.certified(risk);
            bound.set(upper);
            !self.passes(epsilon, upper, delta)
        };
        let unsafe_set = self.unsafe_set()?;
        match compute_reach_values_until(self.model, unsafe_set, ValueMode::Policy, Some(&policy), &self.opts.solve, &stop)? {
            Some(r) => Ok((self.certified(&r.values), Some(r.values))),
            None => Ok((bound.get(), None)),
        }
    }

    fn unsafe_set(&self) -> Result<&StateSet, ShieldError> {
        Ok(self
            .model
            .label(UNSAFE)
            .ok_or_else(|| MdpError::MissingLabel(UNSAFE.into()))
            .map_err(crate::mdp::SolveError::from)?)
    }

    /// Max-reach of the unsafe set under the restricted model, optionally
    /// warm-started from a lower bound.
    fn restricted_risk(&self, sets: &[ActionSet], start: Option<&[f64]>) -> Result<Vec<f64>, ShieldError> {
        let restricted = Restricted::new(self.model, sets);
        let unsafe_set = self.unsafe_set()?;
        let zero;
        let start = match start {
            Some(s) => s,
            None => {
                zero = vec![0.0; self.model.state_count()];
                &zero
            }
        };
        let r = compute_reach_values_from(&restricted, unsafe_set, ValueMode::Max, None, &self.opts.solve, start)?;
        Ok(r.values)
    }

    fn certified(&self, risk: &[f64]) -> f64 {
        let safety: Vec<f64> = risk.iter().map(|r| 1.0 - r).collect();
        expected_initial_value(&safety, self.model.init())
    }

    fn sweep_with_policy(&self, grid: &[f64], delta: f64) -> Result<(Vec<SweepPoint>, Option<usize>), ShieldError> {
        let mut log = Vec::new();
        let mut previous: Option<(Vec<usize>, f64, Option<Vec<f64>>)> = None;
        for &epsilon in grid {
            let actions = self.filtered(&self.sets(epsilon))?;
            let (achieved, risk) = match previous {
                Some((p, achieved, r)) if p == actions => (achieved, r),
                _ => self.policy_risk_or_reject(&actions, epsilon, delta)?,
            };
            log.push(SweepPoint { epsilon, achieved });
            if risk.is_some() && self.passes(epsilon, achieved, delta) {
                let idx = log.len() - 1;
                return Ok((log, Some(idx)));
            }
            previous = Some((actions, achieved, risk));
        }
        Ok((log, None))
    }

    /// Evaluates the whole grid from ε = 1 down, each solve warm-started
    /// from the previous one, then picks the first passing point ascending.
    fn sweep_policy_free(&self, grid: &[f64], delta: f64) -> Result<(Vec<SweepPoint>, Option<usize>), ShieldError> {
        let mut achieved = vec![0.0; grid.len()];
        let mut previous: Option<(Vec<ActionSet>, Vec<f64>)> = None;
        for (i, &epsilon) in grid.iter().enumerate().rev() {
            let sets = self.sets(epsilon);
            let risk = match previous {
                Some((p, r)) if p == sets => r,
                Some((_, r)) => self.restricted_risk(&sets, Some(&r))?,
                None => self.restricted_risk(&sets, None)?,
            };
            achieved[i] = self.certified(&risk);
            previous = Some((sets, risk));
        }
        let log: Vec<SweepPoint> =
            grid.iter().zip(&achieved).map(|(&epsilon, &achieved)| SweepPoint { epsilon, achieved }).collect();
        let pass = log.iter().position(|p| self.passes(p.epsilon, p.achieved, delta));
        Ok((log, pass))
    }

    fn evaluate(&self, mode: SynthesisMode, epsilon: f64) -> Result<f64, ShieldError> {
        let sets = self.sets(epsilon);
        match mode {
            SynthesisMode::WithPolicy => Ok(self.certified(&self.policy_risk(self.filtered(&sets)?)?)),
            SynthesisMode::PolicyFree => Ok(self.certified(&self.restricted_risk(&sets, None)?)),
        }
    }

    /// Bisects `(lo, hi]` for a smaller passing ε, keeping `hi` passing.
    fn refine(
        &self,
        mode: SynthesisMode,
        mut lo: f64,
        mut hi: f64,
        mut achieved: f64,
        delta: f64,
        log: &mut Vec<SweepPoint>,
    ) -> Result<(f64, f64), ShieldError> {
        while hi - lo > REFINE_RESOLUTION {
            let mid = 0.5 * (lo + hi);
            let v = self.evaluate(mode, mid)?;
            log.push(SweepPoint { epsilon: mid, achieved: v });
            if self.passes(mid, v, delta) {
                hi = mid;
                achieved = v;
            } else {
                lo = mid;
            }
        }
        Ok((hi, achieved))
    }
}
