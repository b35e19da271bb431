//! The two evaluation environments: an 8x8 gridworld with a randomly moving
//! obstacle, and a discretized car-following scenario.
//!
//! Each builder returns an [`Env`]: the validated [`BasicMdp`] plus the
//! metadata the simulator and teleop service need (safe action, action
//! metric, horizon, delay-unaware controller).

pub mod car_following;
pub mod gridworld;

use std::fmt;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::mdp_digest;
use crate::mdp::{ActionSet, BasicMdp, MdpError, Objective, Policy, GOAL, UNSAFE};

pub use car_following::{build_car_following, CarFollowConfig};
pub use gridworld::{build_gridworld, GridworldConfig};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
}

/// Pairwise distances between actions, used to pick the allowed action
/// nearest to a rejected request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMetric {
    distances: Vec<Vec<f64>>,
}

impl ActionMetric {
    pub fn new(distances: Vec<Vec<f64>>) -> Self {
        ActionMetric { distances }
    }

    /// Metric induced by a per-action feature vector and the L1 norm.
    pub fn from_features(features: &[Vec<f64>]) -> Self {
        let distances = features
            .iter()
            .map(|a| {
                features
                    .iter()
                    .map(|b| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
                    .collect()
            })
            .collect();
        ActionMetric { distances }
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.distances[a][b]
    }

    /// Member of `among` closest to `request`, lowest index on ties.
    pub fn nearest(&self, request: usize, among: ActionSet) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for a in among.iter() {
            let d = self.distances[request][a];
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((a, d));
            }
        }
        best.map(|(a, _)| a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Gridworld,
    CarFollowing,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Gridworld => "gridworld",
            EnvKind::CarFollowing => "car-following",
        })
    }
}

impl std::str::FromStr for EnvKind {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gridworld" => Ok(EnvKind::Gridworld),
            "car-following" => Ok(EnvKind::CarFollowing),
            other => Err(EnvError::Config(format!("unknown env '{other}'"))),
        }
    }
}

/// Human-readable decoding of a base state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateView {
    Grid { robot: (usize, usize), obstacle: (usize, usize), goal_reached: bool },
    Car { distance: f64, relative_velocity: f64 },
}

/// Everything besides the MDP that describes an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub kind: EnvKind,
    pub action_names: Vec<String>,
    pub safe_action: usize,
    pub metric: ActionMetric,
    /// Episode length in decision steps.
    pub horizon: usize,
    pub objective: Objective,
    /// Delay-unaware controller: one action per base state.
    pub controller: Vec<usize>,
    pub mdp_digest: String,
    pub gridworld: Option<GridworldConfig>,
    pub car_following: Option<CarFollowConfig>,
}

#[derive(Debug, Clone)]
pub struct Env {
    pub mdp: BasicMdp,
    pub meta: EnvMeta,
}

impl Env {
    pub fn kind(&self) -> EnvKind {
        self.meta.kind
    }

    pub fn controller(&self) -> Policy {
        Policy::new(&self.mdp, self.meta.controller.clone()).expect("controller validated at build")
    }

    pub fn is_unsafe(&self, s: usize) -> bool {
        self.mdp.label(UNSAFE).is_some_and(|l| l.contains(s))
    }

    pub fn is_goal(&self, s: usize) -> bool {
        self.mdp.label(GOAL).is_some_and(|l| l.contains(s))
    }

    pub fn view(&self, s: usize) -> StateView {
        match (&self.meta.gridworld, &self.meta.car_following) {
            (Some(g), _) => g.view(s),
            (_, Some(c)) => c.view(s),
            _ => unreachable!("metadata carries its configuration"),
        }
    }

    /// Distance between the two agents in state `s` (Manhattan cells for the
    /// gridworld, meters for car-following).
    pub fn separation(&self, s: usize) -> f64 {
        match self.view(s) {
            StateView::Grid { robot, obstacle, .. } => {
                (robot.0.abs_diff(obstacle.0) + robot.1.abs_diff(obstacle.1)) as f64
            }
            StateView::Car { distance, .. } => distance,
        }
    }

    /// Rebuilds an environment from its kind and stored configuration.
    pub fn build(kind: EnvKind) -> Result<Env, EnvError> {
        match kind {
            EnvKind::Gridworld => build_gridworld(&GridworldConfig::default()),
            EnvKind::CarFollowing => build_car_following(&CarFollowConfig::default()),
        }
    }

    pub fn from_meta(meta: &EnvMeta) -> Result<Env, EnvError> {
        let env = match (&meta.gridworld, &meta.car_following) {
            (Some(g), _) => build_gridworld(g)?,
            (_, Some(c)) => build_car_following(c)?,
            _ => return Err(EnvError::Config("metadata has no configuration".into())),
        };
        Ok(env)
    }

    pub fn write_meta(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn read_meta(path: &Path) -> Result<EnvMeta, EnvError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub(crate) fn finish_meta(mdp: &BasicMdp, mut meta: EnvMeta) -> Result<Env, EnvError> {
    mdp.validate().into_result()?;
    Policy::new(mdp, meta.controller.clone())?;
    meta.mdp_digest = mdp_digest(mdp);
    Ok(Env { mdp: mdp.clone(), meta })
}

/// Cost-minimizing stationary policy by value iteration.
///
/// `terminal(s)` fixes the cost-to-go of absorbing states (their action is
/// `idle`); every other state pays `step_cost(s')` on entering `s'`, with
/// future costs discounted by `gamma`.
pub(crate) fn min_cost_policy(
    mdp: &BasicMdp,
    step_cost: impl Fn(usize) -> f64,
    terminal: impl Fn(usize) -> Option<f64>,
    gamma: f64,
    idle: usize,
    tol: f64,
) -> Vec<usize> {
    let n = mdp.state_count();
    let mut j: Vec<f64> = (0..n).map(|s| terminal(s).unwrap_or(0.0)).collect();
    let entry: Vec<f64> = (0..n).map(&step_cost).collect();
    let best = |j: &[f64], s: usize| -> (usize, f64) {
        let mut out = (usize::MAX, f64::INFINITY);
        for a in mdp.allowed(s).iter() {
            let q: f64 = mdp.row(s, a).map(|(t, p)| p * (entry[t] + gamma * j[t])).sum();
            if q < out.1 {
                out = (a, q);
            }
        }
        out
    };
    loop {
        let mut next = j.clone();
        let mut change: f64 = 0.0;
        for s in 0..n {
            if terminal(s).is_some() {
                continue;
            }
            let (_, v) = best(&j, s);
            change = change.max((v - j[s]).abs());
            next[s] = v;
        }
        j = next;
        if change < tol {
            break;
        }
    }
    (0..n).map(|s| if terminal(s).is_some() { idle } else { best(&j, s).0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_prefers_closest_then_lowest() {
        let m = ActionMetric::from_features(&[vec![-1.0], vec![-0.5], vec![0.0], vec![0.5], vec![1.0]]);
        let allowed: ActionSet = [0, 4].into_iter().collect();
        assert_eq!(m.nearest(1, allowed), Some(0));
        assert_eq!(m.nearest(3, allowed), Some(4));
        // equidistant: lowest index
        assert_eq!(m.nearest(2, allowed), Some(0));
        assert_eq!(m.nearest(2, ActionSet::empty()), None);
    }

    #[test]
    fn env_kind_parses() {
        assert_eq!("gridworld".parse::<EnvKind>().unwrap(), EnvKind::Gridworld);
        assert_eq!("car-following".parse::<EnvKind>().unwrap().to_string(), "car-following");
        assert!("maze".parse::<EnvKind>().is_err());
    }
}
