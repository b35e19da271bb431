//! Gridworld: a robot moves toward a goal cell while an obstacle performs a
//! random walk. State = (robot cell, obstacle cell, goal-reached flag).

use serde::{Deserialize, Serialize};

use super::{finish_meta, min_cost_policy, ActionMetric, Env, EnvError, EnvKind, EnvMeta, StateView};
use crate::mdp::{MdpBuilder, Objective, GOAL, UNSAFE};

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const STAY: usize = 4;

pub const ACTION_NAMES: [&str; 5] = ["up", "down", "left", "right", "stay"];

/// Cell displacement `(dx, dy)` of each move; "up" decreases the row.
pub const MOVES: [(i64, i64); 5] = [(0, -1), (0, 1), (-1, 0), (1, 0), (0, 0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridworldConfig {
    pub width: usize,
    pub height: usize,
    /// Cells are `(column, row)`.
    pub robot_start: (usize, usize),
    pub goal: (usize, usize),
    pub obstacle_start: (usize, usize),
    pub horizon: usize,
    /// Probability of each obstacle move, indexed like the robot actions.
    pub obstacle_policy: [f64; 5],
    /// Terminal cost of a collision for the task controller, in steps.
    pub collision_cost: f64,
}

impl Default for GridworldConfig {
    fn default() -> Self {
        GridworldConfig {
            width: 8,
            height: 8,
            robot_start: (0, 0),
            goal: (7, 7),
            obstacle_start: (4, 4),
            horizon: 50,
            obstacle_policy: [0.2; 5],
            collision_cost: 10.0,
        }
    }
}

impl GridworldConfig {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell(&self, (x, y): (usize, usize)) -> usize {
        y * self.width + x
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }

    pub fn state(&self, robot: (usize, usize), obstacle: (usize, usize), goal_reached: bool) -> usize {
        let c = self.cells();
        (goal_reached as usize) * c * c + self.cell(robot) * c + self.cell(obstacle)
    }

    /// Inverse of [`GridworldConfig::state`].
    pub fn decode(&self, s: usize) -> ((usize, usize), (usize, usize), bool) {
        let c = self.cells();
        let flag = s >= c * c;
        let rest = s % (c * c);
        (self.coords(rest / c), self.coords(rest % c), flag)
    }

    pub fn view(&self, s: usize) -> StateView {
        let (robot, obstacle, goal_reached) = self.decode(s);
        StateView::Grid { robot, obstacle, goal_reached }
    }

    /// Applies a move with boundary clamping.
    pub fn step(&self, (x, y): (usize, usize), m: usize) -> (usize, usize) {
        let (dx, dy) = MOVES[m];
        let nx = (x as i64 + dx).clamp(0, self.width as i64 - 1) as usize;
        let ny = (y as i64 + dy).clamp(0, self.height as i64 - 1) as usize;
        (nx, ny)
    }

    fn validate(&self) -> Result<(), EnvError> {
        let inside = |(x, y): (usize, usize)| x < self.width && y < self.height;
        if self.width == 0 || self.height == 0 {
            return Err(EnvError::Config("empty grid".into()));
        }
        for (name, c) in [("robot_start", self.robot_start), ("goal", self.goal), ("obstacle_start", self.obstacle_start)] {
            if !inside(c) {
                return Err(EnvError::Config(format!("{name} {c:?} outside the grid")));
            }
        }
        if self.goal == self.obstacle_start {
            return Err(EnvError::Config("goal coincides with the obstacle start".into()));
        }
        let total: f64 = self.obstacle_policy.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.obstacle_policy.iter().any(|p| *p < 0.0) {
            return Err(EnvError::Config("obstacle policy must be a distribution".into()));
        }
        Ok(())
    }
}

/// Builds the gridworld MDP. Collision is checked before the goal; collided
/// and goal-reached states are absorbing under every action.
pub fn build_gridworld(config: &GridworldConfig) -> Result<Env, EnvError> {
    config.validate()?;
    let c = config.cells();
    let n = 2 * c * c;
    let mut b = MdpBuilder::new(n, MOVES.len());
    let mut unsafe_states = Vec::new();
    let mut goal_states = Vec::new();
    for s in 0..n {
        let (robot, obstacle, flag) = config.decode(s);
        if flag {
            goal_states.push(s);
        } else if robot == obstacle {
            unsafe_states.push(s);
        }
        if flag || robot == obstacle {
            for a in 0..MOVES.len() {
                b.transition(s, a, s, 1.0);
            }
            continue;
        }
        for a in 0..MOVES.len() {
            let r = config.step(robot, a);
            for (m, &p) in config.obstacle_policy.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let o = config.step(obstacle, m);
                let reached = r != o && r == config.goal;
                b.transition(s, a, config.state(r, o, reached), p);
            }
        }
    }
    b.init(vec![(config.state(config.robot_start, config.obstacle_start, false), 1.0)])
        .label(UNSAFE, unsafe_states)
        .label(GOAL, goal_states);
    let mdp = b.build()?;

    let cost = config.collision_cost;
    let controller = min_cost_policy(
        &mdp,
        |_| 1.0,
        |s| {
            let (r, o, flag) = config.decode(s);
            if flag {
                Some(0.0)
            } else if r == o {
                Some(cost)
            } else {
                None
            }
        },
        1.0,
        STAY,
        1e-6,
    );

    let features: Vec<Vec<f64>> = MOVES.iter().map(|(dx, dy)| vec![*dx as f64, *dy as f64]).collect();
    finish_meta(
        &mdp,
        EnvMeta {
            kind: EnvKind::Gridworld,
            action_names: ACTION_NAMES.iter().map(|s| s.to_string()).collect(),
            safe_action: STAY,
            metric: ActionMetric::from_features(&features),
            horizon: config.horizon,
            objective: Objective::Safety,
            controller,
            mdp_digest: String::new(),
            gridworld: Some(config.clone()),
            car_following: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::validate_mdp;

    fn env() -> (GridworldConfig, Env) {
        let cfg = GridworldConfig::default();
        let env = build_gridworld(&cfg).unwrap();
        (cfg, env)
    }

    #[test]
    fn sizes_and_validity() {
        let (_, env) = env();
        assert_eq!(env.mdp.state_count(), 8192);
        assert_eq!(env.mdp.action_count(), 5);
        assert!(validate_mdp(&env.mdp).is_empty());
    }

    #[test]
    fn boundary_moves_clamp() {
        let cfg = GridworldConfig::default();
        assert_eq!(cfg.step((0, 0), UP), (0, 0));
        assert_eq!(cfg.step((0, 0), LEFT), (0, 0));
        assert_eq!(cfg.step((0, 0), DOWN), (0, 1));
        assert_eq!(cfg.step((7, 7), RIGHT), (7, 7));
    }

    #[test]
    fn robot_up_at_top_row_keeps_row() {
        let (cfg, env) = env();
        let s = cfg.state((3, 0), (6, 6), false);
        for (t, _) in env.mdp.row(s, UP) {
            let (r, _, _) = cfg.decode(t);
            assert_eq!(r, (3, 0));
        }
    }

    #[test]
    fn colocated_is_unsafe_and_absorbing() {
        let (cfg, env) = env();
        let s = cfg.state((2, 3), (2, 3), false);
        assert!(env.is_unsafe(s));
        for a in 0..5 {
            assert_eq!(env.mdp.row(s, a).collect::<Vec<_>>(), vec![(s, 1.0)]);
        }
        assert!(!env.is_unsafe(cfg.state((2, 3), (2, 4), false)));
    }

    #[test]
    fn obstacle_marginal_matches_policy() {
        let (cfg, env) = env();
        let robot = (1, 1);
        let obstacle = (0, 5);
        let s = cfg.state(robot, obstacle, false);
        let mut marginal = vec![0.0; cfg.cells()];
        for (t, p) in env.mdp.row(s, RIGHT) {
            let (_, o, _) = cfg.decode(t);
            marginal[cfg.cell(o)] += p;
        }
        let mut expected = vec![0.0; cfg.cells()];
        for (m, p) in cfg.obstacle_policy.iter().enumerate() {
            expected[cfg.cell(cfg.step(obstacle, m))] += p;
        }
        assert_eq!(marginal, expected);
    }

    #[test]
    fn reaching_goal_sets_flag() {
        let (cfg, env) = env();
        let s = cfg.state((7, 6), (0, 0), false);
        for (t, _) in env.mdp.row(s, DOWN) {
            let (r, _, flag) = cfg.decode(t);
            assert_eq!(r, (7, 7));
            assert!(flag);
            assert!(env.is_goal(t));
        }
    }

    #[test]
    fn controller_moves_onto_goal_and_stays_after() {
        let (cfg, env) = env();
        let pi = env.controller();
        assert_eq!(pi.action(cfg.state((7, 6), (1, 1), false)), DOWN);
        assert_eq!(pi.action(cfg.state((6, 7), (1, 1), false)), RIGHT);
        assert_eq!(pi.action(cfg.state((7, 7), (1, 1), true)), STAY);
        assert_eq!(pi.action(cfg.state((3, 3), (3, 3), false)), STAY);
    }

    #[test]
    fn init_and_labels() {
        let (cfg, env) = env();
        assert_eq!(env.mdp.init(), &[(cfg.state((0, 0), (4, 4), false), 1.0)]);
        assert_eq!(env.mdp.label(UNSAFE).unwrap().count(), 64);
        assert_eq!(env.mdp.label(GOAL).unwrap().count(), 4096);
        assert_eq!(env.separation(cfg.state((0, 0), (4, 4), false)), 8.0);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = GridworldConfig { goal: (4, 4), ..Default::default() };
        assert!(build_gridworld(&cfg).is_err());
        let cfg = GridworldConfig { goal: (9, 1), ..Default::default() };
        assert!(build_gridworld(&cfg).is_err());
    }
}
