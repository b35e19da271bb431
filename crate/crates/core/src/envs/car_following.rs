//! Car-following: the ego vehicle trails a leader whose acceleration is
//! random. State = (gap bin, relative-velocity bin) with relative velocity
//! `v = v_leader - v_ego`, so a positive value opens the gap.
//!
//! Continuous successors are spread over the two neighbouring bins on each
//! axis by linear interpolation, which keeps the expected gap and velocity
//! of every transition exact.

use serde::{Deserialize, Serialize};

use super::{finish_meta, min_cost_policy, ActionMetric, Env, EnvError, EnvKind, EnvMeta, StateView};
use crate::mdp::{MdpBuilder, Objective, UNSAFE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarFollowConfig {
    pub distance_bins: usize,
    /// Bin `i` has gap `i * distance_step` meters.
    pub distance_step: f64,
    pub velocity_bins: usize,
    /// Bin `j` has relative velocity `velocity_min + j * velocity_step`.
    pub velocity_step: f64,
    pub velocity_min: f64,
    pub ego_accels: Vec<f64>,
    pub leader_accels: Vec<f64>,
    pub safe_distance: f64,
    pub tick_seconds: f64,
    pub horizon: usize,
    /// Initial gap range (inclusive, meters) and relative-velocity range.
    pub init_distance: (f64, f64),
    pub init_velocity: (f64, f64),
    /// Controller cost: `gap / max_gap + weight * max(0, reference - gap)^2`.
    pub reference_gap: f64,
    pub proximity_weight: f64,
    /// Controller cost per step spent in an unsafe state.
    pub unsafe_cost: f64,
    pub discount: f64,
}

impl Default for CarFollowConfig {
    fn default() -> Self {
        CarFollowConfig {
            distance_bins: 22,
            distance_step: 1.0,
            velocity_bins: 22,
            velocity_step: 0.5,
            velocity_min: -5.5,
            ego_accels: vec![-0.5, -0.25, 0.0, 0.25, 0.5],
            leader_accels: vec![-0.2, -0.1, 0.0, 0.1, 0.2],
            safe_distance: 5.0,
            tick_seconds: 1.0,
            horizon: 100,
            init_distance: (10.0, 15.0),
            init_velocity: (-0.5, 0.5),
            reference_gap: 7.0,
            proximity_weight: 0.1,
            unsafe_cost: 1000.0,
            discount: 0.99,
        }
    }
}

impl CarFollowConfig {
    pub fn state_count(&self) -> usize {
        self.distance_bins * self.velocity_bins
    }

    pub fn state(&self, i: usize, j: usize) -> usize {
        i * self.velocity_bins + j
    }

    pub fn distance(&self, i: usize) -> f64 {
        i as f64 * self.distance_step
    }

    pub fn velocity(&self, j: usize) -> f64 {
        self.velocity_min + j as f64 * self.velocity_step
    }

    pub fn max_distance(&self) -> f64 {
        self.distance(self.distance_bins - 1)
    }

    /// `(gap meters, relative velocity m/s)` of a state.
    pub fn decode(&self, s: usize) -> (f64, f64) {
        (self.distance(s / self.velocity_bins), self.velocity(s % self.velocity_bins))
    }

    pub fn view(&self, s: usize) -> StateView {
        let (distance, relative_velocity) = self.decode(s);
        StateView::Car { distance, relative_velocity }
    }

    pub fn is_unsafe(&self, s: usize) -> bool {
        self.decode(s).0 < self.safe_distance - 1e-9
    }

    /// Nearest bin to a gap value.
    pub fn distance_bin(&self, d: f64) -> usize {
        ((d / self.distance_step).round().max(0.0) as usize).min(self.distance_bins - 1)
    }

    pub fn velocity_bin(&self, v: f64) -> usize {
        (((v - self.velocity_min) / self.velocity_step).round().max(0.0) as usize).min(self.velocity_bins - 1)
    }

    /// Interpolation weights of a clamped value over a uniform bin axis.
    fn spread(x: f64, lo: f64, step: f64, bins: usize) -> [(usize, f64); 2] {
        let pos = ((x - lo) / step).clamp(0.0, (bins - 1) as f64);
        let i = (pos.floor() as usize).min(bins - 1);
        let frac = pos - i as f64;
        if frac < 1e-12 || i + 1 >= bins {
            [(i, 1.0), (i, 0.0)]
        } else if frac > 1.0 - 1e-12 {
            [(i + 1, 1.0), (i + 1, 0.0)]
        } else {
            [(i, 1.0 - frac), (i + 1, frac)]
        }
    }

    /// Successor distribution of `(gap, velocity)` under ego acceleration
    /// `ego`, before any unsafe absorption.
    pub fn successors(&self, s: usize, ego: f64) -> Vec<(usize, f64)> {
        let (d, v) = self.decode(s);
        let dt = self.tick_seconds;
        let pl = 1.0 / self.leader_accels.len() as f64;
        let mut out = Vec::new();
        for &lead in &self.leader_accels {
            let rel = lead - ego;
            let d2 = d + v * dt + 0.5 * rel * dt * dt;
            let v2 = v + rel * dt;
            let dw = Self::spread(d2, 0.0, self.distance_step, self.distance_bins);
            let vw = Self::spread(v2, self.velocity_min, self.velocity_step, self.velocity_bins);
            for (i, pd) in dw {
                for (j, pv) in vw {
                    if pd * pv > 0.0 {
                        out.push((self.state(i, j), pl * pd * pv));
                    }
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<(), EnvError> {
        if self.distance_bins < 2 || self.velocity_bins < 2 {
            return Err(EnvError::Config("need at least two bins per axis".into()));
        }
        if !(self.distance_step > 0.0 && self.velocity_step > 0.0 && self.tick_seconds > 0.0) {
            return Err(EnvError::Config("steps must be positive".into()));
        }
        if self.ego_accels.is_empty() || self.leader_accels.is_empty() {
            return Err(EnvError::Config("acceleration sets must be non-empty".into()));
        }
        if !self.ego_accels.contains(&0.0) {
            return Err(EnvError::Config("ego accelerations must include 0".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(EnvError::Config("discount must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Builds the car-following MDP; gaps below the safety distance are unsafe
/// and absorbing.
pub fn build_car_following(config: &CarFollowConfig) -> Result<Env, EnvError> {
    config.validate()?;
    let n = config.state_count();
    let na = config.ego_accels.len();
    let mut b = MdpBuilder::new(n, na);
    let mut unsafe_states = Vec::new();
    let mut init = Vec::new();
    for s in 0..n {
        if config.is_unsafe(s) {
            unsafe_states.push(s);
            for a in 0..na {
                b.transition(s, a, s, 1.0);
            }
            continue;
        }
        for (a, &ego) in config.ego_accels.iter().enumerate() {
            b.row(s, a, config.successors(s, ego));
        }
        let (d, v) = config.decode(s);
        let (dl, dh) = config.init_distance;
        let (vl, vh) = config.init_velocity;
        if d >= dl - 1e-9 && d <= dh + 1e-9 && v >= vl - 1e-9 && v <= vh + 1e-9 {
            init.push(s);
        }
    }
    if init.is_empty() {
        return Err(EnvError::Config("initial region contains no safe state".into()));
    }
    let p0 = 1.0 / init.len() as f64;
    b.init(init.iter().map(|s| (*s, p0)).collect()).label(UNSAFE, unsafe_states);
    let mdp = b.build()?;

    let safe_action = config.ego_accels.iter().position(|a| *a == 0.0).expect("validated");
    let dmax = config.max_distance();
    let cost = |s: usize| {
        let (d, _) = config.decode(s);
        let short = (config.reference_gap - d).max(0.0);
        d / dmax + config.proximity_weight * short * short
    };
    let stuck = config.unsafe_cost / (1.0 - config.discount);
    let controller = min_cost_policy(
        &mdp,
        cost,
        |s| config.is_unsafe(s).then_some(stuck),
        config.discount,
        safe_action,
        1e-6,
    );

    let features: Vec<Vec<f64>> = config.ego_accels.iter().map(|a| vec![*a]).collect();
    finish_meta(
        &mdp,
        EnvMeta {
            kind: EnvKind::CarFollowing,
            action_names: config.ego_accels.iter().map(|a| format!("{a:+} m/s^2")).collect(),
            safe_action,
            metric: ActionMetric::from_features(&features),
            horizon: config.horizon,
            objective: Objective::Safety,
            controller,
            mdp_digest: String::new(),
            gridworld: None,
            car_following: Some(config.clone()),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::validate_mdp;

    fn env() -> (CarFollowConfig, Env) {
        let cfg = CarFollowConfig::default();
        let env = build_car_following(&cfg).unwrap();
        (cfg, env)
    }

    #[test]
    fn sizes_and_validity() {
        let (_, env) = env();
        assert_eq!(env.mdp.state_count(), 484);
        assert_eq!(env.mdp.action_count(), 5);
        assert!(validate_mdp(&env.mdp).is_empty());
        assert_eq!(env.meta.safe_action, 2);
    }

    #[test]
    fn short_gaps_are_unsafe() {
        let (cfg, env) = env();
        for j in 0..cfg.velocity_bins {
            for i in 0..cfg.distance_bins {
                assert_eq!(env.is_unsafe(cfg.state(i, j)), i < 5, "bin {i}");
            }
        }
    }

    #[test]
    fn zero_velocity_and_zero_net_acceleration_self_loops() {
        let cfg = CarFollowConfig { leader_accels: vec![0.0], ..Default::default() };
        let s = cfg.state(10, cfg.velocity_bin(0.0));
        assert_eq!(cfg.successors(s, 0.0), vec![(s, 1.0)]);
        let (cfg, env) = env();
        let s = cfg.state(10, cfg.velocity_bin(0.0));
        let self_mass: f64 = env.mdp.row(s, 2).filter(|(t, _)| *t == s).map(|(_, p)| p).sum();
        assert!(self_mass >= 0.2, "{self_mass}");
    }

    #[test]
    fn transitions_stay_on_the_grid_and_preserve_mean() {
        let (cfg, env) = env();
        let s = cfg.state(12, cfg.velocity_bin(1.0));
        for (a, &ego) in cfg.ego_accels.iter().enumerate() {
            let mean_d: f64 = env.mdp.row(s, a).map(|(t, p)| p * cfg.decode(t).0).sum();
            let mean_lead: f64 = cfg.leader_accels.iter().sum::<f64>() / 5.0;
            let expected = 12.0 + 1.0 + 0.5 * (mean_lead - ego);
            assert!((mean_d - expected).abs() < 1e-9);
        }
        // saturation at the far edge
        let far = cfg.state(21, cfg.velocity_bins - 1);
        for (t, _) in env.mdp.row(far, 0) {
            assert!(t < cfg.state_count());
            assert_eq!(t / cfg.velocity_bins, 21);
        }
    }

    #[test]
    fn init_is_uniform_over_the_start_region() {
        let (_, env) = env();
        assert_eq!(env.mdp.init().len(), 18);
        for &(s, p) in env.mdp.init() {
            assert!((p - 1.0 / 18.0).abs() < 1e-15);
            assert!(!env.is_unsafe(s));
        }
    }

    #[test]
    fn controller_closes_a_large_gap() {
        let (cfg, env) = env();
        let s = cfg.state(18, cfg.velocity_bin(0.0));
        let a = env.controller().action(s);
        assert!(cfg.ego_accels[a] > 0.0, "action {a}");
        // unsafe states idle
        assert_eq!(env.controller().action(cfg.state(2, 3)), 2);
    }

    #[test]
    fn metric_is_acceleration_difference() {
        let (_, env) = env();
        assert_eq!(env.meta.metric.distance(0, 4), 1.0);
        assert_eq!(env.meta.metric.distance(1, 2), 0.25);
    }
}
