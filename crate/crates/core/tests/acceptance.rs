//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Runs as a plain binary (`cargo test --test acceptance`); the process
//! exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::error::Error;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcshield::dcmdp::{
    build_constant_delay, build_constant_delay_with, build_random_delay, build_random_delay_with, BuildOptions,
    DcMdp, Link, Seeds,
};
use dcshield::delay::{estimate_from_traces, DelayModel, EstimateOptions, LatencyTrace};
use dcshield::envs::{Env, EnvKind};
use dcshield::mdp::{
    compute_q, compute_reach_values, compute_safety_values, expected_initial_value,
    BasicMdp, MdpBuilder, Model, Policy, SolveOptions, StateSet, ValueMode,
};
use dcshield::shield::{
    build_shield, epsilon_grid, min_safety_under_shield, synthesize, SynthesisMode, SynthesisOptions, SynthesisResult,
};
use dcshield::sim::{run_batch, AggregateReport, BatchOptions, Outcome, RuntimeFallback, ShieldBinding, SimSetup};
use dcshield::stats::binomial_band;

type Check = Result<(bool, String), Box<dyn Error>>;

const EPISODES: u64 = 10_000;
const ROW_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-6;
const ENDPOINT_TOL: f64 = 2e-6;
const MONOTONE_SLACK: f64 = 1e-9;

fn main() {
    let mut cache = Cache::default();
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Cache) -> Check>)> = vec![
        ("state counts of the delayed products", Box::new(|_| state_counts())),
        ("value iteration stopping rule and linear-system oracle", Box::new(|_| oracle())),
        ("row stochasticity of delayed products", Box::new(|_| row_sums())),
        ("monotonicity of shields in epsilon", Box::new(monotonicity)),
        ("endpoint identities at epsilon 0 and 1", Box::new(endpoints)),
        ("synthesis meets delta and simulation agrees", Box::new(end_to_end)),
        ("safe sets nest as the constant delay grows", Box::new(|_| nesting())),
        ("random-delay shields are less conservative", Box::new(efficiency)),
        ("delay model estimation", Box::new(|_| estimation())),
    ];
    // Optional name filters, e.g. `cargo test --test acceptance -- oracle`.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let (ok, detail) = match check(&mut cache) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "{} {name}: {detail} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}

/// Results shared between criteria that need the same expensive products.
#[derive(Default)]
struct Cache {
    envs: HashMap<EnvKind, Arc<Env>>,
    /// Constant-delay tau 3, delta 0.95 shields from the end-to-end check.
    constant_shields: HashMap<EnvKind, (DcMdp, SynthesisResult)>,
    /// Mostly-zero tau 2 products.
    tau_two: HashMap<EnvKind, DcMdp>,
}

impl Cache {
    fn env(&mut self, kind: EnvKind) -> Result<Arc<Env>, Box<dyn Error>> {
        if let Some(env) = self.envs.get(&kind) {
            return Ok(env.clone());
        }
        let env = Arc::new(Env::build(kind)?);
        self.envs.insert(kind, env.clone());
        Ok(env)
    }

    fn tau_two(&mut self, kind: EnvKind) -> Result<&DcMdp, Box<dyn Error>> {
        if !self.tau_two.contains_key(&kind) {
            let env = self.env(kind)?;
            let dc = build_random_delay(&env.mdp, &DelayModel::mostly_zero(2, 0.1, 0.1)?)?;
            self.tau_two.insert(kind, dc);
        }
        Ok(&self.tau_two[&kind])
    }
}

const KINDS: [EnvKind; 2] = [EnvKind::CarFollowing, EnvKind::Gridworld];

fn all_states() -> BuildOptions {
    BuildOptions { seeds: Seeds::AllStates }
}

fn state_counts() -> Check {
    let expected: [(EnvKind, [usize; 5]); 2] = [
        (EnvKind::CarFollowing, [484, 2_420, 12_100, 60_500, 75_504]),
        (EnvKind::Gridworld, [8_192, 40_960, 204_800, 1_024_000, 1_277_952]),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, counts) in expected {
        let env = Env::build(kind)?;
        let mut got = Vec::new();
        for tau in 0..=3 {
            got.push(build_constant_delay_with(&env.mdp, tau, env.meta.safe_action, &all_states())?.state_count());
        }
        let model = DelayModel::mostly_zero(3, 0.1, 0.1)?;
        got.push(build_random_delay_with(&env.mdp, &model, &all_states())?.state_count());
        ok &= got == counts;
        parts.push(format!("{kind} {got:?}"));
    }
    Ok((ok, parts.join("; ")))
}

/// A random MDP with at most 6 states and 3 actions, a target label and a
/// uniform initial distribution.
fn random_mdp(rng: &mut ChaCha8Rng) -> (BasicMdp, StateSet) {
    let ns = rng.gen_range(1..=6);
    let na = rng.gen_range(1..=3);
    let mut b = MdpBuilder::new(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let mut weights: Vec<f64> =
                (0..ns).map(|_| if rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(0.05..1.0) }).collect();
            if weights.iter().all(|w| *w == 0.0) {
                weights[rng.gen_range(0..ns)] = 1.0;
            }
            let total: f64 = weights.iter().sum();
            let row: Vec<(usize, f64)> =
                weights.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(t, w)| (t, w / total)).collect();
            b.row(s, a, row);
        }
    }
    let target: Vec<usize> = (0..ns).filter(|_| rng.gen_bool(0.3)).collect();
    b.init((0..ns).map(|s| (s, 1.0 / ns as f64)).collect());
    b.label("target", target.iter().copied());
    let mdp = b.build().expect("valid random MDP");
    let target = StateSet::from_indices(ns, target);
    (mdp, target)
}

/// Exact reach probabilities of a fixed deterministic policy: states with
/// no path to the target are 0, the rest solve `(I - P) x = b`.
fn policy_reach(mdp: &BasicMdp, target: &StateSet, actions: &[usize]) -> Vec<f64> {
    let ns = mdp.state_count();
    let mut reaches: Vec<bool> = (0..ns).map(|s| target.contains(s)).collect();
    loop {
        let mut changed = false;
        for s in 0..ns {
            if !reaches[s] && mdp.row(s, actions[s]).any(|(t, p)| p > 0.0 && reaches[t]) {
                reaches[s] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let unknown: Vec<usize> = (0..ns).filter(|&s| reaches[s] && !target.contains(s)).collect();
    let pos: HashMap<usize, usize> = unknown.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let n = unknown.len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (i, &s) in unknown.iter().enumerate() {
        a[i][i] = 1.0;
        for (t, p) in mdp.row(s, actions[s]) {
            if target.contains(t) {
                a[i][n] += p;
            } else if let Some(&j) = pos.get(&t) {
                a[i][j] -= p;
            }
        }
    }
    let x = gauss(a);
    (0..ns)
        .map(|s| if target.contains(s) { 1.0 } else { pos.get(&s).map_or(0.0, |&i| x[i]) })
        .collect()
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn gauss(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for k in col..=n {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

fn all_policies(ns: usize, na: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..ns {
        out = out.into_iter().flat_map(|p| (0..na).map(move |a| [p.clone(), vec![a]].concat())).collect();
    }
    out
}

fn oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let opts = SolveOptions::default();
    let mut worst: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    for _ in 0..200 {
        let (mdp, target) = random_mdp(&mut rng);
        let ns = mdp.state_count();
        let exact: Vec<Vec<f64>> =
            all_policies(ns, mdp.action_count()).iter().map(|p| policy_reach(&mdp, &target, p)).collect();
        for (mode, pick) in [(ValueMode::Max, f64::max as fn(f64, f64) -> f64), (ValueMode::Min, f64::min)] {
            let v = compute_reach_values(&mdp, &target, mode, None, &opts)?;
            worst_residual = worst_residual.max(v.residual);
            for s in 0..ns {
                let best = exact.iter().map(|x| x[s]).reduce(pick).unwrap();
                worst = worst.max((v.values[s] - best).abs());
            }
        }
        let actions: Vec<usize> = (0..ns).map(|_| rng.gen_range(0..mdp.action_count())).collect();
        let policy = Policy::new(&mdp, actions.clone())?;
        let v = compute_reach_values(&mdp, &target, ValueMode::Policy, Some(&policy), &opts)?;
        worst_residual = worst_residual.max(v.residual);
        let x = policy_reach(&mdp, &target, &actions);
        for s in 0..ns {
            worst = worst.max((v.values[s] - x[s]).abs());
        }
    }
    Ok((
        worst <= ORACLE_TOL && worst_residual < opts.tol,
        format!("200 MDPs, max error {worst:.2e}, max final residual {worst_residual:.2e}"),
    ))
}

/// Largest |row sum - 1| over the given (state, action) pairs.
fn row_error(dc: &DcMdp, states: impl Iterator<Item = usize>) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for x in states {
        for a in dc.allowed(x).iter() {
            let sum: f64 = dc.successors(x, a).iter().map(|(_, p)| p).sum();
            worst = worst.max((sum - 1.0).abs());
            rows += 1;
        }
    }
    (worst, rows)
}

fn toy_mdp() -> Result<BasicMdp, Box<dyn Error>> {
    let mut b = MdpBuilder::new(4, 2);
    b.row(0, 0, [(0, 0.3), (1, 0.7)])
        .row(0, 1, [(2, 1.0)])
        .row(1, 0, [(1, 0.5), (3, 0.5)])
        .row(1, 1, [(0, 0.2), (2, 0.8)])
        .row(2, 0, [(2, 1.0)])
        .row(2, 1, [(0, 0.1), (3, 0.9)])
        .row(3, 0, [(3, 1.0)])
        .row(3, 1, [(3, 1.0)])
        .init(vec![(0, 1.0)])
        .label("unsafe", [3]);
    Ok(b.build()?)
}

fn row_sums() -> Check {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();

    let toy = toy_mdp()?;
    let mut rows = 0;
    for tau in 0..=3 {
        for seeds in [Seeds::InitSupport, Seeds::AllStates] {
            let opts = BuildOptions { seeds };
            let c = build_constant_delay_with(&toy, tau, 0, &opts)?;
            let r = build_random_delay_with(&toy, &DelayModel::mostly_zero(tau, 0.3, 0.2)?, &opts)?;
            for dc in [c, r] {
                let (e, n) = row_error(&dc, 0..dc.state_count());
                worst = worst.max(e);
                rows += n;
            }
        }
    }
    parts.push(format!("toy {rows} rows"));

    let car = Env::build(EnvKind::CarFollowing)?;
    let mut rows = 0;
    for tau in 0..=3 {
        let dc = build_constant_delay_with(&car.mdp, tau, car.meta.safe_action, &all_states())?;
        let (e, n) = row_error(&dc, 0..dc.state_count());
        worst = worst.max(e);
        rows += n;
    }
    let dc = build_random_delay_with(&car.mdp, &DelayModel::mostly_zero(3, 0.1, 0.1)?, &all_states())?;
    let (e, n) = row_error(&dc, 0..dc.state_count());
    worst = worst.max(e);
    rows += n;
    parts.push(format!("car-following {rows} rows"));
    drop(dc);

    let grid = Env::build(EnvKind::Gridworld)?;
    let dc = build_random_delay_with(&grid.mdp, &DelayModel::mostly_zero(3, 0.1, 0.1)?, &all_states())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sample: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..dc.state_count())).collect();
    let (e, n) = row_error(&dc, sample.into_iter());
    worst = worst.max(e);
    parts.push(format!("gridworld sample {n} rows of {} states", dc.state_count()));

    Ok((worst <= ROW_TOL, format!("{}, max deviation {worst:.2e}", parts.join(", "))))
}

fn monotonicity(cache: &mut Cache) -> Check {
    let opts = SynthesisOptions::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in KINDS {
        let dc = cache.tau_two(kind)?;
        let vmax = compute_safety_values(dc, ValueMode::Max, None, &opts.solve)?;
        let qmax = compute_q(dc, &vmax);
        let grid = epsilon_grid(opts.eta);
        let mut nested = true;
        let mut prev = build_shield(dc, &vmax, &qmax, grid[0])?;
        for &e in &grid[1..] {
            let next = build_shield(dc, &vmax, &qmax, e)?;
            nested &= next.sets().iter().zip(prev.sets()).all(|(n, p)| n.is_subset(*p));
            prev = next;
        }
        let res = synthesize(dc, None, 0.0, SynthesisMode::PolicyFree, &opts)?;
        let values: Vec<f64> = res.sweep_log.iter().map(|p| p.achieved).collect();
        let drop = values.windows(2).map(|w| w[0] - w[1]).fold(f64::NEG_INFINITY, f64::max);
        let monotone = values.len() == grid.len() && drop <= MONOTONE_SLACK;
        ok &= nested && monotone;
        parts.push(format!(
            "{kind}: sets nested {nested}, {} points from {:.4} to {:.4}, largest decrease {:.1e}",
            values.len(),
            values[0],
            values[values.len() - 1],
            drop.max(0.0)
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn endpoints(cache: &mut Cache) -> Check {
    let opts = SolveOptions::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in KINDS {
        let dc = cache.tau_two(kind)?;
        let vmax = compute_safety_values(dc, ValueMode::Max, None, &opts)?;
        let vmin = compute_safety_values(dc, ValueMode::Min, None, &opts)?;
        let qmax = compute_q(dc, &vmax);

        let zero = build_shield(dc, &vmax, &qmax, 0.0)?;
        let full = (0..dc.state_count()).all(|x| zero.allowed(x) == dc.allowed(x));
        let m0 = expected_initial_value(&min_safety_under_shield(dc, &zero, &opts)?.values, dc.init());
        let e_min = expected_initial_value(&vmin.values, dc.init());

        let one = build_shield(dc, &vmax, &qmax, 1.0)?;
        let optimal = (0..dc.state_count())
            .all(|x| one.allowed(x).iter().all(|a| qmax.get(x, a).unwrap() >= vmax.values[x] - ENDPOINT_TOL));
        let m1 = expected_initial_value(&min_safety_under_shield(dc, &one, &opts)?.values, dc.init());
        let e_max = expected_initial_value(&vmax.values, dc.init());

        let pass = full && optimal && (m0 - e_min).abs() <= ENDPOINT_TOL && (m1 - e_max).abs() <= ENDPOINT_TOL;
        ok &= pass;
        parts.push(format!(
            "{kind}: M0 {m0:.6} vs Vmin {e_min:.6}, M1 {m1:.6} vs Vmax {e_max:.6}, full {full}, optimal {optimal}"
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn shielded_batch(
    env: &Arc<Env>,
    link: Link,
    dc: DcMdp,
    res: SynthesisResult,
    horizon: usize,
) -> Result<AggregateReport, Box<dyn Error>> {
    let binding = ShieldBinding { shield: Arc::new(res.shield), fallback: RuntimeFallback::Safest(Arc::new(res.qmax)) };
    let setup = SimSetup::new(env.clone(), link, horizon)?.with_product(Arc::new(dc))?.with_shield(binding)?;
    let batch = BatchOptions { episodes: EPISODES, seed_base: 0, log_ticks: false };
    Ok(run_batch(&setup, &env.controller(), &batch, None)?)
}

/// Long enough that almost every violation the unbounded-time value
/// accounts for happens within the episode.
const LONG_HORIZON: usize = 1_000;

fn end_to_end(cache: &mut Cache) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    let tau = 3;
    for kind in KINDS {
        let env = cache.env(kind)?;
        for delta in [0.80, 0.90, 0.95] {
            let link = Link::Constant { tau, safe_action: env.meta.safe_action };
            let dc = build_constant_delay(&env.mdp, tau, env.meta.safe_action)?;
            let controller = dc.lift_policy(&env.controller())?;
            let res = synthesize(&dc, Some(&controller), delta, SynthesisMode::WithPolicy, &SynthesisOptions::default())?;
            let (achieved, eps) = (res.achieved, res.epsilon_star);
            if delta == 0.95 {
                cache.constant_shields.insert(kind, (dc.clone(), res.clone()));
            }
            let report = shielded_batch(&env, link, dc, res, LONG_HORIZON)?;
            let band = binomial_band(achieved, EPISODES, 3.0);
            let pass = achieved >= delta && band.contains(report.safety_rate);
            ok &= pass;
            parts.push(format!(
                "{kind} delta {delta}: eps* {eps:.2} certified {achieved:.4} simulated {:.4} band [{:.4}, {:.4}]",
                report.safety_rate, band.lo, band.hi
            ));
        }
    }
    Ok((ok, parts.join("; ")))
}

fn nesting() -> Check {
    let opts = SolveOptions::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in KINDS {
        let env = Env::build(kind)?;
        let ns = env.mdp.state_count();
        let mut sets: Vec<StateSet> = Vec::new();
        for tau in 0..=3 {
            let dc = build_constant_delay_with(&env.mdp, tau, env.meta.safe_action, &all_states())?;
            let v = compute_safety_values(&dc, ValueMode::Max, None, &opts)?;
            let safe = StateSet::from_fn(ns, |s| dc.initial_buffer_state(s).is_some_and(|x| v.values[x] >= 0.95));
            sets.push(safe);
        }
        let nested = sets.windows(2).all(|w| w[1].is_subset(&w[0]));
        ok &= nested;
        let sizes: Vec<usize> = sets.iter().map(StateSet::count).collect();
        parts.push(format!("{kind} sizes {sizes:?} nested {nested}"));
    }
    Ok((ok, parts.join("; ")))
}

fn efficiency(cache: &mut Cache) -> Check {
    let tau = 3;
    let delta = 0.95;
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in KINDS {
        let env = cache.env(kind)?;
        let model = DelayModel::mostly_zero(tau, 0.1, 0.1)?;
        let dc = build_random_delay(&env.mdp, &model)?;
        let controller = dc.lift_policy(&env.controller())?;
        let res = synthesize(&dc, Some(&controller), delta, SynthesisMode::WithPolicy, &SynthesisOptions::default())?;
        let random = shielded_batch(&env, Link::Random(model), dc, res, env.meta.horizon)?;
        let (dc, res) = match cache.constant_shields.remove(&kind) {
            Some(pair) => pair,
            None => {
                let dc = build_constant_delay(&env.mdp, tau, env.meta.safe_action)?;
                let controller = dc.lift_policy(&env.controller())?;
                let res =
                    synthesize(&dc, Some(&controller), delta, SynthesisMode::WithPolicy, &SynthesisOptions::default())?;
                (dc, res)
            }
        };
        let link = Link::Constant { tau, safe_action: env.meta.safe_action };
        let constant = shielded_batch(&env, link, dc, res, env.meta.horizon)?;
        match kind {
            EnvKind::Gridworld => {
                let (rw, cw) = (random.win_interval, constant.win_interval);
                let (rd, cd) = (random.draw_interval, constant.draw_interval);
                let pass = rw.lo > cw.hi && rd.hi < cd.lo;
                ok &= pass;
                parts.push(format!(
                    "{kind}: wins {:.4} vs {:.4}, draws {:.4} vs {:.4}",
                    random.rate(Outcome::Win),
                    constant.rate(Outcome::Win),
                    random.rate(Outcome::Draw),
                    constant.rate(Outcome::Draw)
                ));
            }
            EnvKind::CarFollowing => {
                let (r, c) = (random.mean_separation.mean_interval(), constant.mean_separation.mean_interval());
                let pass = r.hi < c.lo;
                ok &= pass;
                parts.push(format!(
                    "{kind}: mean gap [{:.3}, {:.3}] vs [{:.3}, {:.3}]",
                    r.lo, r.hi, c.lo, c.hi
                ));
            }
        }
    }
    Ok((ok, parts.join("; ")))
}

fn estimation() -> Check {
    let opts = EstimateOptions { bin_width_ms: 1, tau_max: Some(2), smoothing: None };
    let trace = LatencyTrace::from_delays(&[0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.0]);
    let est = estimate_from_traces(&[trace], &opts)?;
    let expected = [[1.0 / 3.0, 2.0 / 3.0, 0.0], [0.5, 0.0, 0.5], [1.0, 0.0, 0.0]];
    let exact = est.model.matrix().iter().zip(&expected).all(|(row, want)| row.as_slice() == want);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut structural = true;
    for _ in 0..200 {
        let traces: Vec<LatencyTrace> = (0..rng.gen_range(1..4))
            .map(|_| {
                let len = rng.gen_range(2..60);
                let delays: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..250.0)).collect();
                LatencyTrace::from_delays(&delays)
            })
            .collect();
        let opts = EstimateOptions {
            bin_width_ms: rng.gen_range(10..60),
            tau_max: if rng.gen_bool(0.5) { Some(rng.gen_range(0..5)) } else { None },
            smoothing: if rng.gen_bool(0.5) { Some(rng.gen_range(0.0..2.0)) } else { None },
        };
        let m = estimate_from_traces(&traces, &opts)?.model;
        let zeros = (0..=m.tau_max()).all(|k| (k + 2..=m.tau_max()).all(|j| m.prob(k, j) == 0.0));
        structural &= zeros && m.validate().is_empty();
    }
    Ok((
        exact && structural,
        format!("hand trace rows {:?}, 200 random estimates respect structural zeros {structural}", est.model.matrix()),
    ))
}
