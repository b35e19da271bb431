//! End-to-end properties across modules on small random systems: products,
//! shields, certificates and closed-loop simulation.

use std::sync::Arc;

use proptest::prelude::*;

use dcshield::dcmdp::{build_constant_delay, build_random_delay, Link};
use dcshield::delay::DelayModel;
use dcshield::envs::{Env, EnvKind};
use dcshield::mdp::{
    compute_safety_values, expected_initial_value, BasicMdp, MdpBuilder, Model, Policy, SolveOptions, ValueMode,
};
use dcshield::shield::{
    load_shield, min_safety_under_shield, save_shield, synthesize, ShieldError, SynthesisMode, SynthesisOptions,
};
use dcshield::sim::{run_batch, BatchOptions, RuntimeFallback, ShieldBinding, SimSetup};

fn arb_mdp() -> impl Strategy<Value = BasicMdp> {
    (2usize..6, 1usize..4).prop_flat_map(|(ns, na)| {
        let rows = prop::collection::vec(prop::collection::vec(0u32..4, ns), ns * na);
        (Just(ns), Just(na), rows, 1usize..ns)
    })
    .prop_map(|(ns, na, rows, bad)| {
        let mut b = MdpBuilder::new(ns, na);
        for s in 0..ns {
            for a in 0..na {
                let mut w = rows[s * na + a].clone();
                if w.iter().all(|x| *x == 0) {
                    w[(s + a) % ns] = 1;
                }
                let total: u32 = w.iter().sum();
                b.row(s, a, w.iter().enumerate().filter(|(_, x)| **x > 0).map(|(t, x)| (t, *x as f64 / total as f64)));
            }
        }
        b.init(vec![(0, 1.0)]).label("unsafe", [bad]);
        b.build().unwrap()
    })
}

fn tight() -> SolveOptions {
    SolveOptions { tol: 1e-10, max_iterations: 10_000_000 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn delay_free_links_preserve_safety(mdp in arb_mdp()) {
        let base = compute_safety_values(&mdp, ValueMode::Max, None, &tight()).unwrap();
        let base = expected_initial_value(&base.values, mdp.init());
        let random = build_random_delay(&mdp, &DelayModel::zero()).unwrap();
        let constant = build_constant_delay(&mdp, 0, 0).unwrap();
        for dc in [random, constant] {
            let v = compute_safety_values(&dc, ValueMode::Max, None, &tight()).unwrap();
            prop_assert!((expected_initial_value(&v.values, dc.init()) - base).abs() < 1e-8);
        }
    }

    #[test]
    fn delay_never_helps(mdp in arb_mdp(), tau in 1usize..3) {
        let mut previous = f64::INFINITY;
        for t in 0..=tau {
            let dc = build_constant_delay(&mdp, t, 0).unwrap();
            let v = compute_safety_values(&dc, ValueMode::Max, None, &tight()).unwrap();
            let e = expected_initial_value(&v.values, dc.init());
            prop_assert!(e <= previous + 1e-8);
            previous = e;
        }
    }

    #[test]
    fn certificates_hold_for_every_admitted_controller(
        mdp in arb_mdp(),
        frac in 0.0f64..1.0,
        picks in prop::collection::vec(0usize..3, 64),
    ) {
        let dc = build_random_delay(&mdp, &DelayModel::mostly_zero(2, 0.3, 0.2).unwrap()).unwrap();
        let opts = SynthesisOptions { eta: 0.1, solve: tight(), ..Default::default() };
        let bound = {
            let v = compute_safety_values(&dc, ValueMode::Max, None, &tight()).unwrap();
            expected_initial_value(&v.values, dc.init())
        };
        let delta = frac * bound;
        let res = synthesize(&dc, None, delta, SynthesisMode::PolicyFree, &opts).unwrap();
        prop_assert!(res.achieved + 1e-8 >= delta);
        let floor = min_safety_under_shield(&dc, &res.shield, &tight()).unwrap();
        prop_assert!((expected_initial_value(&floor.values, dc.init()) - res.achieved).abs() < 1e-8);

        // Any controller choosing inside the shield does at least as well.
        let actions: Vec<usize> = (0..dc.state_count())
            .map(|x| {
                let allowed: Vec<usize> = res.shield.allowed(x).iter().collect();
                allowed[picks[x % picks.len()] % allowed.len()]
            })
            .collect();
        let policy = Policy::new(&dc, actions).unwrap();
        let v = compute_safety_values(&dc, ValueMode::Policy, Some(&policy), &tight()).unwrap();
        prop_assert!(expected_initial_value(&v.values, dc.init()) + 1e-8 >= res.achieved);
    }

    #[test]
    fn with_policy_shields_certify_the_filtered_controller(
        mdp in arb_mdp(),
        frac in 0.0f64..1.0,
        picks in prop::collection::vec(0usize..3, 8),
    ) {
        let dc = build_constant_delay(&mdp, 1, 0).unwrap();
        let base: Vec<usize> = (0..mdp.state_count()).map(|s| picks[s % picks.len()] % mdp.action_count()).collect();
        let controller = dc.lift_policy(&Policy::new(&mdp, base).unwrap()).unwrap();
        let opts = SynthesisOptions { eta: 0.1, solve: tight(), ..Default::default() };
        let bound = {
            let v = compute_safety_values(&dc, ValueMode::Max, None, &tight()).unwrap();
            expected_initial_value(&v.values, dc.init())
        };
        let delta = frac * bound;
        let res = synthesize(&dc, Some(&controller), delta, SynthesisMode::WithPolicy, &opts).unwrap();
        prop_assert!(res.achieved + 2e-10 >= delta);
        prop_assert!(res.epsilon_star <= 1.0);
    }
}

#[test]
fn infeasible_targets_are_rejected_with_the_bound() {
    let mut b = MdpBuilder::new(2, 1);
    b.row(0, 0, [(0, 0.5), (1, 0.5)]).row(1, 0, [(1, 1.0)]).init(vec![(0, 1.0)]).label("unsafe", [1]);
    let mdp = b.build().unwrap();
    let dc = build_random_delay(&mdp, &DelayModel::zero()).unwrap();
    match synthesize(&dc, None, 0.5, SynthesisMode::PolicyFree, &SynthesisOptions::default()) {
        Err(ShieldError::Infeasible { delta, bound }) => {
            assert_eq!(delta, 0.5);
            assert!(bound.abs() < 1e-6);
        }
        other => panic!("expected infeasible, got {other:?}"),
    }
}

#[test]
fn shields_round_trip_through_files_and_refuse_other_products() {
    let env = Env::build(EnvKind::CarFollowing).unwrap();
    let dc = build_constant_delay(&env.mdp, 1, env.meta.safe_action).unwrap();
    let other = build_constant_delay(&env.mdp, 2, env.meta.safe_action).unwrap();
    let res = synthesize(&dc, None, 0.9, SynthesisMode::PolicyFree, &SynthesisOptions { eta: 0.1, ..Default::default() })
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shield.json");
    save_shield(&res.shield, &path).unwrap();
    let loaded = load_shield(&path, &dc).unwrap();
    assert_eq!(loaded.sets(), res.shield.sets());
    assert_eq!(loaded.achieved, res.shield.achieved);
    assert!(load_shield(&path, &other).is_err());
}

#[test]
fn shielded_batches_are_reproducible_and_meet_the_certificate() {
    let env = Arc::new(Env::build(EnvKind::Gridworld).unwrap());
    let tau = 1;
    let dc = build_constant_delay(&env.mdp, tau, env.meta.safe_action).unwrap();
    let controller = dc.lift_policy(&env.controller()).unwrap();
    let res = synthesize(&dc, Some(&controller), 0.9, SynthesisMode::WithPolicy, &SynthesisOptions::default()).unwrap();
    let binding = ShieldBinding { shield: Arc::new(res.shield), fallback: RuntimeFallback::Safest(Arc::new(res.qmax)) };
    let setup = SimSetup::new(env.clone(), Link::Constant { tau, safe_action: env.meta.safe_action }, 500)
        .unwrap()
        .with_product(Arc::new(dc))
        .unwrap()
        .with_shield(binding)
        .unwrap();
    let opts = BatchOptions { episodes: 2_000, seed_base: 42, log_ticks: false };
    let a = run_batch(&setup, &env.controller(), &opts, None).unwrap();
    let b = run_batch(&setup, &env.controller(), &opts, None).unwrap();
    assert_eq!(a, b);
    let band = dcshield::stats::binomial_band(res.achieved, opts.episodes, 4.0);
    assert!(band.contains(a.safety_rate), "{} outside [{}, {}]", a.safety_rate, band.lo, band.hi);
}
