//! Synthesizes a shield for the task controller under a random-delay link
//! and under a constant-delay link of the same maximum delay, then compares
//! the shielded controllers over a batch of simulated episodes.
//!
//! Usage: `shield_efficiency [gridworld|car-following] [tau] [delta] [episodes]`

use std::sync::Arc;
use std::time::Instant;

use dcshield::dcmdp::{build_constant_delay, build_random_delay, DcMdp, Link};
use dcshield::delay::DelayModel;
use dcshield::envs::{Env, EnvKind};
use dcshield::mdp::{compute_safety_values, expected_initial_value, Model, SolveOptions, ValueMode};
use dcshield::shield::{synthesize, SynthesisMode, SynthesisOptions};
use dcshield::sim::{run_batch, BatchOptions, Outcome, RuntimeFallback, ShieldBinding, SimSetup};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let kind: EnvKind = args.get(1).map_or("gridworld", String::as_str).parse()?;
    let tau: usize = args.get(2).map_or(Ok(3), |s| s.parse())?;
    let delta: f64 = args.get(3).map_or(Ok(0.95), |s| s.parse())?;
    let episodes: u64 = args.get(4).map_or(Ok(10_000), |s| s.parse())?;

    let env = Arc::new(Env::build(kind)?);
    let links = [
        ("random", Link::Random(DelayModel::mostly_zero(tau, 0.1, 0.1)?)),
        ("constant", Link::Constant { tau, safe_action: env.meta.safe_action }),
    ];
    for (name, link) in links {
        let t0 = Instant::now();
        let dc: DcMdp = match &link {
            Link::Random(m) => build_random_delay(&env.mdp, m)?,
            Link::Constant { tau, safe_action } => build_constant_delay(&env.mdp, *tau, *safe_action)?,
        };
        let controller = dc.lift_policy(&env.controller())?;
        let plain = compute_safety_values(&dc, ValueMode::Policy, Some(&controller), &SolveOptions::default())?;
        let res = synthesize(&dc, Some(&controller), delta, SynthesisMode::WithPolicy, &SynthesisOptions::default())?;
        println!(
            "{name:<8} states {:>8}  unshielded {:.4}  bound {:.4}  eps* {:.2}  certified {:.4}  ({:.1}s)",
            dc.state_count(),
            expected_initial_value(&plain.values, dc.init()),
            res.bound,
            res.epsilon_star,
            res.achieved,
            t0.elapsed().as_secs_f64()
        );
        let dc = Arc::new(dc);
        let binding = ShieldBinding {
            shield: Arc::new(res.shield),
            fallback: RuntimeFallback::Safest(Arc::new(res.qmax)),
        };
        let setup = SimSetup::new(env.clone(), link, env.meta.horizon)?
            .with_product(dc)?
            .with_shield(binding)?;
        let report = run_batch(&setup, &env.controller(), &BatchOptions { episodes, seed_base: 0, log_ticks: false }, None)?;
        let gap = report.mean_separation;
        println!(
            "         safety {:.4} [{:.4}, {:.4}]  win {:.4}  draw {:.4}  mean separation {:.3} [{:.3}, {:.3}]  interventions {:.2}",
            report.safety_rate,
            report.safety_interval.lo,
            report.safety_interval.hi,
            report.rate(Outcome::Win),
            report.rate(Outcome::Draw),
            gap.mean,
            gap.mean_interval().lo,
            gap.mean_interval().hi,
            report.interventions.mean,
        );
    }
    Ok(())
}
