//! Runs gridworld episodes over a random-delay link with and without a
//! shield, starting from the given seed and moving on until the shield
//! overrides the controller, then prints that episode tick by tick.
//!
//! Usage: `shielded_episode [first-seed]`

use std::sync::Arc;

use dcshield::dcmdp::{build_random_delay, Link};
use dcshield::delay::DelayModel;
use dcshield::envs::{Env, EnvKind};
use dcshield::shield::{synthesize, SynthesisMode, SynthesisOptions};
use dcshield::sim::{run_episode, RuntimeFallback, ShieldBinding, SimSetup};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let first: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let env = Arc::new(Env::build(EnvKind::Gridworld)?);
    let model = DelayModel::mostly_zero(2, 0.2, 0.2)?;
    let dc = build_random_delay(&env.mdp, &model)?;
    let controller = dc.lift_policy(&env.controller())?;
    let res = synthesize(&dc, Some(&controller), 0.95, SynthesisMode::WithPolicy, &SynthesisOptions::default())?;
    println!("eps* {:.2}, certified safety {:.4}", res.epsilon_star, res.achieved);

    let link = Link::Random(model);
    let plain = SimSetup::new(env.clone(), link.clone(), env.meta.horizon)?;
    let binding = ShieldBinding { shield: Arc::new(res.shield), fallback: RuntimeFallback::Safest(Arc::new(res.qmax)) };
    let setup = SimSetup::new(env.clone(), link, env.meta.horizon)?.with_product(Arc::new(dc))?.with_shield(binding)?;

    let mut seed = first;
    let shielded = loop {
        let run = run_episode(&setup, &env.controller(), seed)?;
        if run.summary.interventions > 0 || seed >= first + 1_000 {
            break run;
        }
        seed += 1;
    };
    let unshielded = run_episode(&plain, &env.controller(), seed)?;
    println!("seed {seed}");
    println!("unshielded: {:?} after {} ticks", unshielded.summary.outcome, unshielded.summary.steps);
    println!(
        "shielded:   {:?} after {} ticks, {} interventions",
        shielded.summary.outcome, shielded.summary.steps, shielded.summary.interventions
    );
    for r in &shielded.records {
        let names = &env.meta.action_names;
        let requested = r.requested.map_or("-".to_string(), |a| names[a].clone());
        println!(
            "  t={:<3} delay {} true {:?} seen {:?} request {:<5} execute {:<5}{}",
            r.t,
            r.delay,
            env.view(r.true_state),
            env.view(r.observed),
            requested,
            names[r.executed],
            if r.overridden { "  (overridden)" } else { "" }
        );
    }
    Ok(())
}
