//! Reproduces the state counts of both environments under constant delay
//! 0..=3 and random delay with maximum 3, with the time taken by the
//! max-safety value iteration on each product.

use std::time::Instant;

use dcshield::dcmdp::{build_constant_delay_with, build_random_delay_with, BuildOptions, Seeds};
use dcshield::delay::DelayModel;
use dcshield::envs::{Env, EnvKind};
use dcshield::mdp::{compute_safety_values, expected_initial_value, Model, SolveOptions, ValueMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let opts = BuildOptions { seeds: Seeds::AllStates };
    let only = std::env::args().nth(1);
    for kind in [EnvKind::CarFollowing, EnvKind::Gridworld] {
        if only.as_deref().is_some_and(|o| o != kind.to_string()) {
            continue;
        }
        let env = Env::build(kind)?;
        println!("{kind}");
        for tau in 0..=4 {
            let t0 = Instant::now();
            let dc = if tau < 4 {
                build_constant_delay_with(&env.mdp, tau, env.meta.safe_action, &opts)?
            } else {
                build_random_delay_with(&env.mdp, &DelayModel::mostly_zero(3, 0.1, 0.1)?, &opts)?
            };
            let built = t0.elapsed();
            let t1 = Instant::now();
            let v = compute_safety_values(&dc, ValueMode::Max, None, &SolveOptions::default())?;
            let label = if tau < 4 { format!("constant {tau}") } else { "random 3".into() };
            println!(
                "  {label:<11} states {:>8}  build {:>7.2}s  value iteration {:>7.2}s ({} sweeps)  E[Vmax] {:.4}",
                dc.state_count(),
                built.as_secs_f64(),
                t1.elapsed().as_secs_f64(),
                v.iterations,
                expected_initial_value(&v.values, dc.init()),
            );
        }
    }
    Ok(())
}
