//! Builds an environment, writes its MDP to the text format, reads it back
//! and reports min, max and controller safety from the initial
//! distribution.
//!
//! Usage: `verify_environment [gridworld|car-following]`

use dcshield::envs::{Env, EnvKind};
use dcshield::mdp::format::{from_text, to_text};
use dcshield::mdp::{compute_safety_values, expected_initial_value, SolveOptions, ValueMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kind: EnvKind = std::env::args().nth(1).as_deref().unwrap_or("gridworld").parse()?;
    let env = Env::build(kind)?;
    let text = to_text(&env.mdp);
    let mdp = from_text(&text)?;
    println!(
        "{kind}: {} states, {} actions, {} transitions, {} bytes as text",
        mdp.state_count(),
        mdp.action_count(),
        mdp.transition_count(),
        text.len()
    );

    let opts = SolveOptions::default();
    let controller = env.controller();
    for (name, mode, policy) in [
        ("min", ValueMode::Min, None),
        ("max", ValueMode::Max, None),
        ("controller", ValueMode::Policy, Some(&controller)),
    ] {
        let v = compute_safety_values(&mdp, mode, policy, &opts)?;
        println!(
            "  {name:<10} safety {:.6}  ({} sweeps, residual {:.1e})",
            expected_initial_value(&v.values, mdp.init()),
            v.iterations,
            v.residual
        );
    }
    Ok(())
}
