//! Counts the base states that remain at least 95% safe from their initial
//! buffer as the constant delay grows from 0 to 3, and checks that each
//! set contains the next.
//!
//! Usage: `safe_set_nesting [gridworld|car-following]`

use dcshield::dcmdp::{build_constant_delay_with, BuildOptions, Seeds};
use dcshield::envs::{Env, EnvKind};
use dcshield::mdp::{compute_safety_values, SolveOptions, StateSet, ValueMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kind: EnvKind = std::env::args().nth(1).as_deref().unwrap_or("car-following").parse()?;
    let env = Env::build(kind)?;
    let ns = env.mdp.state_count();
    let opts = BuildOptions { seeds: Seeds::AllStates };
    let mut previous: Option<StateSet> = None;
    for tau in 0..=3 {
        let dc = build_constant_delay_with(&env.mdp, tau, env.meta.safe_action, &opts)?;
        let v = compute_safety_values(&dc, ValueMode::Max, None, &SolveOptions::default())?;
        let safe = StateSet::from_fn(ns, |s| dc.initial_buffer_state(s).is_some_and(|x| v.values[x] >= 0.95));
        let nested = previous.as_ref().map_or(true, |p| safe.is_subset(p));
        println!("tau {tau}: {} of {ns} base states safe, nested in previous: {nested}", safe.count());
        previous = Some(safe);
    }
    Ok(())
}
