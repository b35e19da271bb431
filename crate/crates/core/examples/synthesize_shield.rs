//! Synthesizes ε-shields for car-following over a mostly-zero link with
//! maximum delay 2, in both modes, and writes them to a temporary file.
//!
//! Usage: `synthesize_shield [delta]`

use dcshield::dcmdp::build_random_delay;
use dcshield::delay::DelayModel;
use dcshield::envs::{Env, EnvKind};
use dcshield::mdp::Model;
use dcshield::shield::{load_shield, save_shield, synthesize, SynthesisMode, SynthesisOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let delta: f64 = std::env::args().nth(1).map_or(Ok(0.9), |s| s.parse())?;
    let env = Env::build(EnvKind::CarFollowing)?;
    let dc = build_random_delay(&env.mdp, &DelayModel::mostly_zero(2, 0.1, 0.1)?)?;
    let controller = dc.lift_policy(&env.controller())?;
    let opts = SynthesisOptions { eta: 0.05, ..Default::default() };

    for (mode, policy) in [(SynthesisMode::WithPolicy, Some(&controller)), (SynthesisMode::PolicyFree, None)] {
        let res = synthesize(&dc, policy, delta, mode, &opts)?;
        println!("{mode}: bound {:.4}, eps* {:.2}, certified {:.4}", res.bound, res.epsilon_star, res.achieved);
        let curve: Vec<String> =
            res.sweep_log.iter().map(|p| format!("{:.2}:{:.3}", p.epsilon, p.achieved)).collect();
        println!("  sweep {}", curve.join(" "));
        let restrictive = (0..dc.state_count()).filter(|&x| res.shield.allowed(x) != dc.allowed(x)).count();
        println!("  shield restricts {restrictive} of {} states", dc.state_count());

        let path = std::env::temp_dir().join(format!("dcshield-example-{mode}.json"));
        save_shield(&res.shield, &path)?;
        let loaded = load_shield(&path, &dc)?;
        assert_eq!(loaded.sets(), res.shield.sets());
        println!("  saved and reloaded {}", path.display());
    }

    let too_much = synthesize(&dc, None, 1.5, SynthesisMode::PolicyFree, &opts).unwrap_err();
    println!("delta 1.5: {too_much}");
    Ok(())
}
