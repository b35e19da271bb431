//! Builds the random- and constant-delay products of a four-state toy MDP
//! and walks through a few of their states and successor rows.

use dcshield::dcmdp::{build_constant_delay, build_random_delay};
use dcshield::delay::DelayModel;
use dcshield::mdp::{MdpBuilder, Model};

fn main() -> Result<(), Box<dyn std::error::Error>> {
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
    let mdp = b.build()?;

    let delays = DelayModel::mostly_zero(2, 0.3, 0.2)?;
    println!("delay model:\n{}", delays.to_text());
    let random = build_random_delay(&mdp, &delays)?;
    let constant = build_constant_delay(&mdp, 2, 0)?;
    println!("random product: {} states, digest {}", random.state_count(), &random.digest()[..16]);
    println!("constant product: {} states, digest {}", constant.state_count(), &constant.digest()[..16]);

    for x in 0..4.min(random.state_count()) {
        let state = random.decode(x)?;
        println!("\nrandom state {x} = {state}");
        for a in random.allowed(x).iter() {
            let row: Vec<String> =
                random.successor_states(x, a).iter().map(|(y, p)| format!("{p:.3} -> {y}")).collect();
            println!("  action {a}: {}", row.join(", "));
        }
    }
    let x = constant.initial_buffer_state(0).expect("initial state is enumerated");
    println!("\nconstant initial state {x} = {}", constant.decode(x)?);
    Ok(())
}
