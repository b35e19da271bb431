//! Starts a teleop server in-process and drives one turn-based session as
//! a scripted operator who always requests "accelerate", printing each
//! frame the operator would see.

use std::sync::Arc;

use dcshield::dcmdp::build_constant_delay;
use dcshield::envs::{Env, EnvKind};
use dcshield::mdp::{compute_q, compute_safety_values, SolveOptions, ValueMode};
use dcshield::shield::build_shield;
use dcshield::teleop::{Catalog, Channel, Message, SessionMode, SessionStatus, TeleopClient, TeleopServer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = Env::build(EnvKind::CarFollowing)?;
    let tau = 2;
    let dc = build_constant_delay(&env.mdp, tau, env.meta.safe_action)?;
    let v = compute_safety_values(&dc, ValueMode::Max, None, &SolveOptions::default())?;
    let shield = build_shield(&dc, &v, &compute_q(&dc, &v), 0.99)?;
    let accelerate = env.meta.action_names.len() - 1;

    let mut catalog = Catalog::new();
    catalog.add_env("car", env).add_channel("const2", Channel::Constant { tau }).add_shield("eps99", shield);
    let (addr, _server) = TeleopServer::bind("127.0.0.1:0", Arc::new(catalog))?.spawn()?;
    println!("serving on {addr}");

    let mut client = TeleopClient::connect(addr)?;
    let create = Message::Create {
        env: "car".into(),
        channel: "const2".into(),
        shield: "eps99".into(),
        mode: SessionMode::TurnBased,
        seed: Some(1),
        horizon: Some(20),
    };
    let Message::Created { session, frame, .. } = client.request(&create)? else {
        return Err("expected a created reply".into());
    };
    println!("session {session}: tick {} delay {} observed {:?}", frame.tick, frame.delay, frame.observed);
    loop {
        match client.request(&Message::Act { session, action: accelerate })? {
            Message::Frame(f) => {
                let last = f.last.expect("a step was taken");
                let allowed: Vec<usize> = f.actions.iter().filter(|a| a.allowed).map(|a| a.action).collect();
                println!(
                    "tick {:>2} observed {:?} executed {}{} next allowed {allowed:?}",
                    f.tick,
                    f.observed,
                    last.executed,
                    if last.overridden { " (overridden)" } else { "" }
                );
                if f.status != SessionStatus::Live {
                    if let Message::Terminated { summary, transcript, .. } = client.recv()? {
                        println!("{:?} after {} ticks, {} transcript records", summary.outcome, summary.steps, transcript.len());
                    }
                    break;
                }
            }
            Message::Error { message, .. } => return Err(message.into()),
            other => return Err(format!("unexpected reply {other:?}").into()),
        }
    }
    Ok(())
}
