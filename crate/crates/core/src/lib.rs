//! Safety verification and shield synthesis for robots controlled over
//! links with stochastic communication delay.
//!
//! The pipeline: describe the delay-free system as a [`mdp::BasicMdp`],
//! describe the link as a [`delay::DelayModel`] (or just a maximum delay),
//! build the delayed-communication product with [`dcmdp`], verify it with
//! the value-iteration engine in [`mdp::solve`], synthesize a minimally
//! intrusive ε-shield with [`shield::synthesize`], and check the guarantee in
//! closed loop with [`sim`]. [`teleop`] serves the same loop to a human
//! operator.

pub mod dcmdp;
pub mod delay;
pub mod digest;
pub mod envs;
pub mod mdp;
pub mod shield;
pub mod sim;
pub mod stats;
pub mod teleop;

pub mod cli;
