//! Estimates a delay transition matrix from latency traces: first the
//! seven-sample hand example, then a synthetic bursty trace binned at 50 ms.

use dcshield::delay::{estimate_from_traces, EstimateOptions, LatencyTrace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let hand = LatencyTrace::from_delays(&[0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.0]);
    let opts = EstimateOptions { bin_width_ms: 1, tau_max: Some(2), smoothing: None };
    let est = estimate_from_traces(&[hand], &opts)?;
    println!("hand trace, {} transitions:", est.transitions);
    print!("{}", est.model.to_text());

    // Latency that mostly sits near 20 ms with occasional congestion bursts.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut congested = false;
    let delays: Vec<f64> = (0..5_000)
        .map(|_| {
            congested = if congested { rng.gen_bool(0.7) } else { rng.gen_bool(0.05) };
            if congested {
                rng.gen_range(60.0..220.0)
            } else {
                rng.gen_range(5.0..45.0)
            }
        })
        .collect();
    let trace = LatencyTrace::from_delays(&delays);
    let opts = EstimateOptions { bin_width_ms: 50, tau_max: Some(3), smoothing: Some(0.5) };
    let est = estimate_from_traces(&[trace], &opts)?;
    println!(
        "\nsynthetic trace, {} transitions, {} clamped jumps, empty rows {:?}:",
        est.transitions, est.clamped, est.fallback_rows
    );
    print!("{}", est.model.to_text());
    Ok(())
}
