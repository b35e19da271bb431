//! Batches of episodes, their line-delimited logs, and aggregation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{run_numbered, EpisodeSummary, Outcome, SimError, SimSetup, TickRecord};
use crate::mdp::Policy;
use crate::stats::{wilson, Interval, Summary, Z95};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub episodes: u64,
    /// Episode `i` uses seed `seed_base + i`.
    pub seed_base: u64,
    /// Also log every tick, not just episode summaries.
    pub log_ticks: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { episodes: 1000, seed_base: 0, log_ticks: false }
    }
}

/// One line of a simulation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum LogRecord {
    Tick {
        episode: u64,
        #[serde(flatten)]
        tick: TickRecord,
    },
    Episode(EpisodeSummary),
    Summary(AggregateReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub episodes: u64,
    pub outcomes: BTreeMap<Outcome, u64>,
    pub safe: u64,
    pub safety_rate: f64,
    /// Wilson 95% interval of the safety rate.
    pub safety_interval: Interval,
    pub win_interval: Interval,
    pub draw_interval: Interval,
    pub steps: Summary,
    pub min_separation: Summary,
    pub mean_separation: Summary,
    pub interventions: Summary,
}

impl AggregateReport {
    pub fn count(&self, outcome: Outcome) -> u64 {
        self.outcomes.get(&outcome).copied().unwrap_or(0)
    }

    pub fn rate(&self, outcome: Outcome) -> f64 {
        self.count(outcome) as f64 / self.episodes.max(1) as f64
    }
}

/// Folds episode summaries into a report. Order-insensitive up to
/// floating-point summation.
pub fn aggregate<'a>(summaries: impl IntoIterator<Item = &'a EpisodeSummary>) -> AggregateReport {
    let mut outcomes = BTreeMap::new();
    let (mut steps, mut min_sep, mut mean_sep, mut interventions) =
        (Summary::default(), Summary::default(), Summary::default(), Summary::default());
    let mut n = 0u64;
    let mut safe = 0u64;
    for s in summaries {
        n += 1;
        *outcomes.entry(s.outcome).or_insert(0) += 1;
        if s.outcome.is_safe() {
            safe += 1;
        }
        steps.push(s.steps as f64);
        min_sep.push(s.min_separation);
        mean_sep.push(s.mean_separation);
        interventions.push(s.interventions as f64);
    }
    let count = |o: Outcome| outcomes.get(&o).copied().unwrap_or(0);
    AggregateReport {
        episodes: n,
        safe,
        safety_rate: safe as f64 / n.max(1) as f64,
        safety_interval: wilson(safe, n, Z95),
        win_interval: wilson(count(Outcome::Win), n, Z95),
        draw_interval: wilson(count(Outcome::Draw) + count(Outcome::Safe), n, Z95),
        outcomes,
        steps,
        min_separation: min_sep,
        mean_separation: mean_sep,
        interventions,
    }
}

fn write_record(out: &mut dyn Write, record: &LogRecord) -> Result<(), SimError> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Runs `opts.episodes` episodes and streams their records to `log`, ending
/// with a summary line. The report is aggregated from the logged episode
/// summaries.
pub fn run_batch(
    setup: &SimSetup,
    controller: &Policy,
    opts: &BatchOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<AggregateReport, SimError> {
    if opts.episodes == 0 {
        return Err(SimError::BadSetup("a batch needs at least one episode".into()));
    }
    let mut summaries = Vec::with_capacity(opts.episodes as usize);
    for i in 0..opts.episodes {
        let result = run_numbered(setup, controller, i, opts.seed_base.wrapping_add(i))?;
        if let Some(out) = log.as_deref_mut() {
            if opts.log_ticks {
                for tick in &result.records {
                    write_record(out, &LogRecord::Tick { episode: i, tick: tick.clone() })?;
                }
            }
            write_record(out, &LogRecord::Episode(result.summary.clone()))?;
        }
        summaries.push(result.summary);
    }
    let report = aggregate(&summaries);
    if let Some(out) = log {
        write_record(out, &LogRecord::Summary(report.clone()))?;
        out.flush()?;
    }
    Ok(report)
}

/// Episode summaries of a log, in file order.
pub fn read_log<R: BufRead>(input: R) -> Result<Vec<EpisodeSummary>, SimError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = serde_json::from_str(&line)
            .map_err(|e| SimError::Log { line: i + 1, message: e.to_string() })?;
        if let LogRecord::Episode(s) = record {
            out.push(s);
        }
    }
    Ok(out)
}

pub fn aggregate_log(path: &std::path::Path) -> Result<AggregateReport, SimError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(aggregate(&read_log(file)?))
}
