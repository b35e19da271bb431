//! Delay transition models over `{0, ..., tau_max}` decision steps, and
//! their estimation from latency traces.
//!
//! The delay can grow by at most one step per tick (no action arrives), so
//! `p[tau][tau'] = 0` whenever `tau' > tau + 1`.

use std::fmt;
use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::STOCHASTIC_TOL;

pub const DEFAULT_BIN_WIDTH_MS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    tau_max: usize,
    /// `p[tau][tau']` is the probability of moving from delay `tau` to `tau'`.
    p: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DelayIssue {
    Shape { rows: usize, expected: usize },
    RowSum { row: usize, sum: f64 },
    ForbiddenJump { from: usize, to: usize, p: f64 },
    OutOfRange { row: usize, col: usize, p: f64 },
}

impl fmt::Display for DelayIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DelayIssue::Shape { rows, expected } => {
                write!(f, "matrix shape: row {rows} should have {expected} entries")
            }
            DelayIssue::RowSum { row, sum } => write!(f, "row {row} sums to {sum}"),
            DelayIssue::ForbiddenJump { from, to, p } => {
                write!(f, "forbidden jump {from}->{to} (p = {p})")
            }
            DelayIssue::OutOfRange { row, col, p } => {
                write!(f, "entry ({row},{col}) = {p} outside [0,1]")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DelayReport {
    pub issues: Vec<DelayIssue>,
}

impl DelayReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for DelayReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.issues {
            writeln!(f, "  {i}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DelayError {
    #[error("invalid delay model:\n{0}")]
    Invalid(DelayReport),
    #[error("no data: need at least one trace with two or more samples")]
    NoData,
    #[error("malformed trace {trace} at sample {sample}: {reason}")]
    MalformedTrace { trace: usize, sample: usize, reason: String },
    #[error("bin width must be positive")]
    BadBinWidth,
    #[error("smoothing must be non-negative and finite, got {0}")]
    BadSmoothing(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl DelayModel {
    pub fn new(p: Vec<Vec<f64>>) -> Result<Self, DelayError> {
        let model = Self::from_matrix_unchecked(p);
        let report = model.validate();
        if report.is_empty() {
            Ok(model)
        } else {
            Err(DelayError::Invalid(report))
        }
    }

    /// Wraps a square matrix without checking it; see [`DelayModel::validate`].
    pub fn from_matrix_unchecked(p: Vec<Vec<f64>>) -> Self {
        DelayModel { tau_max: p.len().saturating_sub(1), p }
    }

    /// A link that never delays.
    pub fn zero() -> Self {
        DelayModel { tau_max: 0, p: vec![vec![1.0]] }
    }

    /// Delay mostly 0: from every delay `k` the delay grows with probability
    /// `p_up` (when `k < tau_max`), moves to each of `1..=k` with total
    /// probability `p_hold`, and otherwise resets to 0.
    pub fn mostly_zero(tau_max: usize, p_up: f64, p_hold: f64) -> Result<Self, DelayError> {
        let mut p = vec![vec![0.0; tau_max + 1]; tau_max + 1];
        for k in 0..=tau_max {
            let up = if k < tau_max { p_up } else { 0.0 };
            let hold = if k >= 1 { p_hold } else { 0.0 };
            if k < tau_max {
                p[k][k + 1] = up;
            }
            for t in 1..=k {
                p[k][t] = hold / k as f64;
            }
            p[k][0] = 1.0 - up - hold;
        }
        Self::new(p)
    }

    pub fn tau_max(&self) -> usize {
        self.tau_max
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.p[from][to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.p[from]
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.p
    }

    /// Row sums, structural zeros, and entry ranges.
    pub fn validate(&self) -> DelayReport {
        let mut issues = Vec::new();
        let n = self.p.len();
        for (i, row) in self.p.iter().enumerate() {
            if row.len() != n {
                issues.push(DelayIssue::Shape { rows: i, expected: n });
                continue;
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) || v.is_nan() {
                    issues.push(DelayIssue::OutOfRange { row: i, col: j, p: v });
                }
                if j > i + 1 && v != 0.0 {
                    issues.push(DelayIssue::ForbiddenJump { from: i, to: j, p: v });
                }
                sum += v;
            }
            if (sum - 1.0).abs() >= STOCHASTIC_TOL {
                issues.push(DelayIssue::RowSum { row: i, sum });
            }
        }
        DelayReport { issues }
    }

    /// True when every allowed cell (`tau' <= tau + 1`) is positive.
    pub fn has_full_support(&self) -> bool {
        (0..=self.tau_max).all(|i| (0..=self.tau_max.min(i + 1)).all(|j| self.p[i][j] > 0.0))
    }

    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "delay_model {}", self.tau_max)?;
        for row in &self.p {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", cells.join(" "))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("vec write");
        String::from_utf8(buf).expect("ascii")
    }

    /// Parses the text produced by [`DelayModel::write`] and validates it.
    pub fn read<R: BufRead>(input: R) -> Result<Self, DelayError> {
        let mut tau_max = None;
        let mut rows = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let text = line.split('#').next().unwrap_or("").trim();
            if text.is_empty() {
                continue;
            }
            let err = |message: String| DelayError::Parse { line: i + 1, message };
            match tau_max {
                None => {
                    let mut f = text.split_whitespace();
                    if f.next() != Some("delay_model") {
                        return Err(err("expected 'delay_model <tau_max>' header".into()));
                    }
                    let t = f
                        .next()
                        .and_then(|t| t.parse::<usize>().ok())
                        .ok_or_else(|| err("bad tau_max".into()))?;
                    tau_max = Some(t);
                }
                Some(t) => {
                    let row: Result<Vec<f64>, _> =
                        text.split_whitespace().map(|v| v.parse::<f64>()).collect();
                    let row = row.map_err(|e| err(format!("bad number: {e}")))?;
                    if row.len() != t + 1 {
                        return Err(err(format!("expected {} entries, got {}", t + 1, row.len())));
                    }
                    rows.push(row);
                }
            }
        }
        let Some(t) = tau_max else {
            return Err(DelayError::Parse { line: 0, message: "empty file".into() });
        };
        if rows.len() != t + 1 {
            return Err(DelayError::Parse {
                line: 0,
                message: format!("expected {} rows, got {}", t + 1, rows.len()),
            });
        }
        Self::new(rows)
    }

    pub fn from_text(text: &str) -> Result<Self, DelayError> {
        Self::read(text.as_bytes())
    }
}

/// One measured latency sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub timestamp_ms: f64,
    pub delay_ms: f64,
}

/// Time-ordered latency measurements from one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyTrace {
    pub samples: Vec<LatencySample>,
}

impl LatencyTrace {
    pub fn new(samples: Vec<LatencySample>) -> Self {
        LatencyTrace { samples }
    }

    /// Trace with unit-spaced timestamps.
    pub fn from_delays(delays_ms: &[f64]) -> Self {
        LatencyTrace {
            samples: delays_ms
                .iter()
                .enumerate()
                .map(|(i, &d)| LatencySample { timestamp_ms: i as f64, delay_ms: d })
                .collect(),
        }
    }

    fn check(&self, trace: usize) -> Result<(), DelayError> {
        let mut prev = f64::NEG_INFINITY;
        for (i, s) in self.samples.iter().enumerate() {
            let bad = |reason: &str| DelayError::MalformedTrace {
                trace,
                sample: i,
                reason: reason.into(),
            };
            if !(s.delay_ms >= 0.0) || !s.delay_ms.is_finite() {
                return Err(bad("negative or non-finite delay"));
            }
            if !(s.timestamp_ms > prev) || !s.timestamp_ms.is_finite() {
                return Err(bad("timestamps must be strictly increasing"));
            }
            prev = s.timestamp_ms;
        }
        Ok(())
    }

    /// Reads `timestamp_ms,delay_ms` CSV (header row required).
    pub fn read_csv<R: Read>(input: R) -> Result<Self, DelayError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
        let headers = reader.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "timestamp_ms" || &headers[1] != "delay_ms" {
            return Err(DelayError::Parse {
                line: 1,
                message: "expected header 'timestamp_ms,delay_ms'".into(),
            });
        }
        let mut samples = Vec::new();
        for record in reader.deserialize() {
            let sample: LatencySample = record?;
            samples.push(sample);
        }
        let trace = LatencyTrace { samples };
        trace.check(0)?;
        Ok(trace)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DelayError> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.samples {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub bin_width_ms: u64,
    /// Defaults to the highest observed bin.
    pub tau_max: Option<usize>,
    /// Additive smoothing over the allowed cells of every row.
    pub smoothing: Option<f64>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions { bin_width_ms: DEFAULT_BIN_WIDTH_MS, tau_max: None, smoothing: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub model: DelayModel,
    /// Observed transitions landing above `tau + 1`, reassigned to `tau + 1`.
    pub clamped: usize,
    /// Consecutive-sample pairs counted.
    pub transitions: usize,
    /// Rows with no observations, filled with the deterministic fallback.
    pub fallback_rows: Vec<usize>,
}

/// Counts binned delay transitions across traces and normalizes them.
///
/// Pairs never straddle two traces. Jumps above `tau + 1` are clamped to
/// `tau + 1`; unobserved rows fall back to `P(min(tau+1, tau_max) | tau) = 1`.
pub fn estimate_from_traces(
    traces: &[LatencyTrace],
    opts: &EstimateOptions,
) -> Result<Estimate, DelayError> {
    if opts.bin_width_ms == 0 {
        return Err(DelayError::BadBinWidth);
    }
    if let Some(a) = opts.smoothing {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(DelayError::BadSmoothing(a));
        }
    }
    if !traces.iter().any(|t| t.samples.len() >= 2) {
        return Err(DelayError::NoData);
    }
    for (i, t) in traces.iter().enumerate() {
        t.check(i)?;
    }
    let width = opts.bin_width_ms as f64;
    let raw_bin = |d: f64| (d / width).floor() as usize;
    let tau_max = opts.tau_max.unwrap_or_else(|| {
        traces
            .iter()
            .flat_map(|t| t.samples.iter().map(|s| raw_bin(s.delay_ms)))
            .max()
            .unwrap_or(0)
    });
    let bin = |d: f64| raw_bin(d).min(tau_max);

    let n = tau_max + 1;
    let mut counts = vec![vec![0.0f64; n]; n];
    let mut clamped = 0;
    let mut transitions = 0;
    for trace in traces {
        for pair in trace.samples.windows(2) {
            let from = bin(pair[0].delay_ms);
            let mut to = bin(pair[1].delay_ms);
            if to > from + 1 {
                to = from + 1;
                clamped += 1;
            }
            counts[from][to] += 1.0;
            transitions += 1;
        }
    }

    let mut fallback_rows = Vec::new();
    let mut p = vec![vec![0.0; n]; n];
    for k in 0..n {
        let allowed = (k + 1).min(tau_max);
        if let Some(alpha) = opts.smoothing {
            for cell in counts[k].iter_mut().take(allowed + 1) {
                *cell += alpha;
            }
        }
        let total: f64 = counts[k].iter().sum();
        if total > 0.0 {
            for j in 0..n {
                p[k][j] = counts[k][j] / total;
            }
        } else {
            p[k][allowed] = 1.0;
            fallback_rows.push(k);
        }
    }
    let model = DelayModel::new(p)?;
    Ok(Estimate { model, clamped, transitions, fallback_rows })
}
