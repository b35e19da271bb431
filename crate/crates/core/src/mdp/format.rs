//! Plain-text MDP files.
//!
//! ```text
//! # comment
//! mdp <state_count> <action_count>
//! init <state> <probability>
//! label <name> <state> <state> ...
//! t <state> <action> <successor> <probability>
//! ```
//!
//! The `mdp` header comes first; the other lines may appear in any order and
//! repeat (`label` lines with the same name append). An action is available in
//! a state iff at least one `t` line names it. Probabilities are written with
//! the shortest decimal text that round-trips the `f64`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use super::{BasicMdp, Issue, MdpError, Policy, StateSet};

#[derive(Debug, Clone, PartialEq)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("rejected MDP file:\n{}", .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Rejected(Vec<LineIssue>),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Writes `mdp` in canonical order.
pub fn write_mdp<W: Write>(mdp: &BasicMdp, mut out: W) -> io::Result<()> {
    writeln!(out, "mdp {} {}", mdp.state_count(), mdp.action_count())?;
    for &(s, p) in mdp.init() {
        writeln!(out, "init {s} {p}")?;
    }
    for (name, set) in mdp.labels() {
        write!(out, "label {name}")?;
        for s in set.iter() {
            write!(out, " {s}")?;
        }
        writeln!(out)?;
    }
    for s in 0..mdp.state_count() {
        for a in mdp.allowed(s).iter() {
            for (t, p) in mdp.row(s, a) {
                writeln!(out, "t {s} {a} {t} {p}")?;
            }
        }
    }
    Ok(())
}

pub fn to_text(mdp: &BasicMdp) -> String {
    let mut buf = Vec::new();
    write_mdp(mdp, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("ascii output")
}

/// Parses and validates an MDP file; every problem found is reported with
/// the line it came from.
pub fn read_mdp<R: BufRead>(input: R) -> Result<BasicMdp, FormatError> {
    let mut issues = Vec::new();
    let mut header: Option<(usize, usize)> = None;
    let mut init = Vec::new();
    let mut init_lines = Vec::new();
    let mut labels: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut rows: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
    let mut row_line: BTreeMap<(usize, usize), usize> = BTreeMap::new();

    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let mut fields = text.split_whitespace();
        let kind = fields.next().unwrap();
        let rest: Vec<&str> = fields.collect();
        let mut bad = |msg: String| issues.push(LineIssue { line: lineno, message: msg });

        if header.is_none() && kind != "mdp" {
            bad("expected 'mdp <state_count> <action_count>' header first".into());
            return Err(FormatError::Rejected(issues));
        }
        match kind {
            "mdp" => {
                if header.is_some() {
                    bad("duplicate header".into());
                    continue;
                }
                match (rest.len(), parse_usize(rest.first()), parse_usize(rest.get(1))) {
                    (2, Some(n), Some(m)) if n > 0 && m > 0 && m <= 64 => header = Some((n, m)),
                    _ => {
                        bad("header needs positive state_count and action_count (<= 64)".into());
                        return Err(FormatError::Rejected(issues));
                    }
                }
            }
            "init" => {
                let (n, _) = header.unwrap();
                match (rest.len(), parse_usize(rest.first()), parse_prob(rest.get(1))) {
                    (2, Some(s), Some(p)) => {
                        if s >= n {
                            bad(format!("init state {s} out of range"));
                        } else if !(0.0..=1.0).contains(&p) {
                            bad(format!("init probability {p} outside [0,1]"));
                        } else {
                            init.push((s, p));
                            init_lines.push(lineno);
                        }
                    }
                    _ => bad("expected 'init <state> <probability>'".into()),
                }
            }
            "label" => {
                let (n, _) = header.unwrap();
                let Some(name) = rest.first() else {
                    bad("label needs a name".into());
                    continue;
                };
                let entry = labels.entry(name.to_string()).or_default();
                for tok in &rest[1..] {
                    match tok.parse::<usize>() {
                        Ok(s) if s < n => entry.push(s),
                        Ok(s) => bad(format!("label '{name}' names state {s} out of range")),
                        Err(_) => bad(format!("bad state index '{tok}'")),
                    }
                }
            }
            "t" => {
                let (n, m) = header.unwrap();
                let parsed = (
                    rest.len(),
                    parse_usize(rest.first()),
                    parse_usize(rest.get(1)),
                    parse_usize(rest.get(2)),
                    parse_prob(rest.get(3)),
                );
                match parsed {
                    (4, Some(s), Some(a), Some(t), Some(p)) => {
                        if s >= n {
                            bad(format!("state {s} out of range"));
                        } else if a >= m {
                            bad(format!("action {a} out of range"));
                        } else if t >= n {
                            bad(format!("dangling successor {t}"));
                        } else if !(0.0..=1.0).contains(&p) {
                            bad(format!("probability {p} outside [0,1]"));
                        } else {
                            rows.entry((s, a)).or_default().push((t, p));
                            row_line.entry((s, a)).or_insert(lineno);
                        }
                    }
                    _ => bad("expected 't <state> <action> <successor> <probability>'".into()),
                }
            }
            other => bad(format!("unknown record '{other}'")),
        }
    }

    let Some((n, m)) = header else {
        issues.push(LineIssue { line: 0, message: "empty file".into() });
        return Err(FormatError::Rejected(issues));
    };
    if !issues.is_empty() {
        return Err(FormatError::Rejected(issues));
    }
    let labels = labels
        .into_iter()
        .map(|(k, v)| (k, StateSet::from_indices(n, v)))
        .collect();
    let mdp = BasicMdp::from_rows(n, m, rows, init, labels)?;
    let report = mdp.validate();
    if report.is_empty() {
        return Ok(mdp);
    }
    let first_init_line = init_lines.first().copied().unwrap_or(0);
    let issues = report
        .issues
        .into_iter()
        .map(|issue| {
            let line = match &issue {
                Issue::RowSum { state, action, .. } => {
                    row_line.get(&(*state, *action)).copied().unwrap_or(0)
                }
                Issue::InitSum { .. } => first_init_line,
                _ => 0,
            };
            LineIssue { line, message: issue.to_string() }
        })
        .collect();
    Err(FormatError::Rejected(issues))
}

pub fn from_text(text: &str) -> Result<BasicMdp, FormatError> {
    read_mdp(text.as_bytes())
}

fn parse_usize(tok: Option<&&str>) -> Option<usize> {
    tok.and_then(|t| t.parse().ok())
}

fn parse_prob(tok: Option<&&str>) -> Option<f64> {
    tok.and_then(|t| t.parse::<f64>().ok()).filter(|p| p.is_finite())
}

/// Writes a stationary policy: a `policy <state_count>` header, then the
/// action of each state on its own line.
pub fn write_policy<W: Write>(policy: &Policy, mut out: W) -> io::Result<()> {
    writeln!(out, "policy {}", policy.len())?;
    for a in policy.actions() {
        writeln!(out, "{a}")?;
    }
    Ok(())
}

/// Reads a policy file; the actions still need checking against a model
/// with [`Policy::new`].
pub fn read_policy<R: BufRead>(input: R) -> Result<Vec<usize>, FormatError> {
    let reject = |line: usize, message: String| FormatError::Rejected(vec![LineIssue { line, message }]);
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut expected = None;
    let mut actions = Vec::new();
    for (n, line) in &mut lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match expected {
            None => {
                let count = line
                    .strip_prefix("policy ")
                    .and_then(|c| c.trim().parse::<usize>().ok())
                    .ok_or_else(|| reject(n, "expected 'policy <state_count>'".into()))?;
                expected = Some(count);
            }
            Some(_) => actions.push(line.parse::<usize>().map_err(|_| reject(n, format!("bad action '{line}'")))?),
        }
    }
    match expected {
        None => Err(reject(1, "missing 'policy' header".into())),
        Some(count) if count != actions.len() => {
            Err(reject(1, format!("header promises {count} states, found {}", actions.len())))
        }
        Some(_) => Ok(actions),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{MdpBuilder, UNSAFE};
    use proptest::prelude::*;

    const SAMPLE: &str = "\
# two states
mdp 2 2
init 0 1
label unsafe 1
t 0 0 0 0.25
t 0 0 1 0.75
t 0 1 0 1
t 1 0 1 1
";

    #[test]
    fn parses_sample() {
        let mdp = from_text(SAMPLE).unwrap();
        assert_eq!(mdp.state_count(), 2);
        assert_eq!(mdp.allowed(0).len(), 2);
        assert_eq!(mdp.allowed(1).len(), 1);
        assert!(mdp.label(UNSAFE).unwrap().contains(1));
        assert_eq!(to_text(&mdp), SAMPLE.lines().skip(1).collect::<Vec<_>>().join("\n") + "\n");
    }

    #[test]
    fn row_sum_violation_cites_line() {
        let text = "mdp 2 1\ninit 0 1\nt 0 0 0 0.5\nt 0 0 1 0.6\nt 1 0 1 1\n";
        let Err(FormatError::Rejected(issues)) = from_text(text) else { panic!() };
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].line, 3);
        assert!(issues[0].message.contains("row sum"));
    }

    #[test]
    fn dangling_successor_cites_line() {
        let text = "mdp 2 1\ninit 0 1\nt 0 0 7 1\nt 1 0 1 1\n";
        let Err(FormatError::Rejected(issues)) = from_text(text) else { panic!() };
        assert_eq!(issues[0].line, 3);
        assert!(issues[0].message.contains("dangling"));
    }

    #[test]
    fn missing_actions_and_bad_init_rejected() {
        let text = "mdp 2 1\ninit 0 0.5\nt 0 0 0 1\n";
        let Err(FormatError::Rejected(issues)) = from_text(text) else { panic!() };
        let msgs: Vec<_> = issues.iter().map(|i| i.message.clone()).collect();
        assert!(msgs.iter().any(|m| m.contains("no available action")), "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("init sums")), "{msgs:?}");
        assert!(issues.iter().any(|i| i.line == 2));
    }

    #[test]
    fn header_must_come_first() {
        assert!(matches!(from_text("t 0 0 0 1\n"), Err(FormatError::Rejected(_))));
        assert!(matches!(from_text("mdp x 1\n"), Err(FormatError::Rejected(_))));
    }

    #[test]
    fn policy_files_round_trip_and_reject_bad_counts() {
        let text = "mdp 3 2\ninit 0 1\nt 0 0 1 1\nt 0 1 2 1\nt 1 1 1 1\nt 2 0 2 1\n";
        let mdp = from_text(text).unwrap();
        let policy = Policy::new(&mdp, vec![1, 1, 0]).unwrap();
        let mut buf = Vec::new();
        write_policy(&policy, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "policy 3\n1\n1\n0\n");
        assert_eq!(read_policy(&buf[..]).unwrap(), vec![1, 1, 0]);
        assert!(read_policy("policy 2\n1\n".as_bytes()).is_err());
        assert!(read_policy("1\n2\n".as_bytes()).is_err());
        let Err(FormatError::Rejected(issues)) = read_policy("policy 2\n1\nx\n".as_bytes()) else { panic!() };
        assert_eq!(issues[0].line, 3);
    }

    fn arb_mdp() -> impl Strategy<Value = BasicMdp> {
        (1usize..6, 1usize..4).prop_flat_map(|(n, m)| {
            let rows = prop::collection::vec(
                prop::collection::vec((0..n, 1u32..1000), 1..4),
                n * m,
            );
            (Just(n), Just(m), rows, 0..n)
        })
        .prop_map(|(n, m, rows, s0)| {
            let mut b = MdpBuilder::new(n, m);
            for (k, row) in rows.into_iter().enumerate() {
                let total: u32 = row.iter().map(|(_, w)| w).sum();
                for (t, w) in row {
                    b.transition(k / m, k % m, t, w as f64 / total as f64);
                }
            }
            b.init(vec![(s0, 1.0)]).label(UNSAFE, [n - 1]);
            // weights normalized per row may miss 1 by an ulp; still within tolerance
            b.build().unwrap()
        })
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(mdp in arb_mdp()) {
            let text = to_text(&mdp);
            let back = from_text(&text).unwrap();
            prop_assert_eq!(to_text(&back), text);
            prop_assert_eq!(back, mdp);
        }
    }
}
