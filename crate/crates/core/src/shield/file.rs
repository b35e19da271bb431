//! Text persistence for shields.
//!
//! ```text
//! shield <states> <actions>
//! epsilon <ε>
//! delta <δ | ->
//! digest <hex | ->
//! mode <with-policy | policy-free | ->
//! achieved <value | ->
//! 10110        one line per state, action 0 first, 1 = allowed
//! ```

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Shield, ShieldError, SynthesisMode};
use crate::mdp::{ActionSet, Model};

pub fn write_shield<W: Write>(shield: &Shield, out: W) -> Result<(), ShieldError> {
    let mut w = BufWriter::new(out);
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    writeln!(w, "shield {} {}", shield.state_count(), shield.action_count())?;
    writeln!(w, "epsilon {}", shield.epsilon)?;
    writeln!(w, "delta {}", opt(shield.delta.map(|d| d.to_string())))?;
    writeln!(w, "digest {}", opt(shield.model_digest.clone()))?;
    writeln!(w, "mode {}", opt(shield.mode.map(|m| m.to_string())))?;
    writeln!(w, "achieved {}", opt(shield.achieved.map(|a| a.to_string())))?;
    let mut line = String::with_capacity(shield.action_count() + 1);
    for set in shield.sets() {
        line.clear();
        for a in 0..shield.action_count() {
            line.push(if set.contains(a) { '1' } else { '0' });
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> ShieldError {
    ShieldError::Parse { line, message: message.into() }
}

pub fn read_shield<R: Read>(input: R) -> Result<Shield, ShieldError> {
    let mut lines = BufReader::new(input).lines().enumerate();
    let mut next = |key: &str| -> Result<(usize, String), ShieldError> {
        let (i, line) = lines.next().ok_or_else(|| parse_err(0, format!("missing '{key}' line")))?;
        let line = line?;
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| parse_err(i + 1, format!("expected '{key} ...'")))?;
        Ok((i + 1, rest.trim().to_string()))
    };
    let (ln, header) = next("shield")?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(ln, format!("bad count '{t}'"))))
        .collect::<Result<_, _>>()?;
    let [states, actions] = dims[..] else {
        return Err(parse_err(ln, "expected 'shield <states> <actions>'"));
    };
    if actions == 0 || actions > 64 {
        return Err(parse_err(ln, format!("unsupported action count {actions}")));
    }
    let real = |(ln, v): (usize, String)| -> Result<Option<f64>, ShieldError> {
        if v == "-" {
            return Ok(None);
        }
        v.parse::<f64>().map(Some).map_err(|_| parse_err(ln, format!("bad number '{v}'")))
    };
    let (ln, eps) = next("epsilon")?;
    let epsilon = real((ln, eps))?.ok_or_else(|| parse_err(ln, "epsilon is required"))?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(ShieldError::BadEpsilon(epsilon));
    }
    let delta = real(next("delta")?)?;
    let (_, digest) = next("digest")?;
    let (ln, mode) = next("mode")?;
    let mode = match mode.as_str() {
        "-" => None,
        m => Some(m.parse::<SynthesisMode>().map_err(|e| parse_err(ln, e))?),
    };
    let achieved = real(next("achieved")?)?;
    drop(next);

    let mut allowed = Vec::with_capacity(states);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bits = line.trim();
        if bits.len() != actions || !bits.bytes().all(|b| b == b'0' || b == b'1') {
            return Err(parse_err(i + 1, format!("expected a {actions}-digit 0/1 mask")));
        }
        let set: ActionSet = bits.bytes().enumerate().filter(|(_, b)| *b == b'1').map(|(a, _)| a).collect();
        if set.is_empty() {
            return Err(parse_err(i + 1, "empty allowed set"));
        }
        allowed.push(set);
    }
    if allowed.len() != states {
        return Err(parse_err(0, format!("header declares {states} states, found {}", allowed.len())));
    }
    let mut shield = Shield::from_sets(epsilon, actions, allowed);
    shield.delta = delta;
    shield.model_digest = (digest != "-").then_some(digest);
    shield.mode = mode;
    shield.achieved = achieved;
    Ok(shield)
}

pub fn save_shield(shield: &Shield, path: &Path) -> Result<(), ShieldError> {
    write_shield(shield, std::fs::File::create(path)?)
}

/// Reads a shield and checks it was built for `model`.
pub fn load_shield<M: Model + ?Sized>(path: &Path, model: &M) -> Result<Shield, ShieldError> {
    let shield = read_shield(std::fs::File::open(path)?)?;
    if let Some(found) = model.model_digest() {
        shield.check_digest(&found)?;
    }
    if shield.state_count() != model.state_count() {
        return Err(ShieldError::StateCountMismatch {
            shield: shield.state_count(),
            model: model.state_count(),
        });
    }
    for (s, set) in shield.sets().iter().enumerate() {
        if !set.is_subset(model.allowed(s)) {
            return Err(parse_err(7 + s, format!("state {s} allows unavailable actions")));
        }
    }
    Ok(shield)
}
