//! The delayed-communication MDP.
//!
//! A state `(s, buffer, k)` holds the latest observed base state `s`, the
//! `k` actions issued since that observation (padded to `tau_max` entries
//! with placeholders), and the current delay `k`. Under a random-delay link
//! the delay follows a [`DelayModel`]; under a constant-delay link it is
//! fixed at `tau_max` and the buffer is always full.
//!
//! States are enumerated by forward breadth-first search with successors
//! expanded in a canonical order, so a build is a pure function of its
//! inputs. Rows are never stored: one-step expectations are evaluated in
//! bulk (see [`Model::expectations`]) and explicit rows are produced on
//! demand by [`Model::successors`]. Small products can be converted to a
//! [`BasicMdp`] with [`DcMdp::to_basic_mdp`].

mod backup;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::{DelayModel, DelayReport};
use crate::digest::{mdp_digest, sha256_hex};
use crate::mdp::{ActionSet, BasicMdp, MdpError, Model, Policy, StateSet};

/// Dense index tables larger than this many entries are refused.
pub const MAX_TABLE_ENTRIES: usize = 1 << 31;

#[derive(Debug, Error)]
pub enum DcError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("invalid delay model:\n{0}")]
    Delay(DelayReport),
    #[error("invalid idle action {action}: not available in state {state}")]
    InvalidIdleAction { state: usize, action: usize },
    #[error("state not enumerated: {0}")]
    NotEnumerated(DcState),
    #[error("index {index} out of range ({state_count} states)")]
    IndexOutOfRange { index: usize, state_count: usize },
    #[error("malformed state {state}: {reason}")]
    BadState { state: DcState, reason: String },
    #[error("product too large: {entries} index entries")]
    TooLarge { entries: u128 },
}

/// Where forward enumeration starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Seeds {
    /// States built from the support of the base initial distribution.
    #[default]
    InitSupport,
    /// Every base state, paired with every buffer the initial delay admits:
    /// the empty buffer for a random-delay link, every full buffer for a
    /// constant-delay link.
    AllStates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildOptions {
    pub seeds: Seeds,
}

/// How the link delays actions.
#[derive(Debug, Clone, PartialEq)]
pub enum Link {
    Random(DelayModel),
    Constant { tau: usize, safe_action: usize },
}

impl Link {
    pub fn tau_max(&self) -> usize {
        match self {
            Link::Random(m) => m.tau_max(),
            Link::Constant { tau, .. } => *tau,
        }
    }
}

/// A product state: observed base state, action buffer and delay.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DcState {
    pub base: usize,
    /// Exactly `tau_max` entries; the first `delay` are actions, the rest
    /// placeholders.
    pub buffer: Vec<Option<usize>>,
    pub delay: usize,
}

impl DcState {
    pub fn new(base: usize, actions: &[usize], tau_max: usize) -> Self {
        let mut buffer: Vec<Option<usize>> = actions.iter().map(|a| Some(*a)).collect();
        buffer.resize(tau_max.max(actions.len()), None);
        DcState { base, buffer, delay: actions.len() }
    }

    /// The real (non-placeholder) buffered actions.
    pub fn actions(&self) -> Vec<usize> {
        self.buffer.iter().take(self.delay).flatten().copied().collect()
    }
}

impl fmt::Display for DcState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, [", self.base)?;
        for (i, b) in self.buffer.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            match b {
                Some(a) => write!(f, "{a}")?,
                None => write!(f, "_")?,
            }
        }
        write!(f, "], {})", self.delay)
    }
}

/// The product MDP over enumerated reachable states.
#[derive(Debug, Clone)]
pub struct DcMdp {
    base: BasicMdp,
    link: Link,
    seeds: Seeds,
    tau_max: usize,
    action_count: usize,
    /// `pow[j] = action_count^j` for `j <= tau_max + 1`.
    pow: Vec<usize>,
    bases: Vec<u32>,
    codes: Vec<u32>,
    delays: Vec<u8>,
    /// Per buffer length `k`, `index[k][s * A^k + code]` is the state index
    /// or `u32::MAX`. A constant-delay product only fills `index[tau_max]`.
    index: Vec<Vec<u32>>,
    /// State indices grouped by delay.
    by_delay: Vec<Vec<u32>>,
    init: Vec<(usize, f64)>,
    labels: BTreeMap<String, StateSet>,
    digest: String,
}

const NONE: u32 = u32::MAX;

/// Sparse distribution propagation with a dense scratch accumulator.
pub(crate) struct Propagator {
    acc: Vec<f64>,
    seen: Vec<bool>,
    touched: Vec<u32>,
}

impl Propagator {
    pub(crate) fn new(state_count: usize) -> Self {
        Propagator { acc: vec![0.0; state_count], seen: vec![false; state_count], touched: Vec::new() }
    }

    /// One step of `dist` under `action` (held in place where unavailable).
    pub(crate) fn step(&mut self, mdp: &BasicMdp, dist: &[(u32, f64)], action: usize) -> Vec<(u32, f64)> {
        for &(s, p) in dist {
            let (targets, probs) = mdp.kernel(s as usize, action);
            for (t, q) in targets.iter().zip(probs) {
                let t = *t as usize;
                if !self.seen[t] {
                    self.seen[t] = true;
                    self.touched.push(t as u32);
                }
                self.acc[t] += p * q;
            }
        }
        self.touched.sort_unstable();
        let mut out = Vec::with_capacity(self.touched.len());
        for &t in &self.touched {
            let v = self.acc[t as usize];
            self.acc[t as usize] = 0.0;
            self.seen[t as usize] = false;
            if v > 0.0 {
                out.push((t, v));
            }
        }
        self.touched.clear();
        out
    }
}

/// Distribution of the base state after applying `actions` from `s`.
pub fn compose_kernel(mdp: &BasicMdp, s: usize, actions: &[usize]) -> Vec<(usize, f64)> {
    let mut prop = Propagator::new(mdp.state_count());
    let mut dist = vec![(s as u32, 1.0)];
    for &a in actions {
        dist = prop.step(mdp, &dist, a);
    }
    dist.into_iter().map(|(t, p)| (t as usize, p)).collect()
}

fn check_inputs(mdp: &BasicMdp) -> Result<(), DcError> {
    mdp.validate().into_result()?;
    if mdp.state_count() >= NONE as usize {
        return Err(DcError::TooLarge { entries: mdp.state_count() as u128 });
    }
    Ok(())
}

fn seed_states(mdp: &BasicMdp, seeds: Seeds) -> Vec<usize> {
    match seeds {
        Seeds::AllStates => (0..mdp.state_count()).collect(),
        Seeds::InitSupport => {
            let mut v: Vec<usize> = mdp.init().iter().filter(|(_, p)| *p > 0.0).map(|(s, _)| *s).collect();
            v.sort_unstable();
            v.dedup();
            v
        }
    }
}

fn powers(a: usize, tau: usize) -> Result<Vec<usize>, DcError> {
    let mut pow = vec![1usize];
    for j in 1..=tau + 1 {
        let next = (pow[j - 1] as u128) * a as u128;
        if next > MAX_TABLE_ENTRIES as u128 {
            return Err(DcError::TooLarge { entries: next });
        }
        pow.push(next as usize);
    }
    Ok(pow)
}

fn table(state_count: usize, width: usize) -> Result<Vec<u32>, DcError> {
    let entries = state_count as u128 * width as u128;
    if entries > MAX_TABLE_ENTRIES as u128 {
        return Err(DcError::TooLarge { entries });
    }
    Ok(vec![NONE; entries as usize])
}

/// Random-delay product, enumerated from the initial distribution's support.
pub fn build_random_delay(mdp: &BasicMdp, delays: &DelayModel) -> Result<DcMdp, DcError> {
    build_random_delay_with(mdp, delays, &BuildOptions::default())
}

pub fn build_random_delay_with(
    mdp: &BasicMdp,
    delays: &DelayModel,
    opts: &BuildOptions,
) -> Result<DcMdp, DcError> {
    check_inputs(mdp)?;
    let report = delays.validate();
    if !report.is_empty() {
        return Err(DcError::Delay(report));
    }
    let tau = delays.tau_max();
    let na = mdp.action_count();
    let n = mdp.state_count();
    let pow = powers(na, tau)?;
    let mut index = Vec::with_capacity(tau + 1);
    for k in 0..=tau {
        index.push(table(n, pow[k])?);
    }
    let mut dc = DcMdp::empty(mdp, Link::Random(delays.clone()), opts.seeds, pow, index);

    for s in seed_states(mdp, opts.seeds) {
        dc.discover(s, 0, 0);
    }
    let mut prop = Propagator::new(n);
    let mut prefix: Vec<Vec<(u32, f64)>> = Vec::with_capacity(tau + 2);
    let mut i = 0;
    while i < dc.bases.len() {
        let s = dc.bases[i] as usize;
        let code = dc.codes[i] as usize;
        let k = dc.delays[i] as usize;
        prefix.clear();
        prefix.push(vec![(s as u32, 1.0)]);
        for j in 0..k {
            let a = dc.buffer_action(code, k, j);
            let next = prop.step(mdp, &prefix[j], a);
            prefix.push(next);
        }
        for a in mdp.allowed(s).iter() {
            let seq = code * na + a;
            for tp in 0..=k {
                if delays.prob(k, tp) <= 0.0 {
                    continue;
                }
                let suffix = seq % dc.pow[tp];
                if tp == 0 {
                    let last = prop.step(mdp, &prefix[k], a);
                    for &(t, _) in &last {
                        dc.discover(t as usize, 0, 0);
                    }
                } else {
                    for j in 0..prefix[k + 1 - tp].len() {
                        let t = prefix[k + 1 - tp][j].0 as usize;
                        dc.discover(t, suffix, tp);
                    }
                }
            }
            if k < tau && delays.prob(k, k + 1) > 0.0 {
                dc.discover(s, seq, k + 1);
            }
        }
        i += 1;
    }
    dc.finish();
    Ok(dc)
}

/// Constant-delay product with every buffer initialized to `safe_action`.
pub fn build_constant_delay(mdp: &BasicMdp, tau_max: usize, safe_action: usize) -> Result<DcMdp, DcError> {
    build_constant_delay_with(mdp, tau_max, safe_action, &BuildOptions::default())
}

pub fn build_constant_delay_with(
    mdp: &BasicMdp,
    tau_max: usize,
    safe_action: usize,
    opts: &BuildOptions,
) -> Result<DcMdp, DcError> {
    check_inputs(mdp)?;
    let seeds = seed_states(mdp, opts.seeds);
    if tau_max > 0 {
        for &s in &seeds {
            if !mdp.allowed(s).contains(safe_action) {
                return Err(DcError::InvalidIdleAction { state: s, action: safe_action });
            }
        }
    }
    let na = mdp.action_count();
    let n = mdp.state_count();
    let pow = powers(na, tau_max)?;
    let mut index: Vec<Vec<u32>> = vec![Vec::new(); tau_max];
    index.push(table(n, pow[tau_max])?);
    let link = Link::Constant { tau: tau_max, safe_action };
    let mut dc = DcMdp::empty(mdp, link, opts.seeds, pow, index);

    let idle_code = (0..tau_max).fold(0, |c, _| c * na + safe_action);
    for &s in &seeds {
        match opts.seeds {
            Seeds::InitSupport => dc.discover(s, idle_code, tau_max),
            Seeds::AllStates => {
                for code in 0..dc.pow[tau_max] {
                    dc.discover(s, code, tau_max);
                }
            }
        }
    }
    let mut prop = Propagator::new(n);
    let mut i = 0;
    while i < dc.bases.len() {
        let s = dc.bases[i] as usize;
        let code = dc.codes[i] as usize;
        for a in mdp.allowed(s).iter() {
            let seq = code * na + a;
            let first = seq / dc.pow[tau_max];
            let next_code = seq % dc.pow[tau_max];
            for (t, _) in prop.step(mdp, &[(s as u32, 1.0)], first) {
                dc.discover(t as usize, next_code, tau_max);
            }
        }
        i += 1;
    }
    dc.finish();
    Ok(dc)
}

impl DcMdp {
    fn empty(mdp: &BasicMdp, link: Link, seeds: Seeds, pow: Vec<usize>, index: Vec<Vec<u32>>) -> Self {
        let tau_max = link.tau_max();
        DcMdp {
            base: mdp.clone(),
            link,
            seeds,
            tau_max,
            action_count: mdp.action_count(),
            pow,
            bases: Vec::new(),
            codes: Vec::new(),
            delays: Vec::new(),
            index,
            by_delay: vec![Vec::new(); tau_max + 1],
            init: Vec::new(),
            labels: BTreeMap::new(),
            digest: String::new(),
        }
    }

    fn discover(&mut self, s: usize, code: usize, k: usize) {
        let slot = &mut self.index[k][s * self.pow[k] + code];
        if *slot == NONE {
            let idx = self.bases.len() as u32;
            *slot = idx;
            self.bases.push(s as u32);
            self.codes.push(code as u32);
            self.delays.push(k as u8);
            self.by_delay[k].push(idx);
        }
    }

    fn finish(&mut self) {
        let start_code = match self.link {
            Link::Random(_) => 0,
            Link::Constant { safe_action, .. } => {
                (0..self.tau_max).fold(0, |c, _| c * self.action_count + safe_action)
            }
        };
        let start_delay = match self.link {
            Link::Random(_) => 0,
            Link::Constant { tau, .. } => tau,
        };
        let mut init = Vec::new();
        for &(s, p) in self.base.init() {
            if p > 0.0 {
                let idx = self.index[start_delay][s * self.pow[start_delay] + start_code];
                if idx != NONE {
                    init.push((idx as usize, p));
                }
            }
        }
        init.sort_by_key(|(x, _)| *x);
        self.init = init;
        let labels: BTreeMap<String, StateSet> = self
            .base
            .labels()
            .iter()
            .map(|(name, set)| (name.clone(), self.lift(set)))
            .collect();
        self.labels = labels;
        self.digest = self.compute_digest();
    }

    fn compute_digest(&self) -> String {
        let mut text = String::from("dcmdp 1\n");
        text += &format!("base {}\n", mdp_digest(&self.base));
        match &self.link {
            Link::Random(m) => {
                text += "link random\n";
                text += &m.to_text();
            }
            Link::Constant { tau, safe_action } => {
                text += &format!("link constant {tau} {safe_action}\n");
            }
        }
        let seeds = match self.seeds {
            Seeds::InitSupport => "init-support",
            Seeds::AllStates => "all-states",
        };
        text += &format!("seeds {seeds}\nstates {}\n", self.bases.len());
        sha256_hex(text.as_bytes())
    }

    /// Lifts a base-state set: a product state belongs iff its observed
    /// base state does.
    pub fn lift(&self, set: &StateSet) -> StateSet {
        StateSet::from_fn(self.bases.len(), |x| set.contains(self.bases[x] as usize))
    }

    /// Recomputes every product label from the base labels.
    pub fn lift_labels(&mut self) {
        self.labels = self.base.labels().iter().map(|(n, s)| (n.clone(), self.lift(s))).collect();
    }

    pub fn base(&self) -> &BasicMdp {
        &self.base
    }

    pub fn link(&self) -> &Link {
        &self.link
    }

    pub fn seeds(&self) -> Seeds {
        self.seeds
    }

    pub fn tau_max(&self) -> usize {
        self.tau_max
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.link, Link::Constant { .. })
    }

    pub fn state_count(&self) -> usize {
        self.bases.len()
    }

    pub fn labels(&self) -> &BTreeMap<String, StateSet> {
        &self.labels
    }

    /// Identifies the product by its inputs: base model, link and seeds.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn base_of(&self, x: usize) -> usize {
        self.bases[x] as usize
    }

    pub fn delay_of(&self, x: usize) -> usize {
        self.delays[x] as usize
    }

    /// Buffered actions of `x`, oldest first.
    pub fn actions_of(&self, x: usize) -> Vec<usize> {
        let k = self.delays[x] as usize;
        let code = self.codes[x] as usize;
        (0..k).map(|j| self.buffer_action(code, k, j)).collect()
    }

    fn buffer_action(&self, code: usize, len: usize, j: usize) -> usize {
        (code / self.pow[len - 1 - j]) % self.action_count
    }

    /// Index of the state observing `base` with `actions` buffered.
    pub fn index_of(&self, base: usize, actions: &[usize]) -> Option<usize> {
        let k = actions.len();
        if k > self.tau_max || base >= self.base.state_count() {
            return None;
        }
        if actions.iter().any(|a| *a >= self.action_count) {
            return None;
        }
        let table = &self.index[k];
        if table.is_empty() {
            return None;
        }
        let code = actions.iter().fold(0, |c, a| c * self.action_count + a);
        match table[base * self.pow[k] + code] {
            NONE => None,
            x => Some(x as usize),
        }
    }

    pub fn encode(&self, state: &DcState) -> Result<usize, DcError> {
        let bad = |reason: &str| DcError::BadState { state: state.clone(), reason: reason.into() };
        if state.buffer.len() != self.tau_max {
            return Err(bad("buffer length differs from tau_max"));
        }
        if state.delay > self.tau_max {
            return Err(bad("delay exceeds tau_max"));
        }
        let (head, tail) = state.buffer.split_at(state.delay);
        if head.iter().any(Option::is_none) || tail.iter().any(Option::is_some) {
            return Err(bad("placeholders must fill exactly the last tau_max - delay entries"));
        }
        self.index_of(state.base, &state.actions()).ok_or_else(|| DcError::NotEnumerated(state.clone()))
    }

    pub fn decode(&self, index: usize) -> Result<DcState, DcError> {
        if index >= self.bases.len() {
            return Err(DcError::IndexOutOfRange { index, state_count: self.bases.len() });
        }
        Ok(DcState::new(self.base_of(index), &self.actions_of(index), self.tau_max))
    }

    /// Explicit successor triples of `(x, a)` in canonical order
    /// (delay, then base state), with their probabilities.
    pub fn successor_states(&self, x: usize, a: usize) -> Vec<(DcState, f64)> {
        self.expand(x, a)
            .into_iter()
            .map(|(y, p)| (self.decode(y).expect("enumerated"), p))
            .collect()
    }

    fn expand(&self, x: usize, a: usize) -> Vec<(usize, f64)> {
        let s = self.bases[x] as usize;
        let k = self.delays[x] as usize;
        let code = self.codes[x] as usize;
        let na = self.action_count;
        let seq = code * na + a;
        let mut prop = Propagator::new(self.base.state_count());
        let mut out = Vec::new();
        let lookup = |t: usize, c: usize, d: usize| -> usize {
            let y = self.index[d][t * self.pow[d] + c];
            assert!(y != NONE, "successor of an enumerated state must be enumerated");
            y as usize
        };
        match &self.link {
            Link::Constant { .. } => {
                let first = seq / self.pow[k];
                let next = seq % self.pow[k];
                for (t, p) in prop.step(&self.base, &[(s as u32, 1.0)], first) {
                    out.push((lookup(t as usize, next, k), p));
                }
            }
            Link::Random(m) => {
                let mut prefix = vec![vec![(s as u32, 1.0)]];
                for j in 0..=k {
                    let act = if j < k { self.buffer_action(code, k, j) } else { a };
                    let next = prop.step(&self.base, &prefix[j], act);
                    prefix.push(next);
                }
                for tp in 0..=k {
                    let w = m.prob(k, tp);
                    if w <= 0.0 {
                        continue;
                    }
                    let suffix = seq % self.pow[tp];
                    for &(t, p) in &prefix[k + 1 - tp] {
                        out.push((lookup(t as usize, suffix, tp), w * p));
                    }
                }
                if k < self.tau_max {
                    let w = m.prob(k, k + 1);
                    if w > 0.0 {
                        out.push((lookup(s, seq, k + 1), w));
                    }
                }
            }
        }
        out
    }

    /// Materializes every row. Only sensible for small products.
    pub fn to_basic_mdp(&self) -> Result<BasicMdp, MdpError> {
        let mut rows = Vec::new();
        for x in 0..self.state_count() {
            for a in Model::allowed(self, x).iter() {
                rows.push(((x, a), self.successors(x, a)));
            }
        }
        let mdp = BasicMdp::from_rows(
            self.state_count(),
            self.action_count,
            rows,
            self.init.clone(),
            self.labels.clone(),
        )?;
        mdp.validate().into_result()?;
        Ok(mdp)
    }

    /// Writes the index-to-triple sidecar: one `index base delay buffer...`
    /// line per state, `_` marking placeholders.
    pub fn write_mapping<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "dcmdp_mapping {} {}", self.tau_max, self.state_count())?;
        for x in 0..self.state_count() {
            write!(out, "{} {} {}", x, self.bases[x], self.delays[x])?;
            let acts = self.actions_of(x);
            for j in 0..self.tau_max {
                match acts.get(j) {
                    Some(a) => write!(out, " {a}")?,
                    None => write!(out, " _")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// A delay-unaware base policy acting on the observed base state.
    pub fn lift_policy(&self, policy: &Policy) -> Result<Policy, MdpError> {
        let actions = self.bases.iter().map(|s| policy.action(*s as usize)).collect();
        Policy::new(self, actions)
    }

    /// Product states observing `base` with the initial buffer: empty for a
    /// random-delay link, all safe actions for a constant-delay link.
    pub fn initial_buffer_state(&self, base: usize) -> Option<usize> {
        match self.link {
            Link::Random(_) => self.index_of(base, &[]),
            Link::Constant { tau, safe_action } => self.index_of(base, &vec![safe_action; tau]),
        }
    }
}

impl Model for DcMdp {
    fn state_count(&self) -> usize {
        self.bases.len()
    }

    fn action_count(&self) -> usize {
        self.action_count
    }

    /// The actions available at the observed base state.
    fn allowed(&self, x: usize) -> ActionSet {
        self.base.allowed(self.bases[x] as usize)
    }

    fn expectations(&self, values: &[f64], out: &mut [f64]) {
        backup::expectations(self, values, out)
    }

    fn policy_expectations(&self, values: &[f64], policy: &Policy, out: &mut [f64]) {
        backup::policy_expectations(self, values, policy, out)
    }

    fn successors(&self, x: usize, a: usize) -> Vec<(usize, f64)> {
        let mut row = self.expand(x, a);
        row.sort_by_key(|(y, _)| *y);
        row
    }

    fn init(&self) -> &[(usize, f64)] {
        &self.init
    }

    fn label(&self, name: &str) -> Option<&StateSet> {
        self.labels.get(name)
    }

    fn model_digest(&self) -> Option<String> {
        Some(self.digest.clone())
    }
}
