//! Bulk one-step expectations over the product without materializing rows.
//!
//! For a random-delay link, a state with delay `k` and action `a` forms the
//! sequence `seq = buffer·a` of length `n = k + 1`, and its expectation is
//!
//! ```text
//! sum_{j<=k} P(j|k) * E[V(s_{n-j}, last j of seq, j)]  +  P(k+1|k) * V(s, seq, k+1)
//! ```
//!
//! where `s_{n-j}` is the base state after applying the first `n - j`
//! actions. Nesting the kernel applications gives, for fixed `n`, the
//! recurrence over tables indexed by `(s, sequence of length j)`:
//!
//! ```text
//! U_0[s]           = P(0|k) * V(s, -, 0)
//! U_j[s, b·rest]   = P(j|k) * V(s, b·rest, j) + sum_{s1} P(s1|s,b) * U_{j-1}[s1, rest]
//! ```
//!
//! and the expectation of `(x, a)` is `U_n[s, seq]`. One pass per `n`
//! evaluates every row of that delay at once.

use std::cell::RefCell;

use super::{DcMdp, Link, NONE};
use crate::delay::DelayModel;
use crate::mdp::Policy;

thread_local! {
    // Reused between sweeps: the tables are megabytes and value iteration
    // calls the backup many thousands of times.
    static SCRATCH: RefCell<[Vec<f64>; 3]> = RefCell::new([Vec::new(), Vec::new(), Vec::new()]);
}

fn zeroed(buf: &mut Vec<f64>, len: usize) {
    buf.clear();
    buf.resize(len, 0.0);
}

pub(super) fn expectations(dc: &DcMdp, values: &[f64], out: &mut [f64]) {
    match &dc.link {
        Link::Constant { .. } => constant(dc, values, out),
        Link::Random(m) => random(dc, m, values, out),
    }
}

/// Policy-restricted expectations; only the constant-delay link avoids
/// evaluating every action.
pub(super) fn policy_expectations(dc: &DcMdp, values: &[f64], policy: &Policy, out: &mut [f64]) {
    let Link::Constant { .. } = dc.link else {
        let na = dc.action_count;
        let mut all = SCRATCH.with(|c| std::mem::take(&mut c.borrow_mut()[2]));
        zeroed(&mut all, dc.bases.len() * na);
        expectations(dc, values, &mut all);
        for (x, o) in out.iter_mut().enumerate() {
            *o = all[x * na + policy.action(x)];
        }
        SCRATCH.with(|c| c.borrow_mut()[2] = all);
        return;
    };
    let na = dc.action_count;
    let width = dc.pow[dc.tau_max];
    let table = &dc.index[dc.tau_max];
    for (x, o) in out.iter_mut().enumerate() {
        let s = dc.bases[x] as usize;
        let seq = dc.codes[x] as usize * na + policy.action(x);
        let (targets, probs) = dc.base.kernel(s, seq / width);
        let next = seq % width;
        let mut acc = 0.0;
        for (t, p) in targets.iter().zip(probs) {
            acc += p * values[table[*t as usize * width + next] as usize];
        }
        *o = acc;
    }
}

fn constant(dc: &DcMdp, values: &[f64], out: &mut [f64]) {
    let na = dc.action_count;
    let width = dc.pow[dc.tau_max];
    let table = &dc.index[dc.tau_max];
    for x in 0..dc.bases.len() {
        let s = dc.bases[x] as usize;
        let code = dc.codes[x] as usize;
        for a in dc.base.allowed(s).iter() {
            let seq = code * na + a;
            let (targets, probs) = dc.base.kernel(s, seq / width);
            let next = seq % width;
            let mut acc = 0.0;
            for (t, p) in targets.iter().zip(probs) {
                acc += p * values[table[*t as usize * width + next] as usize];
            }
            out[x * na + a] = acc;
        }
    }
}

fn gather(table: &[u32], values: &[f64], weight: f64, into: &mut [f64]) {
    for (dst, &idx) in into.iter_mut().zip(table) {
        if idx != NONE {
            *dst = weight * values[idx as usize];
        }
    }
}

fn random(dc: &DcMdp, model: &DelayModel, values: &[f64], out: &mut [f64]) {
    let ns = dc.base.state_count();
    let na = dc.action_count;
    let tau = dc.tau_max;
    let [mut prev, mut cur] = SCRATCH.with(|c| {
        let mut c = c.borrow_mut();
        [std::mem::take(&mut c[0]), std::mem::take(&mut c[1])]
    });
    for n in 1..=tau + 1 {
        let k = n - 1;
        if dc.by_delay[k].is_empty() {
            continue;
        }
        zeroed(&mut prev, ns);
        let w0 = model.prob(k, 0);
        if w0 > 0.0 {
            gather(&dc.index[0], values, w0, &mut prev);
        }
        for j in 1..=n {
            let width = dc.pow[j];
            let sub = dc.pow[j - 1];
            zeroed(&mut cur, ns * width);
            if j <= tau {
                let wj = model.prob(k, j);
                if wj > 0.0 {
                    gather(&dc.index[j], values, wj, &mut cur);
                }
            }
            for s in 0..ns {
                for b in 0..na {
                    let (targets, probs) = dc.base.kernel(s, b);
                    let start = s * width + b * sub;
                    let dst = &mut cur[start..start + sub];
                    for (t, p) in targets.iter().zip(probs) {
                        let t = *t as usize;
                        let src = &prev[t * sub..(t + 1) * sub];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += p * v;
                        }
                    }
                }
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        let width = dc.pow[n];
        for &x in &dc.by_delay[k] {
            let x = x as usize;
            let s = dc.bases[x] as usize;
            let code = dc.codes[x] as usize;
            for a in dc.base.allowed(s).iter() {
                out[x * na + a] = prev[s * width + code * na + a];
            }
        }
    }
    SCRATCH.with(|c| {
        let mut c = c.borrow_mut();
        c[0] = prev;
        c[1] = cur;
    });
}
