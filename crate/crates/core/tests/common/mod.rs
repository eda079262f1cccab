//! Helpers shared by several test targets.

#![allow(dead_code)]

use easyfirst_core::easyfirst::{commit_schedule, decode, schedule_k, DecodeOptions};
use easyfirst_core::stub::RandomPredictor;
use easyfirst_core::vocab::EOS;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Replays a random-stub decode step by step and checks every state
/// invariant; the error names the first one that broke.
pub fn check_invariants(
    seed: u64,
    len: usize,
    k_iters: usize,
    postprocess: bool,
) -> Result<(), String> {
    let mut options = DecodeOptions::new(len, k_iters);
    options.eos_postprocess = postprocess;
    options.record_probabilities = true;
    let out = decode(&mut RandomPredictor { seed }, options).map_err(|e| e.to_string())?;
    let k = schedule_k(len, k_iters).map_err(|e| e.to_string())?;
    let schedule = commit_schedule(len, k_iters).map_err(|e| e.to_string())?;
    ensure!(
        out.trace.len() <= k_iters,
        "{} steps for K={k_iters}",
        out.trace.len()
    );
    let mut committed = vec![false; len];
    let mut confidence = vec![0.0; len];
    let mut prev: Vec<char> = vec!['_'; len];
    for (i, step) in out.trace.steps.iter().enumerate() {
        let probs = step.probabilities.as_ref().ok_or("probabilities missing")?;
        let open: Vec<usize> = (0..len).filter(|&t| !committed[t]).collect();
        ensure!(
            step.committed.len() == k.min(open.len()),
            "step {i}: {} commits",
            step.committed.len()
        );
        // The chosen set is a confidence top-k with index tie-break.
        let max_prob = |t: usize| probs[t].iter().copied().fold(f64::MIN, f64::max);
        let mut ranked = open.clone();
        ranked.sort_by(|&a, &b| max_prob(b).total_cmp(&max_prob(a)).then(a.cmp(&b)));
        let chosen: Vec<usize> = step.committed.iter().map(|c| c.pos).collect();
        ensure!(
            chosen == ranked[..chosen.len()],
            "step {i}: {chosen:?} is not the top-k"
        );
        for c in &step.committed {
            committed[c.pos] = true;
            ensure!(
                c.confidence == max_prob(c.pos),
                "step {i}: confidence of {}",
                c.pos
            );
            confidence[c.pos] = c.confidence;
        }
        for &f in &step.forced_eos {
            committed[f] = true;
        }
        let cur: Vec<char> = step.tokens.chars().collect();
        for t in 0..len {
            if !committed[t] {
                ensure!(
                    cur[t] == '_',
                    "step {i}: uncommitted position {t} holds {:?}",
                    cur[t]
                );
            } else if prev[t] != '_' && step.eos_cut.is_none_or(|cut| t <= cut) {
                ensure!(
                    cur[t] == prev[t],
                    "step {i}: committed position {t} changed"
                );
            }
        }
        match step.eos_cut {
            Some(cut) => {
                ensure!(postprocess, "step {i}: cut without post-processing");
                ensure!(
                    cur[cut..].iter().all(|&c| c == '#'),
                    "step {i}: tail after cut {cut} is not EOS"
                );
                ensure!(
                    committed[cut..].iter().all(|&c| c),
                    "step {i}: tail after cut {cut} is open"
                );
                ensure!(
                    cur[..cut].iter().all(|&c| c != '#'),
                    "step {i}: EOS before cut {cut}"
                );
            }
            None => {
                let expected = ((i + 1) * k).min(len);
                let n = committed.iter().filter(|&&c| c).count();
                ensure!(
                    n == expected,
                    "step {i}: {n} committed, schedule says {expected}"
                );
                ensure!(
                    schedule[..=i].iter().sum::<usize>() == expected,
                    "step {i}: schedule sum"
                );
            }
        }
        prev = cur;
    }
    ensure!(out.state.is_complete(), "open positions after the loop");
    ensure!(!out.text.contains('#'), "EOS in output text");
    match out.state.eos_cut {
        Some(cut) => ensure!(
            out.text.chars().count() == cut,
            "text length differs from cut {cut}"
        ),
        None => ensure!(
            out.state.tokens.iter().all(|&t| t != EOS) || !postprocess,
            "committed EOS but no cut"
        ),
    }
    for t in 0..len {
        if !out.state.forced[t] {
            ensure!(
                out.state.confidence[t] == confidence[t],
                "final confidence of {t}"
            );
        }
    }
    Ok(())
}
