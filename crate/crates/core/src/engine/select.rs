//! Per-round client selection.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::config::clients_per_round;
use crate::error::{Error, Result};

/// Uniform subset of size `⌈cN⌉` without replacement, sorted ascending.
pub fn select_random<R: Rng + ?Sized>(
    num_clients: usize,
    participation: f64,
    rng: &mut R,
) -> Vec<usize> {
    let k = clients_per_round(num_clients, participation);
    let mut s = index::sample(rng, num_clients, k).into_vec();
    s.sort_unstable();
    s
}

fn covered(label_sets: &[Vec<usize>], chosen: &[usize], num_classes: usize) -> Vec<bool> {
    let mut seen = vec![false; num_classes];
    for &c in chosen {
        for &l in &label_sets[c] {
            seen[l] = true;
        }
    }
    seen
}

fn uncovered(label_sets: &[Vec<usize>], chosen: &[usize], num_classes: usize) -> Vec<usize> {
    covered(label_sets, chosen, num_classes)
        .iter()
        .enumerate()
        .filter(|(_, &c)| !c)
        .map(|(i, _)| i)
        .collect()
}

/// Random subset of size `⌈cN⌉` whose clients jointly hold every class.
///
/// `label_sets[i]` lists the labels present in client `i`'s training data.
/// Rejection sampling is tried first; after `max_retries` misses, random
/// restarts of a greedy swap search complete the cover.
pub fn select_class_cover<R: Rng + ?Sized>(
    label_sets: &[Vec<usize>],
    num_classes: usize,
    participation: f64,
    rng: &mut R,
    max_retries: usize,
) -> Result<Vec<usize>> {
    let n = label_sets.len();
    if n == 0 {
        return Err(Error::Selection("no clients to select from".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let missing = uncovered(label_sets, &all, num_classes);
    if !missing.is_empty() {
        return Err(Error::Selection(format!(
            "classes {missing:?} are absent from every client"
        )));
    }
    let k = clients_per_round(n, participation);

    let mut last = Vec::new();
    for _ in 0..max_retries {
        let s = index::sample(rng, n, k).into_vec();
        if uncovered(label_sets, &s, num_classes).is_empty() {
            let mut s = s;
            s.sort_unstable();
            return Ok(s);
        }
        last = s;
    }

    let widest = label_sets.iter().map(Vec::len).max().unwrap_or(0);
    let mut best_gap = uncovered(label_sets, &last, num_classes);
    if k * widest >= num_classes {
        for restart in 0..max_retries.max(1) {
            let mut chosen = if restart == 0 && !last.is_empty() {
                last.clone()
            } else {
                index::sample(rng, n, k).into_vec()
            };
            if let Some(s) = swap_to_cover(label_sets, num_classes, &mut chosen, rng) {
                return Ok(s);
            }
            let gap = uncovered(label_sets, &chosen, num_classes);
            if gap.len() < best_gap.len() {
                best_gap = gap;
            }
        }
    }
    Err(Error::Selection(format!(
        "no {k} clients cover every class; classes {best_gap:?} stay uncovered"
    )))
}

/// Hill-climbs by single swaps that strictly increase the number of covered
/// classes. Returns the sorted cover on success.
fn swap_to_cover<R: Rng + ?Sized>(
    label_sets: &[Vec<usize>],
    num_classes: usize,
    chosen: &mut [usize],
    rng: &mut R,
) -> Option<Vec<usize>> {
    let n = label_sets.len();
    loop {
        let gap = uncovered(label_sets, chosen, num_classes).len();
        if gap == 0 {
            let mut s = chosen.to_vec();
            s.sort_unstable();
            return Some(s);
        }
        let in_set: BTreeSet<usize> = chosen.iter().copied().collect();
        let mut outside: Vec<usize> = (0..n).filter(|c| !in_set.contains(c)).collect();
        outside.shuffle(rng);
        let mut slots: Vec<usize> = (0..chosen.len()).collect();
        slots.shuffle(rng);

        let mut best: Option<(usize, usize, usize)> = None;
        for &slot in &slots {
            let old = chosen[slot];
            for &cand in &outside {
                chosen[slot] = cand;
                let g = uncovered(label_sets, chosen, num_classes).len();
                if g < best.map_or(gap, |b| b.2) {
                    best = Some((slot, cand, g));
                }
            }
            chosen[slot] = old;
        }
        match best {
            Some((slot, cand, _)) => chosen[slot] = cand,
            None => return None,
        }
    }
}
