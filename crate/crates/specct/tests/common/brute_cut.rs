//! Exhaustive search over edge subsets, for graphs small enough to enumerate.

use std::collections::{BTreeMap, BTreeSet};

use specct::serberus::{Edge, Tcfg};
use specct::Rational;

/// A path of one or more kept edges, so `from == to` asks for a cycle.
fn reaches(edges: &[Edge], keep: u32, from: usize, to: usize) -> bool {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from];
    while let Some(u) = stack.pop() {
        for (i, &(a, b)) in edges.iter().enumerate() {
            if a == u && keep & (1 << i) != 0 {
                if b == to {
                    return true;
                }
                if seen.insert(b) {
                    stack.push(b);
                }
            }
        }
    }
    false
}

/// Weight of the lightest edge set whose removal separates every pair, or `None` if some pair is inseparable.
pub fn optimal_multicut(g: &Tcfg<Rational>, pairs: &[(usize, usize)]) -> Option<Rational> {
    let edges: Vec<Edge> = g.edges.keys().copied().collect();
    assert!(edges.len() <= 20, "too many edges to enumerate: {}", edges.len());
    let all = if edges.is_empty() { 0 } else { u32::MAX >> (32 - edges.len()) };
    let mut best: Option<Rational> = None;
    for cut in 0..=all {
        let keep = all & !cut;
        if pairs.iter().any(|&(s, t)| reaches(&edges, keep, s, t)) {
            continue;
        }
        let w = (0..edges.len()).filter(|i| cut & (1 << i) != 0).map(|i| g.edges[&edges[i]]).sum();
        if best.is_none_or(|b| w < b) {
            best = Some(w);
        }
    }
    best
}

/// A T-CFG-shaped graph from explicit weighted edges, for cut tests that do not come from a program.
pub fn graph(edges: &[(usize, usize, Rational)]) -> Tcfg<Rational> {
    let nodes: BTreeSet<usize> = edges.iter().flat_map(|e| [e.0, e.1]).collect();
    Tcfg {
        proc_name: "g".into(),
        nodes,
        edges: edges.iter().map(|&(a, b, w)| ((a, b), w)).collect::<BTreeMap<_, _>>(),
        entries: BTreeSet::new(),
        exits: BTreeSet::new(),
        loop_depth: BTreeMap::new(),
        dom_depth: BTreeMap::new(),
    }
}
