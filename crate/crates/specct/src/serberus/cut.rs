use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt::{Debug, Display};
use std::hash::{Hash, Hasher};

use num_rational::Ratio;
use num_traits::Num;

use super::tcfg::{Edge, Tcfg};

/// Scalar used for edge weights and flow capacities.
pub trait Capacity: Num + Clone + PartialOrd + Debug + Display {
    fn ratio(num: u32, den: u32) -> Self;
    fn to_f64(&self) -> f64;
}

impl Capacity for Ratio<i64> {
    fn ratio(num: u32, den: u32) -> Self {
        Ratio::new(num as i64, den.max(1) as i64)
    }

    fn to_f64(&self) -> f64 {
        *self.numer() as f64 / *self.denom() as f64
    }
}

impl Capacity for f64 {
    fn ratio(num: u32, den: u32) -> Self {
        num as f64 / den.max(1) as f64
    }

    fn to_f64(&self) -> f64 {
        *self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutSet<W> {
    pub edges: BTreeSet<Edge>,
    pub total_weight: W,
}

impl<W: Capacity> CutSet<W> {
    pub fn empty() -> Self {
        CutSet { edges: BTreeSet::new(), total_weight: W::zero() }
    }

    fn from_edges(g: &Tcfg<W>, edges: BTreeSet<Edge>) -> Self {
        let total_weight = edges.iter().fold(W::zero(), |acc, e| acc + g.weight(*e));
        CutSet { edges, total_weight }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MulticutError {
    #[error("cut leaves a path from {from} to {to}")]
    Invalid { from: usize, to: usize },
}

struct Net<W> {
    // (to, capacity, index of reverse arc)
    arcs: Vec<Vec<(usize, W, usize)>>,
}

impl<W: Capacity> Net<W> {
    fn new(n: usize) -> Self {
        Net { arcs: (0..n).map(|_| vec![]).collect() }
    }

    fn add(&mut self, u: usize, v: usize, c: W) {
        let ru = self.arcs[v].len() + usize::from(u == v);
        let rv = self.arcs[u].len();
        self.arcs[u].push((v, c, ru));
        self.arcs[v].push((u, W::zero(), rv));
    }

    fn bfs(&self, s: usize) -> Vec<Option<(usize, usize)>> {
        let mut prev = vec![None; self.arcs.len()];
        let mut seen = vec![false; self.arcs.len()];
        seen[s] = true;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for (i, (v, c, _)) in self.arcs[u].iter().enumerate() {
                if !seen[*v] && *c > W::zero() {
                    seen[*v] = true;
                    prev[*v] = Some((u, i));
                    q.push_back(*v);
                }
            }
        }
        prev
    }

    /// Edmonds-Karp; returns the residual-reachable side of a minimum cut.
    fn min_cut_side(&mut self, s: usize, t: usize) -> Vec<bool> {
        loop {
            let prev = self.bfs(s);
            if prev[t].is_none() {
                let mut side = vec![false; self.arcs.len()];
                side[s] = true;
                for (v, p) in prev.iter().enumerate() {
                    side[v] |= p.is_some();
                }
                return side;
            }
            let mut path = vec![];
            let mut v = t;
            while v != s {
                let (u, i) = prev[v].expect("path");
                path.push((u, i));
                v = u;
            }
            let mut b = self.arcs[path[0].0][path[0].1].1.clone();
            for &(u, i) in &path {
                let c = &self.arcs[u][i].1;
                if *c < b {
                    b = c.clone();
                }
            }
            for &(u, i) in &path {
                let (v, _, r) = self.arcs[u][i];
                self.arcs[u][i].1 = self.arcs[u][i].1.clone() - b.clone();
                self.arcs[v][r].1 = self.arcs[v][r].1.clone() + b.clone();
            }
        }
    }
}

/// Minimum `source → sink` edge cut, ignoring `removed`. A pair with `source == sink` cuts every cycle through it.
pub fn min_cut_excluding<W: Capacity>(g: &Tcfg<W>, source: usize, sink: usize, removed: &BTreeSet<Edge>) -> CutSet<W> {
    // Node ids: the sink is duplicated as a terminal so a path may start and end at the same address.
    let live = |e: &Edge| !removed.contains(e);
    let mut fwd: BTreeSet<usize> = BTreeSet::from([source]);
    let mut q = VecDeque::from([source]);
    let mut sink_hit = false;
    while let Some(u) = q.pop_front() {
        for v in g.succs(u) {
            if !live(&(u, v)) {
                continue;
            }
            if v == sink {
                sink_hit = true;
                continue;
            }
            if fwd.insert(v) {
                q.push_back(v);
            }
        }
    }
    if !sink_hit {
        return CutSet::empty();
    }
    let mut back: BTreeSet<usize> = BTreeSet::new();
    let mut q: VecDeque<usize> = VecDeque::new();
    let preds = g.preds_map();
    for u in preds.get(&sink).into_iter().flatten() {
        if fwd.contains(u) && live(&(*u, sink)) && back.insert(*u) {
            q.push_back(*u);
        }
    }
    while let Some(v) = q.pop_front() {
        if v == source {
            continue;
        }
        for u in preds.get(&v).into_iter().flatten() {
            if fwd.contains(u) && live(&(*u, v)) && back.insert(*u) {
                q.push_back(*u);
            }
        }
    }
    let nodes: Vec<usize> = back.iter().copied().collect();
    let idx: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, a)| (*a, i)).collect();
    let t = nodes.len();
    let mut net = Net::new(t + 1);
    let mut arcs: Vec<(Edge, usize, usize)> = vec![];
    for &u in &nodes {
        if u == sink && u != source {
            continue;
        }
        for v in g.succs(u) {
            if !live(&(u, v)) {
                continue;
            }
            let to = if v == sink { Some(t) } else { idx.get(&v).copied().filter(|_| v != source) };
            if let Some(to) = to {
                net.add(idx[&u], to, g.weight((u, v)));
                arcs.push(((u, v), idx[&u], to));
            }
        }
    }
    let side = net.min_cut_side(idx[&source], t);
    let edges = arcs.into_iter().filter(|(_, a, b)| side[*a] && !side[*b]).map(|(e, _, _)| e).collect();
    CutSet::from_edges(g, edges)
}

pub fn max_flow_min_cut<W: Capacity>(g: &Tcfg<W>, source: usize, sink: usize) -> CutSet<W> {
    min_cut_excluding(g, source, sink, &BTreeSet::new())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MulticutResult<W> {
    pub cut: CutSet<W>,
    pub rounds: usize,
    /// The iteration cycled or did not settle, and the union of independent cuts was used.
    pub fell_back: bool,
}

const MAX_ROUNDS: usize = 64;

fn hash_cut(c: &BTreeSet<Edge>) -> u64 {
    let mut h = DefaultHasher::new();
    c.hash(&mut h);
    h.finish()
}

/// Per-pair minimum cuts, each computed with the other pairs' cuts fixed, until the global cut stops changing.
pub fn multicut<W: Capacity>(g: &Tcfg<W>, pairs: &[(usize, usize)]) -> Result<MulticutResult<W>, MulticutError> {
    let pairs: Vec<(usize, usize)> = pairs.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut cuts: Vec<BTreeSet<Edge>> = vec![BTreeSet::new(); pairs.len()];
    let mut seen: HashSet<u64> = HashSet::new();
    let mut prev: Option<BTreeSet<Edge>> = None;
    let mut rounds = 0;
    let mut fell_back = false;
    let global = loop {
        rounds += 1;
        for i in 0..pairs.len() {
            let removed: BTreeSet<Edge> =
                cuts.iter().enumerate().filter(|(j, _)| *j != i).flat_map(|(_, c)| c.iter().copied()).collect();
            cuts[i] = min_cut_excluding(g, pairs[i].0, pairs[i].1, &removed).edges;
        }
        let global: BTreeSet<Edge> = cuts.iter().flatten().copied().collect();
        if prev.as_ref() == Some(&global) {
            break global;
        }
        if !seen.insert(hash_cut(&global)) || rounds >= MAX_ROUNDS {
            fell_back = true;
            break pairs
                .iter()
                .flat_map(|&(s, t)| max_flow_min_cut(g, s, t).edges)
                .collect();
        }
        prev = Some(global);
    };
    for &(s, t) in &pairs {
        if g.reaches(s, t, &global) {
            return Err(MulticutError::Invalid { from: s, to: t });
        }
    }
    Ok(MulticutResult { cut: CutSet::from_edges(g, global), rounds, fell_back })
}
