use std::collections::{BTreeMap, BTreeSet, VecDeque};

use petgraph::algo::dominators::simple_fast;
use petgraph::graphmap::DiGraphMap;

use super::cut::Capacity;
use crate::cts::Procedure;
use crate::isa::{Instr, Program};

pub type Edge = (usize, usize);

/// Transient control-flow graph of one procedure.
#[derive(Clone, Debug, PartialEq)]
pub struct Tcfg<W> {
    pub proc_name: String,
    pub nodes: BTreeSet<usize>,
    pub edges: BTreeMap<Edge, W>,
    pub entries: BTreeSet<usize>,
    pub exits: BTreeSet<usize>,
    pub loop_depth: BTreeMap<usize, u32>,
    pub dom_depth: BTreeMap<usize, u32>,
}

impl<W: Capacity> Tcfg<W> {
    pub fn succs(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.range((u, 0)..=(u, usize::MAX)).map(|((_, v), _)| *v)
    }

    pub fn preds_map(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(u, v) in self.edges.keys() {
            m.entry(v).or_default().push(u);
        }
        m
    }

    pub fn weight(&self, e: Edge) -> W {
        self.edges.get(&e).cloned().unwrap_or_else(W::zero)
    }

    /// A path of one or more edges from `from` to `to` avoiding `removed`.
    pub fn reaches(&self, from: usize, to: usize, removed: &BTreeSet<Edge>) -> bool {
        let mut seen = BTreeSet::new();
        let mut q = VecDeque::from([from]);
        while let Some(u) = q.pop_front() {
            for v in self.succs(u) {
                if removed.contains(&(u, v)) {
                    continue;
                }
                if v == to {
                    return true;
                }
                if seen.insert(v) {
                    q.push_back(v);
                }
            }
        }
        false
    }

    /// Reflexive-transitive reachability.
    pub fn reaches_or_eq(&self, from: usize, to: usize) -> bool {
        from == to || self.reaches(from, to, &BTreeSet::new())
    }

    pub fn with_weights<V: Capacity>(&self) -> Tcfg<V> {
        Tcfg {
            proc_name: self.proc_name.clone(),
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .keys()
                .map(|&(u, v)| ((u, v), V::ratio(self.loop_depth[&v], self.dom_depth[&v])))
                .collect(),
            entries: self.entries.clone(),
            exits: self.exits.clone(),
            loop_depth: self.loop_depth.clone(),
            dom_depth: self.dom_depth.clone(),
        }
    }
}

/// Transient successors: exits go to every entry, LFENCE goes nowhere.
pub fn tsuccs(p: &Program, f: &Procedure, entries: &BTreeSet<usize>, a: usize) -> Vec<usize> {
    match &p.instrs[a] {
        Instr::Call(_) | Instr::Ret => entries.iter().copied().collect(),
        Instr::Lfence => vec![],
        ins => ins.succs(a).into_iter().filter(|s| f.contains(*s)).collect(),
    }
}

fn seq_graph(p: &Program, f: &Procedure) -> DiGraphMap<usize, ()> {
    let mut g: DiGraphMap<usize, ()> = DiGraphMap::new();
    for &a in &f.body {
        g.add_node(a);
        for s in p.instrs[a].succs(a) {
            if f.contains(s) {
                g.add_edge(a, s, ());
            }
        }
    }
    g
}

/// Natural loop bodies keyed by header, over the sequential CFG.
pub fn natural_loops(p: &Program, f: &Procedure) -> BTreeMap<usize, BTreeSet<usize>> {
    let g = seq_graph(p, f);
    let doms = simple_fast(&g, f.entry);
    let mut loops: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (u, h, _) in g.all_edges() {
        if !doms.dominators(u).is_some_and(|mut ds| ds.any(|d| d == h)) {
            continue;
        }
        let body = loops.entry(h).or_insert_with(|| BTreeSet::from([h]));
        let mut stack = vec![u];
        while let Some(x) = stack.pop() {
            if body.insert(x) {
                stack.extend(g.neighbors_directed(x, petgraph::Direction::Incoming));
            }
        }
    }
    loops
}

/// Loop-nest depth and dominator-tree depth (entry = 1) of each instruction.
pub fn loop_info(p: &Program, f: &Procedure) -> (BTreeMap<usize, u32>, BTreeMap<usize, u32>) {
    let g = seq_graph(p, f);
    let doms = simple_fast(&g, f.entry);
    let mut depth: BTreeMap<usize, u32> = BTreeMap::new();
    for &a in &f.body {
        let mut d = 1;
        let mut cur = a;
        while let Some(i) = doms.immediate_dominator(cur) {
            d += 1;
            cur = i;
        }
        depth.insert(a, d);
    }
    let loops = natural_loops(p, f);
    let nest = f
        .body
        .iter()
        .map(|a| (*a, loops.values().filter(|b| b.contains(a)).count() as u32))
        .collect();
    (nest, depth)
}

pub fn build_tcfg<W: Capacity>(p: &Program, f: &Procedure) -> Tcfg<W> {
    let entries: BTreeSet<usize> = f.entries(p).into_iter().collect();
    let exits: BTreeSet<usize> = f.body.iter().copied().filter(|&a| p.instrs[a].is_call_or_ret()).collect();
    let (loop_depth, dom_depth) = loop_info(p, f);
    let mut edges = BTreeMap::new();
    for &a in &f.body {
        for s in tsuccs(p, f, &entries, a) {
            edges.insert((a, s), W::ratio(loop_depth[&s], dom_depth[&s]));
        }
    }
    Tcfg { proc_name: f.name.clone(), nodes: f.body.clone(), edges, entries, exits, loop_depth, dom_depth }
}
