use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::Serialize;

use crate::isa::{Instr, Program, Reg};
use crate::semantics::{Source, Trace};

/// A register at a point in the trace: the value it holds before step `step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Node {
    pub reg: Reg,
    pub step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum EdgeKind {
    NoOp,
    RegisterDep,
    MemoryDep,
}

#[derive(Clone, Debug, Default)]
pub struct DynDfg {
    pub edges: Vec<(Node, Node, EdgeKind)>,
    succ: HashMap<Node, Vec<usize>>,
    pred: HashMap<Node, Vec<usize>>,
}

impl DynDfg {
    fn add(&mut self, from: Node, to: Node, kind: EdgeKind) {
        let i = self.edges.len();
        self.edges.push((from, to, kind));
        self.succ.entry(from).or_default().push(i);
        self.pred.entry(to).or_default().push(i);
    }

    pub fn has_edge(&self, from: Node, to: Node, kind: EdgeKind) -> bool {
        self.succ.get(&from).is_some_and(|es| es.iter().any(|&i| self.edges[i].1 == to && self.edges[i].2 == kind))
    }

    /// `from →* to` over dependency edges.
    pub fn dyn_dep(&self, from: Node, to: Node) -> bool {
        let mut seen = BTreeSet::from([from]);
        let mut q = VecDeque::from([from]);
        while let Some(n) = q.pop_front() {
            if n == to {
                return true;
            }
            if n.step >= to.step {
                continue;
            }
            for &i in self.succ.get(&n).into_iter().flatten() {
                let m = self.edges[i].1;
                if seen.insert(m) {
                    q.push_back(m);
                }
            }
        }
        false
    }

    /// Every node with a path to one of `roots`, roots included.
    pub fn ancestors(&self, roots: &[Node]) -> BTreeSet<Node> {
        let mut seen: BTreeSet<Node> = roots.iter().copied().collect();
        let mut q: VecDeque<Node> = roots.iter().copied().collect();
        while let Some(n) = q.pop_front() {
            for &i in self.pred.get(&n).into_iter().flatten() {
                let m = self.edges[i].0;
                if seen.insert(m) {
                    q.push_back(m);
                }
            }
        }
        seen
    }
}

/// Direct register and memory dependencies between consecutive steps of `tr`.
pub fn build_dynamic_dfg(p: &Program, tr: &Trace) -> DynDfg {
    let regs: Vec<Reg> = p.gprs().chain([Reg::Sp]).collect();
    let mut g = DynDfg::default();
    for (i, s) in tr.steps.iter().enumerate() {
        let ins = if s.halted() { None } else { p.instr(s.addr) };
        let def = ins.and_then(Instr::def);
        for &r in &regs {
            if Some(r) != def {
                g.add(Node { reg: r, step: i }, Node { reg: r, step: i + 1 }, EdgeKind::NoOp);
            }
        }
        let (Some(ins), Some(d)) = (ins, def) else { continue };
        let to = Node { reg: d, step: i + 1 };
        match ins {
            Instr::Op { .. } | Instr::Div { .. } => {
                for r in ins.uses() {
                    if regs.contains(&r) {
                        g.add(Node { reg: r, step: i }, to, EdgeKind::RegisterDep);
                    }
                }
            }
            Instr::Ld { .. } => {
                if let Some(Source::Store(j)) = s.source {
                    if let Some(Instr::St { src, .. }) = p.instr(tr.steps[j].addr) {
                        if regs.contains(src) {
                            g.add(Node { reg: *src, step: j }, to, EdgeKind::MemoryDep);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    g
}
