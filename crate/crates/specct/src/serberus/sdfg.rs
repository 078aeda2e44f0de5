use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::tcfg::tsuccs;
use super::Variant;
use crate::cts::Procedure;
use crate::isa::{Instr, Program, Reg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SNode {
    pub reg: Reg,
    pub addr: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SEdge {
    NoOp,
    RegisterDep,
    StackDep,
}

/// Syntactic intraprocedural register and stack dependencies.
#[derive(Clone, Debug, Default)]
pub struct StaticDfg {
    pub edges: BTreeSet<(SNode, SNode, SEdge)>,
    succ: BTreeMap<SNode, Vec<SNode>>,
}

impl StaticDfg {
    fn add(&mut self, a: SNode, b: SNode, k: SEdge) {
        if self.edges.insert((a, b, k)) {
            self.succ.entry(a).or_default().push(b);
        }
    }

    pub fn has_edge(&self, a: SNode, b: SNode, k: SEdge) -> bool {
        self.edges.contains(&(a, b, k))
    }

    /// Every node reachable from `from`, itself included.
    pub fn reach(&self, from: SNode) -> BTreeSet<SNode> {
        let mut seen = BTreeSet::from([from]);
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            for m in self.succ.get(&n).into_iter().flatten() {
                if seen.insert(*m) {
                    stack.push(*m);
                }
            }
        }
        seen
    }

    pub fn static_dep(&self, from: SNode, to: SNode) -> bool {
        self.reach(from).contains(&to)
    }
}

pub fn build_static_dfg(p: &Program, f: &Procedure) -> StaticDfg {
    let entries: BTreeSet<usize> = f.entries(p).into_iter().collect();
    let regs: Vec<Reg> = p.gprs().chain([Reg::Sp]).collect();
    let mut g = StaticDfg::default();
    let mut stack_st: BTreeMap<i64, Vec<(usize, Reg)>> = BTreeMap::new();
    let mut stack_ld: BTreeMap<i64, Vec<(usize, Reg)>> = BTreeMap::new();
    for &a in &f.body {
        let ins = &p.instrs[a];
        let def = ins.def();
        for j in tsuccs(p, f, &entries, a) {
            for &r in &regs {
                if Some(r) != def {
                    g.add(SNode { reg: r, addr: a }, SNode { reg: r, addr: j }, SEdge::NoOp);
                }
            }
        }
        match ins {
            Instr::Op { dst, .. } | Instr::Div { dst, .. } if f.contains(a + 1) => {
                for r in ins.uses() {
                    if regs.contains(&r) {
                        g.add(SNode { reg: r, addr: a }, SNode { reg: *dst, addr: a + 1 }, SEdge::RegisterDep);
                    }
                }
            }
            Instr::St { base: Reg::Sp, disp, src } => stack_st.entry(*disp).or_default().push((a, *src)),
            Instr::Ld { base: Reg::Sp, disp, dst } => stack_ld.entry(*disp).or_default().push((a, *dst)),
            _ => {}
        }
    }
    for (d, stores) in &stack_st {
        for &(i, r) in stores {
            for &(j, r2) in stack_ld.get(d).into_iter().flatten() {
                if f.contains(j + 1) && regs.contains(&r) {
                    g.add(SNode { reg: r, addr: i }, SNode { reg: r2, addr: j + 1 }, SEdge::StackDep);
                }
            }
        }
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum PairKind {
    #[serde(rename = "NCAL-XMIT")]
    NcalXmit,
    #[serde(rename = "NCAL-ARG")]
    NcalArg,
    #[serde(rename = "NCAL-GLOB")]
    NcalGlob,
    #[serde(rename = "NCAS-CAL")]
    NcasCal,
    #[serde(rename = "NCAS-CTRL")]
    NcasCtrl,
    #[serde(rename = "CALL-XMIT")]
    CallXmit,
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairKind::NcalXmit => "NCAL-XMIT",
            PairKind::NcalArg => "NCAL-ARG",
            PairKind::NcalGlob => "NCAL-GLOB",
            PairKind::NcasCal => "NCAS-CAL",
            PairKind::NcasCtrl => "NCAS-CTRL",
            PairKind::CallXmit => "CALL-XMIT",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SourceSinkPair {
    pub source: usize,
    pub sink: usize,
    pub kind: PairKind,
}

/// Sinks reached from the output of the load at `src`: transmitters, call arguments and global stores.
fn load_sinks(p: &Program, f: &Procedure, g: &StaticDfg, src: usize, globs: bool, out: &mut BTreeSet<SourceSinkPair>) {
    let Some(r) = p.instrs[src].def() else { return };
    if !f.contains(src + 1) {
        return;
    }
    let reach = g.reach(SNode { reg: r, addr: src + 1 });
    let hit = |reg: Reg, addr: usize| reach.contains(&SNode { reg, addr });
    for &j in &f.body {
        let ins = &p.instrs[j];
        if ins.sensitive_operands().into_iter().any(|x| hit(x, j)) {
            out.insert(SourceSinkPair { source: src, sink: j, kind: PairKind::NcalXmit });
        }
        if ins.is_call_or_ret() && p.args.get(&j).into_iter().flatten().any(|x| hit(*x, j)) {
            out.insert(SourceSinkPair { source: src, sink: j, kind: PairKind::NcalArg });
        }
        if let Instr::St { base: Reg::Zr, src: s, .. } = ins {
            if globs && hit(*s, j) {
                out.insert(SourceSinkPair { source: src, sink: j, kind: PairKind::NcalGlob });
            }
        }
    }
}

pub fn generate_source_sink_pairs(
    p: &Program,
    f: &Procedure,
    g: &StaticDfg,
    variant: Variant,
) -> BTreeSet<SourceSinkPair> {
    let mut out = BTreeSet::new();
    let body: Vec<usize> = f.body.iter().copied().collect();
    let is = |a: usize, pred: fn(&Instr) -> bool| pred(&p.instrs[a]);
    match variant {
        Variant::Psf => {
            for &a in &body {
                if matches!(p.instrs[a], Instr::Ld { .. }) {
                    load_sinks(p, f, g, a, false, &mut out);
                }
            }
        }
        Variant::Core | Variant::Sls | Variant::Nostl => {
            for &a in &body {
                if is(a, Instr::is_nca_load) {
                    load_sinks(p, f, g, a, true, &mut out);
                }
            }
            for &a in body.iter().filter(|&&a| is(a, Instr::is_nca_store)) {
                for &j in &body {
                    if is(j, Instr::is_ca_load) {
                        out.insert(SourceSinkPair { source: a, sink: j, kind: PairKind::NcasCal });
                    }
                    if is(j, Instr::is_call_or_ret) {
                        out.insert(SourceSinkPair { source: a, sink: j, kind: PairKind::NcasCtrl });
                    }
                }
            }
        }
    }
    if variant == Variant::Nostl {
        let mut dependent: BTreeSet<SNode> = BTreeSet::new();
        for &a in &body {
            if let Instr::Ld { base: Reg::Sp, dst, .. } = p.instrs[a] {
                if f.contains(a + 1) {
                    dependent.extend(g.reach(SNode { reg: dst, addr: a + 1 }));
                }
            }
        }
        let sinks: Vec<usize> = body
            .iter()
            .copied()
            .filter(|&j| {
                p.instrs[j].sensitive_operands().into_iter().any(|r| dependent.contains(&SNode { reg: r, addr: j }))
            })
            .collect();
        for &c in body.iter().filter(|&&a| matches!(p.instrs[a], Instr::Call(_))) {
            for &j in &sinks {
                out.insert(SourceSinkPair { source: c, sink: j, kind: PairKind::CallXmit });
            }
        }
    }
    out
}
