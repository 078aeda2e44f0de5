//! Dynamic data-flow graphs, taint-primitive classification and speculative constant-time verdicts.

mod dfg;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::cts::SecurityTyping;
use crate::isa::{Instr, Program, Reg};
use crate::semantics::{
    explore_prefixes, initial_config, Config, Coverage, ExplorationLimits, Flow, HardwareMode, Rule, Source, Trace, TraceEnd,
};

pub use dfg::{build_dynamic_dfg, DynDfg, EdgeKind, Node};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaintClass {
    Ncal,
    Ncas,
    Stkl,
    Narg,
    Load,
    Line,
}

impl TaintClass {
    pub fn name(self) -> &'static str {
        match self {
            TaintClass::Ncal => "NCAL",
            TaintClass::Ncas => "NCAS",
            TaintClass::Stkl => "STKL",
            TaintClass::Narg => "NARG",
            TaintClass::Load => "LOAD",
            TaintClass::Line => "LINE",
        }
    }

    /// Classes a taint primitive may have under `mode`.
    pub fn allowed(self, mode: HardwareMode) -> bool {
        match self {
            TaintClass::Ncal | TaintClass::Ncas | TaintClass::Stkl => !mode.psf,
            TaintClass::Narg => true,
            TaintClass::Load => mode.psf,
            TaintClass::Line => mode.sls,
        }
    }
}

impl fmt::Display for TaintClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct TaintFinding {
    /// The step whose execution produced the violation, visible at `step + 1`.
    pub step: usize,
    pub instr: u64,
    pub class: TaintClass,
    pub violating_register: Reg,
}

impl fmt::Display for TaintFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at step {} (instr {}, register {})", self.class, self.step, self.instr, self.violating_register)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("taint primitive at step {step} (instr {instr}, {reg}) matches no class allowed in this mode")]
    Unclassified { step: usize, instr: u64, reg: Reg },
    #[error("secret observation at step {step} (instr {instr}) has no taint-primitive ancestor")]
    NoAncestor { step: usize, instr: u64 },
}

fn tracked(p: &Program) -> Vec<Reg> {
    p.gprs().chain([Reg::Sp]).collect()
}

/// Registers typed public at the configuration's instruction that hold a secret.
fn violations(p: &Program, t: &SecurityTyping, c: &Config) -> Vec<Reg> {
    let Ok(at) = usize::try_from(c.pc) else { return vec![] };
    if at >= p.instrs.len() {
        return vec![];
    }
    tracked(p)
        .into_iter()
        .filter(|&r| t.reg(r, at).is_some_and(|l| !l.is_sec()) && c.get(r).label.is_sec())
        .collect()
}

fn classify(p: &Program, tr: &Trace, i: usize, mode: HardwareMode) -> Option<TaintClass> {
    let s = &tr.steps[i];
    let ins = p.instr(s.addr)?;
    let transient = tr.executes_transiently(i);
    match ins {
        Instr::Ld { .. } if transient && mode.psf => Some(TaintClass::Load),
        Instr::Ld { .. } if transient && ins.is_nca_load() => Some(TaintClass::Ncal),
        Instr::Ld { .. } if ins.is_ca_load() => {
            let from_nca_store = match s.source {
                Some(Source::Store(j)) => {
                    p.instr(tr.steps[j].addr).is_some_and(Instr::is_nca_store) && tr.executes_transiently(j)
                }
                _ => false,
            };
            if from_nca_store {
                Some(TaintClass::Ncas)
            } else if transient && ins.is_stack_load() {
                Some(TaintClass::Stkl)
            } else {
                None
            }
        }
        Instr::Call(_) | Instr::Ret | Instr::Jmp(_) if s.rule == Rule::FallThrough => Some(TaintClass::Line),
        Instr::Call(_) | Instr::Ret if transient => Some(TaintClass::Narg),
        _ => None,
    }
}

/// Taint primitives of a trace, and for its first secret observation the findings it depends on.
struct TraceAnalysis {
    findings: Vec<TaintFinding>,
    leak: Option<(usize, Vec<TaintFinding>)>,
}

fn slot(p: &Program, r: Reg) -> Option<usize> {
    match r {
        Reg::Gpr(i) => Some(i as usize),
        Reg::Sp => Some(p.num_gprs as usize),
        _ => None,
    }
}

/// Forward-pass state before a step: each register carries the set of findings its value depends on.
#[derive(Clone, Debug)]
struct State {
    deps: Vec<BTreeSet<usize>>,
    store_deps: BTreeMap<usize, BTreeSet<usize>>,
    findings: Vec<TaintFinding>,
    leak: Option<(usize, Vec<TaintFinding>)>,
    /// Violations already present initially have no producing step.
    initial: BTreeSet<Reg>,
}

/// Analyzes traces that share prefixes with earlier ones without redoing the shared part.
struct Analyzer<'a> {
    p: &'a Program,
    typing: &'a SecurityTyping,
    mode: HardwareMode,
    prefix: Vec<(u64, usize)>,
    states: Vec<State>,
    init_regs: Vec<crate::isa::LabeledValue>,
}

impl<'a> Analyzer<'a> {
    fn new(p: &'a Program, typing: &'a SecurityTyping, mode: HardwareMode) -> Self {
        Analyzer { p, typing, mode, prefix: vec![], states: vec![], init_regs: vec![] }
    }

    fn advance(&self, tr: &Trace, i: usize, st: &mut State) -> Result<(), AnalysisError> {
        let p = self.p;
        let s = &tr.steps[i];
        if st.leak.is_none() && s.obs.is_sec() {
            let mut hit: BTreeSet<usize> = BTreeSet::new();
            if let Some(ins) = p.instr(s.addr) {
                for r in ins.sensitive_operands() {
                    if s.pre.get(r).label.is_sec() {
                        if let Some(k) = slot(p, r) {
                            hit.extend(st.deps[k].iter().copied());
                        }
                    }
                }
            }
            let mut resp: Vec<TaintFinding> = hit.into_iter().map(|j| st.findings[j]).collect();
            resp.sort_by(|a, b| b.step.cmp(&a.step));
            st.leak = Some((i, resp));
        }
        if s.halted() {
            return Ok(());
        }
        let Some(ins) = p.instr(s.addr) else { return Ok(()) };
        if let Instr::St { src, .. } = ins {
            if tr.config(i + 1).stores.len() > s.pre.stores.len() {
                if let Some(k) = slot(p, *src) {
                    if !st.deps[k].is_empty() {
                        st.store_deps.insert(i, st.deps[k].clone());
                    }
                }
            }
        }
        if let Some(d) = ins.def().and_then(|d| slot(p, d)) {
            let v = match ins {
                Instr::Op { .. } | Instr::Div { .. } => ins
                    .uses()
                    .iter()
                    .filter_map(|r| slot(p, *r))
                    .flat_map(|k| st.deps[k].iter().copied())
                    .collect(),
                Instr::Ld { .. } => match s.source {
                    Some(Source::Store(j)) => st.store_deps.get(&j).cloned().unwrap_or_default(),
                    _ => BTreeSet::new(),
                },
                _ => BTreeSet::new(),
            };
            st.deps[d] = v;
            if let Some(r) = ins.def() {
                st.initial.remove(&r);
            }
        }
        for r in violations(p, self.typing, tr.config(i + 1)) {
            let Some(k) = slot(p, r) else { continue };
            if !st.deps[k].is_empty() || st.initial.contains(&r) {
                continue;
            }
            let class = classify(p, tr, i, self.mode)
                .filter(|c| c.allowed(self.mode))
                .ok_or(AnalysisError::Unclassified { step: i, instr: s.addr, reg: r })?;
            st.deps[k].insert(st.findings.len());
            st.findings.push(TaintFinding { step: i, instr: s.addr, class, violating_register: r });
        }
        Ok(())
    }

    fn run(&mut self, tr: &Trace) -> Result<TraceAnalysis, AnalysisError> {
        if self.init_regs != tr.config(0).regs {
            self.init_regs = tr.config(0).regs.clone();
            self.prefix.clear();
            self.states.clear();
        }
        let shared = self
            .prefix
            .iter()
            .zip(&tr.steps)
            .take_while(|(c, s)| **c == (s.addr, s.choice))
            .count();
        self.prefix.truncate(shared);
        self.states.truncate(shared + 1);
        if self.states.is_empty() {
            self.states.push(State {
                deps: vec![BTreeSet::new(); self.p.num_gprs as usize + 1],
                store_deps: BTreeMap::new(),
                findings: vec![],
                leak: None,
                initial: violations(self.p, self.typing, tr.config(0)).into_iter().collect(),
            });
        }
        for i in shared..tr.steps.len() {
            let mut st = self.states[i].clone();
            if let Err(e) = self.advance(tr, i, &mut st) {
                self.prefix.clear();
                self.states.clear();
                return Err(e);
            }
            self.states.push(st);
            self.prefix.push((tr.steps[i].addr, tr.steps[i].choice));
        }
        let last = &self.states[tr.steps.len()];
        Ok(TraceAnalysis { findings: last.findings.clone(), leak: last.leak.clone() })
    }
}

fn analyze_trace(
    p: &Program,
    tr: &Trace,
    typing: &SecurityTyping,
    mode: HardwareMode,
) -> Result<TraceAnalysis, AnalysisError> {
    Analyzer::new(p, typing, mode).run(tr)
}

/// Every step whose successor has a security-type violation that does not depend on an earlier one.
pub fn classify_taint_primitives(
    p: &Program,
    tr: &Trace,
    typing: &SecurityTyping,
    mode: HardwareMode,
) -> Result<Vec<TaintFinding>, AnalysisError> {
    analyze_trace(p, tr, typing, mode).map(|a| a.findings)
}

/// Taint primitives that the secret operand of step `k` depends on, most recent first.
/// This walks the dynamic DFG backwards; `check_sct` computes the same set in its forward pass.
pub fn responsible_findings(
    p: &Program,
    tr: &Trace,
    dfg: &DynDfg,
    findings: &[TaintFinding],
    k: usize,
) -> Vec<TaintFinding> {
    let pre = tr.config(k);
    let Some(ins) = p.instr(tr.steps[k].addr) else { return vec![] };
    let roots: Vec<Node> = ins
        .sensitive_operands()
        .into_iter()
        .filter(|r| pre.get(*r).label.is_sec())
        .map(|r| Node { reg: r, step: k })
        .collect();
    let anc = dfg.ancestors(&roots);
    let mut hits: Vec<TaintFinding> = findings
        .iter()
        .copied()
        .filter(|f| f.step < k && anc.contains(&Node { reg: f.violating_register, step: f.step + 1 }))
        .collect();
    hits.sort_by(|a, b| b.step.cmp(&a.step));
    hits
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SctStatus {
    SecureWithinBound,
    Violation,
}

/// A replayable trace: the initial register inputs and the successor chosen at each step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Witness {
    pub inputs: Vec<(Reg, u64)>,
    pub choices: Vec<(u64, usize)>,
    pub observation_step: usize,
    pub observation: String,
    pub instr: u64,
    pub findings: Vec<TaintFinding>,
}

impl Witness {
    pub fn replay(&self, p: &Program, mode: HardwareMode) -> Option<Trace> {
        let mut init = initial_config(p);
        for (r, v) in &self.inputs {
            init.set(*r, crate::isa::LabeledValue::public(*v, p.word_width));
        }
        crate::semantics::replay(p, mode, init, &self.choices)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SctVerdict {
    pub status: SctStatus,
    pub witnesses: Vec<Witness>,
    pub coverage: Coverage,
    pub mode: HardwareMode,
    /// Taint primitives seen over the whole exploration, by class.
    pub findings: BTreeMap<TaintClass, u64>,
    pub leaking_traces: u64,
}

impl SctVerdict {
    pub fn secure(&self) -> bool {
        self.status == SctStatus::SecureWithinBound
    }

    pub fn count(&self, c: TaintClass) -> u64 {
        self.findings.get(&c).copied().unwrap_or(0)
    }

    pub fn witness_classes(&self) -> BTreeSet<TaintClass> {
        self.witnesses.iter().flat_map(|w| w.findings.iter().map(|f| f.class)).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("verdict serializes");
        v["schema"] = "specct.sct/1".into();
        v["complete"] = self.coverage.complete().into();
        v
    }
}

impl fmt::Display for SctVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.coverage;
        match self.status {
            SctStatus::SecureWithinBound => writeln!(f, "status: secure within bound ({})", self.mode)?,
            SctStatus::Violation => {
                writeln!(f, "status: violation, {} leaking traces ({})", self.leaking_traces, self.mode)?
            }
        }
        writeln!(
            f,
            "coverage: {} traces, {} steps, {} pruned, {} cut after leaking, max-steps {}{}{}",
            c.traces,
            c.steps,
            c.pruned,
            c.skipped,
            c.max_steps,
            if c.bound_hit { ", bound reached" } else { "" },
            if c.truncated { ", truncated" } else { "" }
        )?;
        if !self.findings.is_empty() {
            let fs: Vec<String> = self.findings.iter().map(|(k, n)| format!("{k}={n}")).collect();
            writeln!(f, "taint primitives: {}", fs.join(" "))?;
        }
        for w in &self.witnesses {
            writeln!(f, "witness: step {} instr {}: {}", w.observation_step, w.instr, w.observation)?;
            for x in &w.findings {
                writeln!(f, "  from {x}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SctOptions {
    pub max_witnesses: usize,
    /// Stop at the first leaking trace.
    pub stop_at_first: bool,
    /// Keep extending a trace after its first secret observation, so later taint primitives are counted too.
    pub extend_leaks: bool,
}

impl Default for SctOptions {
    fn default() -> Self {
        SctOptions { max_witnesses: 8, stop_at_first: false, extend_leaks: false }
    }
}

pub fn check_sct(
    p: &Program,
    typing: &SecurityTyping,
    limits: &ExplorationLimits,
    mode: HardwareMode,
) -> Result<SctVerdict, AnalysisError> {
    check_sct_with(p, typing, limits, mode, SctOptions::default())
}

/// Explores every bounded trace, classifies its taint primitives and explains each secret observation.
pub fn check_sct_with(
    p: &Program,
    typing: &SecurityTyping,
    limits: &ExplorationLimits,
    mode: HardwareMode,
    opts: SctOptions,
) -> Result<SctVerdict, AnalysisError> {
    let mut witnesses: Vec<((u64, Vec<TaintClass>), Witness)> = vec![];
    let mut counts: BTreeMap<TaintClass, u64> = BTreeMap::new();
    let mut leaking = 0;
    let mut error = None;
    let mut analyzer = Analyzer::new(p, typing, mode);
    // Only the first secret observation of a trace matters, so a leaking prefix is not extended.
    let coverage = explore_prefixes(p, *limits, mode, |tr| {
        if tr.end == TraceEnd::Skipped {
            return Flow::Continue;
        }
        let a = match analyzer.run(tr) {
            Ok(a) => a,
            Err(e) => {
                error = Some(e);
                return Flow::Stop;
            }
        };
        if tr.end == TraceEnd::Open && (a.leak.is_none() || opts.extend_leaks) {
            return Flow::Continue;
        }
        for f in &a.findings {
            *counts.entry(f.class).or_default() += 1;
        }
        let Some((k, resp)) = a.leak else {
            return Flow::Continue;
        };
        leaking += 1;
        if resp.is_empty() {
            error = Some(AnalysisError::NoAncestor { step: k, instr: tr.steps[k].addr });
            return Flow::Stop;
        }
        let mut classes: Vec<TaintClass> = resp.iter().map(|f| f.class).collect();
        classes.sort();
        classes.dedup();
        let key = (tr.steps[k].addr, classes);
        let slot = witnesses.iter().position(|(w, _)| *w == key);
        let better = slot.map_or(witnesses.len() < opts.max_witnesses, |i| witnesses[i].1.observation_step > k);
        if better {
            let init = tr.config(0);
            let w = Witness {
                inputs: p.inputs.iter().map(|(r, _)| (*r, init.get(*r).value)).collect(),
                choices: tr.steps[..=k].iter().map(|s| (s.addr, s.choice)).collect(),
                observation_step: k,
                observation: tr.steps[k].obs.to_string(),
                instr: tr.steps[k].addr,
                findings: resp,
            };
            match slot {
                Some(i) => witnesses[i].1 = w,
                None => witnesses.push((key, w)),
            }
        }
        if opts.stop_at_first {
            Flow::Stop
        } else if tr.end == TraceEnd::Open {
            Flow::Skip
        } else {
            Flow::Continue
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    Ok(SctVerdict {
        status: if leaking == 0 { SctStatus::SecureWithinBound } else { SctStatus::Violation },
        witnesses: witnesses.into_iter().map(|(_, w)| w).collect(),
        coverage,
        mode,
        findings: counts,
        leaking_traces: leaking,
    })
}
