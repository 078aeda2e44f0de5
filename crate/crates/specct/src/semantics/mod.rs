//! Sequential and transient transition rules, traces and bounded exploration.

mod explore;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::isa::{target, Instr, Label, LabeledValue, Observation, Operand, Program, Reg};

pub use explore::{
    explore, explore_prefixes, initial_config, initial_configs, replay, sequential_trace, Coverage, ExplorationLimits,
    Flow, Source, StepRecord, Trace, TraceEnd, Walker,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HardwareMode {
    pub stl: bool,
    pub psf: bool,
    pub sls: bool,
}

impl Default for HardwareMode {
    fn default() -> Self {
        HardwareMode { stl: true, psf: false, sls: false }
    }
}

impl std::fmt::Display for HardwareMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let flag = |on: bool, name: &str| if on { name.to_string() } else { format!("no{name}") };
        write!(f, "{},{},{}", flag(self.stl, "stl"), flag(self.psf, "psf"), flag(self.sls, "sls"))
    }
}

impl std::str::FromStr for HardwareMode {
    type Err = String;

    /// Comma-separated flags applied over the default mode, e.g. `nostl` or `psf,sls`.
    fn from_str(s: &str) -> Result<Self, String> {
        let mut m = HardwareMode::default();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (on, name) = match tok.strip_prefix("no") {
                Some(rest) => (false, rest),
                None => (true, tok),
            };
            match name {
                "stl" => m.stl = on,
                "psf" => m.psf = on,
                "sls" => m.sls = on,
                _ => return Err(format!("unknown hardware flag `{tok}`")),
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Config {
    /// General-purpose registers followed by SP.
    pub regs: Vec<LabeledValue>,
    pub pc: u64,
    pub dmem: BTreeMap<u64, LabeledValue>,
    pub stores: Vec<(u64, LabeledValue)>,
    pub call_stack: Vec<u64>,
    pub transient: bool,
}

impl Config {
    pub fn get(&self, r: Reg) -> LabeledValue {
        match r {
            Reg::Gpr(i) => self.regs[i as usize],
            Reg::Sp => *self.regs.last().expect("sp slot"),
            Reg::Pc => LabeledValue { value: self.pc, label: Label::Pub },
            Reg::Zr => LabeledValue::zero(),
        }
    }

    pub fn set(&mut self, r: Reg, v: LabeledValue) {
        match r {
            Reg::Gpr(i) => self.regs[i as usize] = v,
            Reg::Sp => *self.regs.last_mut().expect("sp slot") = v,
            Reg::Pc => self.pc = v.value,
            Reg::Zr => {}
        }
    }

    fn declassify(&mut self, r: Reg) {
        let v = self.get(r);
        self.set(r, v.declassified());
    }

    /// Memory as seen by a sequential load: data memory overlaid with pending stores.
    pub fn read(&self, addr: u64) -> Option<(LabeledValue, LoadSource)> {
        if let Some(k) = self.stores.iter().rposition(|(a, _)| *a == addr) {
            return Some((self.stores[k].1, LoadSource::Store(k)));
        }
        self.dmem.get(&addr).map(|v| (*v, LoadSource::Memory))
    }

    /// Data memory with every pending store applied in order.
    pub fn committed_view(&self) -> BTreeMap<u64, LabeledValue> {
        let mut m = self.dmem.clone();
        for (a, v) in &self.stores {
            m.insert(*a, *v);
        }
        m
    }
}

/// Where a load took its value from: data memory or a pending store by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LoadSource {
    Memory,
    Store(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepKind {
    Sequential,
    Transient,
}

/// The rule that produced a transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rule {
    Seq,
    Halt,
    Mispredict,
    BranchTarget,
    ReturnTarget,
    Forward,
    UnmappedLoad,
    UnmappedStore,
    FallThrough,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transition {
    pub config: Config,
    pub obs: Observation,
    pub kind: StepKind,
    pub rule: Rule,
    pub source: Option<LoadSource>,
}

impl Transition {
    pub fn halted(&self) -> bool {
        self.rule == Rule::Halt
    }
}

fn halt(c: &Config, obs: Observation) -> Transition {
    Transition { config: c.clone(), obs, kind: StepKind::Sequential, rule: Rule::Halt, source: None }
}

fn seq(config: Config, obs: Observation) -> Transition {
    Transition { config, obs, kind: StepKind::Sequential, rule: Rule::Seq, source: None }
}

fn tr(mut config: Config, obs: Observation, rule: Rule) -> Transition {
    config.transient = true;
    Transition { config, obs, kind: StepKind::Transient, rule, source: None }
}

fn address(c: &Config, p: &Program, base: Reg, disp: i64) -> LabeledValue {
    let b = c.get(base);
    LabeledValue::new(b.value.wrapping_add(disp as u64), b.label, p.word_width)
}

fn jump(at: u64, d: i64) -> u64 {
    target(at as usize, d).map_or(u64::MAX, |t| t as u64)
}

fn eval_op(c: &Config, p: &Program, op: crate::isa::Opcode, srcs: &[Operand]) -> LabeledValue {
    let mut label = Label::Pub;
    let vals: Vec<u64> = srcs
        .iter()
        .map(|o| match o {
            Operand::Reg(r) => {
                let v = c.get(*r);
                label = label.join(v.label);
                v.value
            }
            Operand::Imm(v) => p.wrap(*v),
            Operand::Code(a) => p.wrap(*a as u64),
        })
        .collect();
    LabeledValue { value: op.eval(&vals, p.word_width), label }
}

/// The unique sequential transition, with its load source when the instruction is a load.
pub fn seq_transition(c: &Config, p: &Program) -> Transition {
    let at = c.pc;
    let Some(ins) = p.instr(at) else {
        return halt(c, Observation::Eps);
    };
    let mut n = c.clone();
    n.pc = at + 1;
    match ins {
        Instr::Jmp(d) => {
            n.pc = jump(at, *d);
            seq(n, Observation::Eps)
        }
        Instr::Bnz(r, d) => {
            let v = c.get(*r);
            n.declassify(*r);
            if v.value != 0 {
                n.pc = jump(at, *d);
            }
            seq(n, Observation::Bnz(v))
        }
        Instr::Call(r) => {
            let v = c.get(*r);
            if p.instr(v.value) != Some(&Instr::Endbr) {
                return halt(c, Observation::Call(v));
            }
            n.declassify(*r);
            n.call_stack.push(at + 1);
            n.pc = v.value;
            seq(n, Observation::Call(v))
        }
        Instr::Ret => match n.call_stack.pop() {
            None => halt(c, Observation::Eps),
            Some(ret) => {
                n.pc = ret;
                seq(n, Observation::Eps)
            }
        },
        Instr::Endbr => seq(n, Observation::Eps),
        Instr::Lfence => {
            if c.transient {
                return halt(c, Observation::Eps);
            }
            for (a, v) in std::mem::take(&mut n.stores) {
                n.dmem.insert(a, v);
            }
            seq(n, Observation::Eps)
        }
        Instr::Ld { base, disp, dst } => {
            let a = address(c, p, *base, *disp);
            let obs = Observation::Ld(a);
            match c.read(a.value) {
                None => halt(c, obs),
                Some((v, src)) => {
                    n.declassify(*base);
                    n.set(*dst, v);
                    let mut t = seq(n, obs);
                    t.source = Some(src);
                    t
                }
            }
        }
        Instr::St { base, disp, src } => {
            let a = address(c, p, *base, *disp);
            let obs = Observation::St(a);
            if !p.is_mapped(a.value) {
                return halt(c, obs);
            }
            n.declassify(*base);
            let v = n.get(*src);
            n.stores.push((a.value, v));
            seq(n, obs)
        }
        Instr::Op { op, dst, srcs } => {
            let v = eval_op(c, p, *op, srcs);
            n.set(*dst, v);
            seq(n, Observation::Eps)
        }
        Instr::Div { a, b, dst } => {
            let (va, vb) = (c.get(*a), c.get(*b));
            n.declassify(*a);
            n.declassify(*b);
            let q = if vb.value == 0 { 0 } else { va.value / vb.value };
            n.set(*dst, LabeledValue::public(q, p.word_width));
            seq(n, Observation::Div(va, vb))
        }
    }
}

/// `step_sequential`: the successor configuration and the exposed observation.
pub fn step_sequential(c: &Config, p: &Program) -> (Config, Observation) {
    let t = seq_transition(c, p);
    (t.config, t.obs)
}

/// All transient transitions in a fixed order.
pub fn transient_transitions(c: &Config, p: &Program, mode: HardwareMode) -> Vec<Transition> {
    let at = c.pc;
    let Some(ins) = p.instr(at) else {
        return vec![];
    };
    let mut out = vec![];
    let fall_through = |c: &Config, obs: Observation, declass: Option<Reg>| {
        let mut n = c.clone();
        if let Some(r) = declass {
            n.declassify(r);
        }
        n.pc = at + 1;
        tr(n, obs, Rule::FallThrough)
    };
    match ins {
        Instr::Bnz(r, d) => {
            let v = c.get(*r);
            let mut n = c.clone();
            n.declassify(*r);
            n.pc = if v.value != 0 { at + 1 } else { jump(at, *d) };
            out.push(tr(n, Observation::Bnz(v), Rule::Mispredict));
        }
        Instr::Call(r) => {
            let v = c.get(*r);
            for e in p.endbrs() {
                if e as u64 == v.value {
                    continue;
                }
                let mut n = c.clone();
                n.declassify(*r);
                n.call_stack.push(at + 1);
                n.pc = e as u64;
                out.push(tr(n, Observation::Call(v), Rule::BranchTarget));
            }
            if mode.sls {
                out.push(fall_through(c, Observation::Call(v), Some(*r)));
            }
        }
        Instr::Ret => {
            let Some(&ret) = c.call_stack.last() else {
                return out;
            };
            for j in p.post_call_sites() {
                if j as u64 == ret {
                    continue;
                }
                let mut n = c.clone();
                n.call_stack.pop();
                n.pc = j as u64;
                out.push(tr(n, Observation::Eps, Rule::ReturnTarget));
            }
            if mode.sls {
                out.push(fall_through(c, Observation::Eps, None));
            }
        }
        Instr::Jmp(_) => {
            if mode.sls {
                out.push(fall_through(c, Observation::Eps, None));
            }
        }
        Instr::Ld { base, disp, dst } => {
            let a = address(c, p, *base, *disp);
            let obs = Observation::Ld(a);
            let load = |v: LabeledValue, src: LoadSource| {
                let mut n = c.clone();
                n.declassify(*base);
                n.set(*dst, v);
                n.pc = at + 1;
                let mut t = tr(n, obs.clone(), Rule::Forward);
                t.source = Some(src);
                t
            };
            match c.dmem.get(&a.value) {
                None => {
                    let mut t = load(LabeledValue::zero(), LoadSource::Memory);
                    t.rule = Rule::UnmappedLoad;
                    t.source = None;
                    out.push(t);
                }
                Some(&mem) => {
                    if mode.psf {
                        let seq_v = c.read(a.value).map(|x| x.0);
                        if Some(mem) != seq_v {
                            out.push(load(mem, LoadSource::Memory));
                        }
                        // Equal values from older stores give the same configuration.
                        let mut seen = vec![mem];
                        for (k, (_, v)) in c.stores.iter().enumerate().rev() {
                            if Some(*v) != seq_v && !seen.contains(v) {
                                seen.push(*v);
                                out.push(load(*v, LoadSource::Store(k)));
                            }
                        }
                    } else if mode.stl {
                        out.push(load(mem, LoadSource::Memory));
                        for (k, (sa, v)) in c.stores.iter().enumerate() {
                            if *sa == a.value {
                                out.push(load(*v, LoadSource::Store(k)));
                            }
                        }
                    }
                }
            }
        }
        Instr::St { base, disp, .. } => {
            let a = address(c, p, *base, *disp);
            if !p.is_mapped(a.value) {
                let mut n = c.clone();
                n.declassify(*base);
                n.pc = at + 1;
                out.push(tr(n, Observation::St(a), Rule::UnmappedStore));
            }
        }
        Instr::Endbr | Instr::Lfence | Instr::Op { .. } | Instr::Div { .. } => {}
    }
    out
}

/// `step_transient`: the set of transient successors and their observations.
pub fn step_transient(c: &Config, p: &Program, mode: HardwareMode) -> Vec<(Config, Observation)> {
    transient_transitions(c, p, mode).into_iter().map(|t| (t.config, t.obs)).collect()
}

/// Sequential transition first, then the transient ones. A halted configuration has a single self-loop.
pub fn successors(c: &Config, p: &Program, mode: HardwareMode) -> Vec<Transition> {
    let mut v = vec![seq_transition(c, p)];
    v.extend(transient_transitions(c, p, mode));
    v
}
