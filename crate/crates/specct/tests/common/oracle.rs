//! A direct recursive enumeration of the transition rules, kept apart from the library's explorer.

use std::collections::{BTreeMap, BTreeSet};

use specct::isa::{Instr, Opcode, Operand};
use specct::semantics::{explore, Config, ExplorationLimits, Flow, HardwareMode, StepKind, Trace};
use specct::{Label, LabeledValue, Observation, Program, Reg};

/// (value, secret)
pub type Lv = (u64, bool);

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct St {
    pub regs: Vec<Lv>,
    pub sp: Lv,
    pub pc: u64,
    pub mem: BTreeMap<u64, Lv>,
    pub buf: Vec<(u64, Lv)>,
    pub cs: Vec<u64>,
    pub t: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Ob {
    Eps,
    Bnz(Lv),
    Call(Lv),
    Ld(Lv),
    St(Lv),
    Div(Lv, Lv),
}

/// (pc, observation, transient rule, state after)
pub type Step = (u64, Ob, bool, St);

struct M<'a> {
    p: &'a Program,
    mode: HardwareMode,
    mask: u64,
    endbrs: Vec<u64>,
    ret_sites: Vec<u64>,
}

fn pubv(v: Lv) -> Lv {
    (v.0, false)
}

impl M<'_> {
    fn rd(&self, s: &St, r: Reg) -> Lv {
        match r {
            Reg::Gpr(i) => s.regs[i as usize],
            Reg::Sp => s.sp,
            Reg::Zr => (0, false),
            Reg::Pc => (s.pc, false),
        }
    }

    fn wr(&self, s: &mut St, r: Reg, v: Lv) {
        match r {
            Reg::Gpr(i) => s.regs[i as usize] = v,
            Reg::Sp => s.sp = v,
            _ => {}
        }
    }

    fn declass(&self, s: &mut St, r: Reg) {
        let v = self.rd(s, r);
        self.wr(s, r, pubv(v));
    }

    fn ea(&self, s: &St, base: Reg, disp: i64) -> Lv {
        let b = self.rd(s, base);
        (b.0.wrapping_add(disp as u64) & self.mask, b.1)
    }

    fn to(&self, at: u64, d: i64) -> u64 {
        let t = at as i64 + 1 + d;
        if t < 0 {
            u64::MAX
        } else {
            t as u64
        }
    }

    fn op(&self, s: &St, op: Opcode, srcs: &[Operand]) -> Lv {
        let mut sec = false;
        let mut xs = vec![];
        for o in srcs {
            xs.push(match o {
                Operand::Reg(r) => {
                    let v = self.rd(s, *r);
                    sec |= v.1;
                    v.0
                }
                Operand::Imm(v) => v & self.mask,
                Operand::Code(a) => *a as u64 & self.mask,
            });
        }
        let a = xs.first().copied().unwrap_or(0);
        let b = xs.get(1).copied().unwrap_or(0);
        let v = match op {
            Opcode::Mov | Opcode::Const => a,
            Opcode::Add => a.wrapping_add(b),
            Opcode::Sub => a.wrapping_sub(b),
            Opcode::Xor => a ^ b,
            Opcode::And => a & b,
            Opcode::Or => a | b,
            Opcode::Mul => a.wrapping_mul(b),
            Opcode::Max => a.max(b),
            Opcode::Min => a.min(b),
        };
        (v & self.mask, sec)
    }

    fn fetch(&self, s: &St) -> Option<&Instr> {
        usize::try_from(s.pc).ok().and_then(|a| self.p.instrs.get(a))
    }

    /// The sequential rule: successor state, observation, and whether it is the halt self-loop.
    fn seq(&self, s: &St) -> (St, Ob, bool) {
        let Some(ins) = self.fetch(s) else {
            return (s.clone(), Ob::Eps, true);
        };
        let at = s.pc;
        let mut n = s.clone();
        n.pc = at + 1;
        let halt = |o: Ob| (s.clone(), o, true);
        match ins {
            Instr::Endbr => (n, Ob::Eps, false),
            Instr::Jmp(d) => {
                n.pc = self.to(at, *d);
                (n, Ob::Eps, false)
            }
            Instr::Bnz(r, d) => {
                let v = self.rd(s, *r);
                self.declass(&mut n, *r);
                if v.0 != 0 {
                    n.pc = self.to(at, *d);
                }
                (n, Ob::Bnz(v), false)
            }
            Instr::Call(r) => {
                let v = self.rd(s, *r);
                if !self.endbrs.contains(&v.0) {
                    return halt(Ob::Call(v));
                }
                self.declass(&mut n, *r);
                n.cs.push(at + 1);
                n.pc = v.0;
                (n, Ob::Call(v), false)
            }
            Instr::Ret => match n.cs.pop() {
                Some(r) => {
                    n.pc = r;
                    (n, Ob::Eps, false)
                }
                None => halt(Ob::Eps),
            },
            Instr::Lfence => {
                if s.t {
                    return halt(Ob::Eps);
                }
                for (a, v) in std::mem::take(&mut n.buf) {
                    n.mem.insert(a, v);
                }
                (n, Ob::Eps, false)
            }
            Instr::Ld { base, disp, dst } => {
                let a = self.ea(s, *base, *disp);
                let Some(v) = self.seq_read(s, a.0) else {
                    return halt(Ob::Ld(a));
                };
                self.declass(&mut n, *base);
                self.wr(&mut n, *dst, v);
                (n, Ob::Ld(a), false)
            }
            Instr::St { base, disp, src } => {
                let a = self.ea(s, *base, *disp);
                if !s.mem.contains_key(&a.0) {
                    return halt(Ob::St(a));
                }
                self.declass(&mut n, *base);
                let v = self.rd(&n, *src);
                n.buf.push((a.0, v));
                (n, Ob::St(a), false)
            }
            Instr::Op { op, dst, srcs } => {
                let v = self.op(s, *op, srcs);
                self.wr(&mut n, *dst, v);
                (n, Ob::Eps, false)
            }
            Instr::Div { a, b, dst } => {
                let (x, y) = (self.rd(s, *a), self.rd(s, *b));
                self.declass(&mut n, *a);
                self.declass(&mut n, *b);
                let q = if y.0 == 0 { 0 } else { x.0 / y.0 };
                self.wr(&mut n, *dst, (q, false));
                (n, Ob::Div(x, y), false)
            }
        }
    }

    fn seq_read(&self, s: &St, a: u64) -> Option<Lv> {
        let newest = s.buf.iter().rev().find(|(b, _)| *b == a).map(|(_, v)| *v);
        newest.or_else(|| s.mem.get(&a).copied())
    }

    /// The transient rules, as a set.
    fn trans(&self, s: &St) -> BTreeSet<(St, Ob)> {
        let mut out = BTreeSet::new();
        let Some(ins) = self.fetch(s) else { return out };
        let at = s.pc;
        let base = St { t: true, ..s.clone() };
        let sls = |out: &mut BTreeSet<(St, Ob)>, declass: Option<Reg>, o: Ob| {
            if self.mode.sls {
                let mut n = base.clone();
                if let Some(r) = declass {
                    self.declass(&mut n, r);
                }
                n.pc = at + 1;
                out.insert((n, o));
            }
        };
        match ins {
            Instr::Bnz(r, d) => {
                let v = self.rd(s, *r);
                let mut n = base.clone();
                self.declass(&mut n, *r);
                n.pc = if v.0 == 0 { self.to(at, *d) } else { at + 1 };
                out.insert((n, Ob::Bnz(v)));
            }
            Instr::Call(r) => {
                let v = self.rd(s, *r);
                for &e in self.endbrs.iter().filter(|&&e| e != v.0) {
                    let mut n = base.clone();
                    self.declass(&mut n, *r);
                    n.cs.push(at + 1);
                    n.pc = e;
                    out.insert((n, Ob::Call(v)));
                }
                sls(&mut out, Some(*r), Ob::Call(v));
            }
            Instr::Ret => {
                if let Some(&top) = s.cs.last() {
                    for &j in self.ret_sites.iter().filter(|&&j| j != top) {
                        let mut n = base.clone();
                        n.cs.pop();
                        n.pc = j;
                        out.insert((n, Ob::Eps));
                    }
                    sls(&mut out, None, Ob::Eps);
                }
            }
            Instr::Jmp(_) => sls(&mut out, None, Ob::Eps),
            Instr::Ld { base: b, disp, dst } => {
                let a = self.ea(s, *b, *disp);
                let mut vals: BTreeSet<Lv> = BTreeSet::new();
                match s.mem.get(&a.0) {
                    None => {
                        vals.insert((0, false));
                    }
                    Some(&m) if self.mode.psf => {
                        vals.insert(m);
                        vals.extend(s.buf.iter().map(|(_, v)| *v));
                        if let Some(sv) = self.seq_read(s, a.0) {
                            vals.remove(&sv);
                        }
                    }
                    Some(&m) if self.mode.stl => {
                        vals.insert(m);
                        vals.extend(s.buf.iter().filter(|(x, _)| *x == a.0).map(|(_, v)| *v));
                    }
                    Some(_) => {}
                }
                for v in vals {
                    let mut n = base.clone();
                    self.declass(&mut n, *b);
                    self.wr(&mut n, *dst, v);
                    n.pc = at + 1;
                    out.insert((n, Ob::Ld(a)));
                }
            }
            Instr::St { base: b, disp, .. } => {
                let a = self.ea(s, *b, *disp);
                if !s.mem.contains_key(&a.0) {
                    let mut n = base.clone();
                    self.declass(&mut n, *b);
                    n.pc = at + 1;
                    out.insert((n, Ob::St(a)));
                }
            }
            _ => {}
        }
        out
    }

    fn go(&self, s: &St, bound: usize, path: &mut Vec<Step>, out: &mut BTreeSet<Vec<Step>>) {
        if path.len() == bound {
            out.insert(path.clone());
            return;
        }
        let (n, o, halted) = self.seq(s);
        path.push((s.pc, o, false, n.clone()));
        if halted {
            out.insert(path.clone());
        } else {
            self.go(&n, bound, path, out);
        }
        path.pop();
        for (n, o) in self.trans(s) {
            path.push((s.pc, o, true, n.clone()));
            self.go(&n, bound, path, out);
            path.pop();
        }
    }
}

pub fn initial_state(p: &Program) -> St {
    let mask = if p.word_width >= 64 { u64::MAX } else { (1u64 << p.word_width) - 1 };
    let mut regs = vec![(0, false); p.num_gprs as usize];
    for (r, v) in &p.inputs {
        if let Reg::Gpr(i) = r {
            regs[*i as usize] = (v & mask, false);
        }
    }
    let sp = p.stacks.iter().find(|s| s.owner.is_none()).map_or(0, |s| s.addr + s.size);
    let mut mem = BTreeMap::new();
    for s in &p.stacks {
        for a in s.addr..s.addr + s.size {
            mem.insert(a, (0, false));
        }
    }
    for d in &p.data {
        for (i, v) in d.values.iter().enumerate() {
            mem.insert(d.addr + i as u64, (v & mask, d.label == Label::Sec));
        }
    }
    St { regs, sp: (sp & mask, false), pc: p.entry as u64, mem, buf: vec![], cs: vec![], t: false }
}

/// Every trace of at most `bound` steps that ends in a halt or at the bound.
pub fn traces(p: &Program, mode: HardwareMode, bound: usize) -> BTreeSet<Vec<Step>> {
    let m = M {
        p,
        mode,
        mask: if p.word_width >= 64 { u64::MAX } else { (1u64 << p.word_width) - 1 },
        endbrs: (0..p.instrs.len()).filter(|&a| p.instrs[a] == Instr::Endbr).map(|a| a as u64).collect(),
        ret_sites: (0..p.instrs.len()).filter(|&a| matches!(p.instrs[a], Instr::Call(_))).map(|a| a as u64 + 1).collect(),
    };
    let mut out = BTreeSet::new();
    m.go(&initial_state(p), bound, &mut vec![], &mut out);
    out
}

fn lv(v: LabeledValue) -> Lv {
    (v.value, v.label.is_sec())
}

fn ob(o: &Observation) -> Ob {
    match o {
        Observation::Eps => Ob::Eps,
        Observation::Bnz(v) => Ob::Bnz(lv(*v)),
        Observation::Call(v) => Ob::Call(lv(*v)),
        Observation::Ld(v) => Ob::Ld(lv(*v)),
        Observation::St(v) => Ob::St(lv(*v)),
        Observation::Div(a, b) => Ob::Div(lv(*a), lv(*b)),
    }
}

pub fn project_config(c: &Config) -> St {
    let n = c.regs.len() - 1;
    St {
        regs: c.regs[..n].iter().map(|v| lv(*v)).collect(),
        sp: lv(c.regs[n]),
        pc: c.pc,
        mem: c.dmem.iter().map(|(a, v)| (*a, lv(*v))).collect(),
        buf: c.stores.iter().map(|(a, v)| (*a, lv(*v))).collect(),
        cs: c.call_stack.clone(),
        t: c.transient,
    }
}

pub fn project(t: &Trace) -> Vec<Step> {
    t.steps
        .iter()
        .enumerate()
        .map(|(i, s)| (s.addr, ob(&s.obs), s.kind == StepKind::Transient, project_config(t.config(i + 1))))
        .collect()
}

/// The library explorer's trace set, without memoization.
pub fn explorer_traces(p: &Program, mode: HardwareMode, bound: usize) -> BTreeSet<Vec<Step>> {
    let limits = ExplorationLimits { max_steps: bound, max_traces: None, memoize: false, enumerate_inputs: false };
    let mut out = BTreeSet::new();
    let cov = explore(p, limits, mode, |t| {
        out.insert(project(t));
        Flow::Continue
    });
    assert_eq!(cov.pruned, 0);
    assert!(cov.complete());
    out
}
