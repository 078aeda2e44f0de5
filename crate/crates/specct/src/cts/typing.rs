use std::collections::{BTreeMap, VecDeque};

use serde::Serialize;

use super::procs::{liveness, push_once, Procedure};
use super::{CtsReport, RuleId, Violation};
use crate::isa::{Instr, Label, Operand, Program, Reg};
use crate::semantics::{initial_configs, sequential_trace, ExplorationLimits};

/// Global, per-procedure stack and per-instruction register security types.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SecurityTyping {
    pub tau_glob: BTreeMap<u64, Label>,
    pub tau_stk: BTreeMap<String, BTreeMap<i64, Label>>,
    /// Register types on entry to each instruction: general-purpose registers, then SP.
    pub tau_reg: BTreeMap<usize, Vec<Label>>,
    /// Type given to non-constant-address loads without a region annotation.
    pub nca_default: Label,
}

impl SecurityTyping {
    pub fn reg(&self, r: Reg, addr: usize) -> Option<Label> {
        match r {
            Reg::Zr | Reg::Pc => Some(Label::Pub),
            Reg::Gpr(i) => self.tau_reg.get(&addr).map(|v| v[i as usize]),
            Reg::Sp => self.tau_reg.get(&addr).and_then(|v| v.last().copied()),
        }
    }

    pub fn stack(&self, proc_name: &str, d: i64) -> Label {
        self.tau_stk.get(proc_name).and_then(|m| m.get(&d)).copied().unwrap_or(Label::Pub)
    }

    pub fn glob(&self, a: u64) -> Label {
        self.tau_glob.get(&a).copied().unwrap_or(Label::Pub)
    }

    /// Type of the value an LD at `addr` writes.
    pub fn load_type(&self, p: &Program, f: &Procedure, addr: usize) -> Label {
        match &p.instrs[addr] {
            Instr::Ld { base: Reg::Zr, disp, .. } => self.glob(p.wrap(*disp as u64)),
            Instr::Ld { base: Reg::Sp, disp, .. } => self.stack(&f.name, *disp),
            Instr::Ld { .. } => match p.regions.get(&addr).and_then(|r| p.data_by_name(r)) {
                Some(d) => d.label,
                None => self.nca_default,
            },
            _ => Label::Pub,
        }
    }
}

fn slot(r: Reg, n: usize) -> Option<usize> {
    match r {
        Reg::Gpr(i) => Some(i as usize),
        Reg::Sp => Some(n),
        _ => None,
    }
}

fn read(state: &[Label], r: Reg) -> Label {
    slot(r, state.len() - 1).map_or(Label::Pub, |i| state[i])
}

fn transfer(p: &Program, f: &Procedure, t: &SecurityTyping, a: usize, state: &[Label]) -> Vec<Label> {
    let mut out = state.to_vec();
    let n = state.len() - 1;
    let ins = &p.instrs[a];
    let value = match ins {
        Instr::Op { srcs, .. } => srcs.iter().fold(Label::Pub, |acc, o| match o {
            Operand::Reg(r) => acc.join(read(state, *r)),
            _ => acc,
        }),
        Instr::Div { a: x, b: y, .. } => read(state, *x).join(read(state, *y)),
        Instr::Ld { .. } => t.load_type(p, f, a),
        _ => return out,
    };
    if let Some(i) = ins.def().and_then(|d| slot(d, n)) {
        out[i] = value;
    }
    out
}

fn join_into(dst: &mut Vec<Label>, src: &[Label]) -> bool {
    let mut changed = false;
    for (d, s) in dst.iter_mut().zip(src) {
        let j = d.join(*s);
        if j != *d {
            *d = j;
            changed = true;
        }
    }
    changed
}

/// Forward fixed point over each procedure. Entry points type live registers public and dead ones secret.
pub fn infer_security_typing(p: &Program, procs: &[Procedure]) -> Result<SecurityTyping, CtsReport> {
    let n = p.num_gprs as usize;
    let mut t = SecurityTyping {
        tau_glob: BTreeMap::new(),
        tau_stk: BTreeMap::new(),
        tau_reg: BTreeMap::new(),
        nca_default: if p.has_secrets() { Label::Sec } else { Label::Pub },
    };
    for ins in &p.instrs {
        if let Instr::Ld { base: Reg::Zr, disp, .. } | Instr::St { base: Reg::Zr, disp, .. } = ins {
            let a = p.wrap(*disp as u64);
            t.tau_glob.insert(a, p.data_label(a).unwrap_or(Label::Pub));
        }
    }
    let mut report = CtsReport::default();
    for f in procs {
        let live = liveness(p, f);
        let seeds: BTreeMap<usize, Vec<Label>> = f
            .entries(p)
            .into_iter()
            .map(|e| {
                let mut s: Vec<Label> = (0..n as u8)
                    .map(|i| if live[&e].contains(&Reg::Gpr(i)) { Label::Pub } else { Label::Sec })
                    .collect();
                s.push(Label::Pub);
                (e, s)
            })
            .collect();
        loop {
            let mut state = seeds.clone();
            let mut work: VecDeque<usize> = seeds.keys().copied().collect();
            while let Some(a) = work.pop_front() {
                if p.instrs[a].is_call_or_ret() {
                    continue;
                }
                let out = transfer(p, f, &t, a, &state[&a]);
                for s in p.instrs[a].succs(a) {
                    if !f.contains(s) {
                        continue;
                    }
                    let changed = match state.get_mut(&s) {
                        Some(cur) => join_into(cur, &out),
                        None => {
                            state.insert(s, out.clone());
                            true
                        }
                    };
                    if changed {
                        work.push_back(s);
                    }
                }
            }
            let mut stk = t.tau_stk.get(&f.name).cloned().unwrap_or_default();
            for (&a, st) in &state {
                if let Instr::St { base: Reg::Sp, disp, src } = &p.instrs[a] {
                    let e = stk.entry(*disp).or_insert(Label::Pub);
                    *e = e.join(read(st, *src));
                }
            }
            let stable = t.tau_stk.get(&f.name).map_or(stk.is_empty(), |old| *old == stk);
            t.tau_stk.insert(f.name.clone(), stk);
            if stable {
                // Sequentially dead instructions (fence padding) take the bottom state.
                for &a in &f.body {
                    state.entry(a).or_insert_with(|| vec![Label::Pub; n + 1]);
                }
                for (a, s) in state {
                    if s[n].is_sec() {
                        report.violations.push(Violation::at(RuleId::Typ(6), a, "SP would be typed secret"));
                    }
                    t.tau_reg.insert(a, s);
                }
                break;
            }
        }
    }
    if report.violations.is_empty() {
        Ok(t)
    } else {
        Err(report)
    }
}

pub fn check_typ(p: &Program, procs: &[Procedure], t: &SecurityTyping, limits: &ExplorationLimits) -> CtsReport {
    let mut report = CtsReport::default();
    let n = p.num_gprs as usize;
    for f in procs {
        for &a in &f.body {
            let Some(state) = t.tau_reg.get(&a) else {
                report.violations.push(Violation::at(RuleId::Typ(8), a, "instruction has no register typing"));
                continue;
            };
            let ins = &p.instrs[a];
            if state[n].is_sec() {
                report.violations.push(Violation::at(RuleId::Typ(6), a, "SP is typed secret"));
            }
            for r in ins.sensitive_operands() {
                if read(state, r).is_sec() {
                    report.violations.push(Violation::at(
                        RuleId::Typ(2),
                        a,
                        format!("transmitter operand {r} is typed secret"),
                    ));
                }
            }
            if ins.is_call_or_ret() {
                for r in p.args.get(&a).into_iter().flatten() {
                    if read(state, *r).is_sec() {
                        report.violations.push(Violation::at(
                            RuleId::Typ(9),
                            a,
                            format!("argument register {r} is typed secret"),
                        ));
                    }
                }
            }
            match ins {
                Instr::St { base: Reg::Zr, disp, src } if !t.glob(p.wrap(*disp as u64)).is_sec() => {
                    if read(state, *src).is_sec() {
                        report.violations.push(Violation::at(
                            RuleId::Typ(4),
                            a,
                            format!("secret {src} stored to a public global"),
                        ));
                    }
                }
                Instr::St { base: Reg::Sp, disp, src } if !t.stack(&f.name, *disp).is_sec() => {
                    if read(state, *src).is_sec() {
                        report.violations.push(Violation::at(
                            RuleId::Typ(4),
                            a,
                            format!("secret {src} stored to a public stack slot"),
                        ));
                    }
                }
                _ => {}
            }
            if ins.is_call_or_ret() {
                continue;
            }
            let out = transfer(p, f, t, a, state);
            for s in ins.succs(a) {
                let Some(next) = t.tau_reg.get(&s) else { continue };
                if !f.contains(s) {
                    continue;
                }
                for (i, (x, y)) in next.iter().zip(&out).enumerate() {
                    if y > x {
                        let rule = match ins {
                            Instr::Ld { .. } if ins.def().and_then(|d| slot(d, n)) == Some(i) => RuleId::Typ(3),
                            Instr::Op { .. } | Instr::Div { .. } if ins.def().and_then(|d| slot(d, n)) == Some(i) => {
                                RuleId::Typ(7)
                            }
                            _ => RuleId::Typ(8),
                        };
                        report.violations.push(Violation::at(rule, a, "register typing is not preserved to the successor"));
                    }
                }
            }
        }
    }
    for (&a, l) in &t.tau_glob {
        if !l.is_sec() && p.data_label(a) == Some(Label::Sec) {
            report
                .violations
                .push(Violation::global(RuleId::Typ(5), format!("public global {a} holds a secret initial value")));
        }
    }

    let inits = initial_configs(p, limits.enumerate_inputs);
    let mut bounded = false;
    for init in &inits {
        let tr = sequential_trace(p, init.clone(), limits.max_steps);
        bounded |= tr.end == crate::semantics::TraceEnd::Bound;
        for i in 0..=tr.steps.len() {
            let c = tr.config(i);
            let a = c.pc as usize;
            if let Some(state) = t.tau_reg.get(&a) {
                for (k, l) in state.iter().enumerate() {
                    let r = if k == n { Reg::Sp } else { Reg::Gpr(k as u8) };
                    if !l.is_sec() && c.get(r).label.is_sec() {
                        push_once(&mut report, RuleId::Typ(1), a, i, format!("public-typed {r} holds a secret"));
                    }
                }
            }
            let view = c.committed_view();
            for (g, l) in &t.tau_glob {
                if !l.is_sec() && view.get(g).is_some_and(|v| v.label.is_sec()) {
                    push_once(&mut report, RuleId::Typ(1), a, i, format!("public global {g} holds a secret"));
                }
            }
            if let Some(s) = tr.steps.get(i) {
                if s.obs.is_sec() {
                    push_once(&mut report, RuleId::Ct, a, i, format!("sequential observation `{}` is secret", s.obs));
                }
            }
        }
    }
    report.notes.push(format!(
        "TYP.1 and CT checked on {} sequential trace(s){}",
        inits.len(),
        if bounded { " (step bound reached)" } else { "" }
    ));
    report.notes.push(
        "registers live at procedure entry and after calls are assumed public; dead ones are typed secret".into(),
    );
    report
}
