use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use super::{CtsReport, RuleId, Violation};
use crate::isa::{Instr, Opcode, Operand, Program, Reg};
use crate::semantics::{initial_configs, sequential_trace, ExplorationLimits};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Procedure {
    pub name: String,
    pub entry: usize,
    pub body: BTreeSet<usize>,
    pub frame: u64,
}

impl Procedure {
    /// The ENDBR and every post-CALL address in the body.
    pub fn entries(&self, p: &Program) -> Vec<usize> {
        self.body
            .iter()
            .copied()
            .filter(|&a| p.instrs[a] == Instr::Endbr || (a > 0 && matches!(p.instrs[a - 1], Instr::Call(_))))
            .collect()
    }

    pub fn contains(&self, a: usize) -> bool {
        self.body.contains(&a)
    }
}

const WF1: RuleId = RuleId::Wf(1);

pub fn partition_procedures(p: &Program) -> Result<Vec<Procedure>, CtsReport> {
    let mut report = CtsReport::default();
    let n = p.instrs.len();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut procs = vec![];
    for e in p.endbrs() {
        let mut body = BTreeSet::new();
        let mut queue = VecDeque::from([e]);
        while let Some(a) = queue.pop_front() {
            if !body.insert(a) {
                continue;
            }
            for s in p.instrs[a].succs(a) {
                if s >= n {
                    report.violations.push(Violation::at(WF1, a, format!("successor {s} is outside the program")));
                } else if !body.contains(&s) {
                    queue.push_back(s);
                }
            }
        }
        for &a in &body {
            if a != e && p.instrs[a] == Instr::Endbr {
                report
                    .violations
                    .push(Violation::at(WF1, a, format!("procedure at {e} reaches a second ENDBR")));
            }
        }
        let idx = procs.len();
        for &a in &body {
            match owner[a] {
                Some(o) if o != idx => report.violations.push(Violation::at(
                    WF1,
                    a,
                    format!("instruction is shared by the procedures at {} and {e}", procs_entry(&procs, o)),
                )),
                _ => owner[a] = Some(idx),
            }
        }
        let decl = p.procs.iter().find(|d| d.start <= e && e < d.end);
        let (name, frame) = match decl {
            Some(d) => {
                if let Some(&out) = body.iter().find(|&&a| a < d.start || a >= d.end) {
                    report.violations.push(Violation::at(
                        WF1,
                        out,
                        format!("procedure `{}` reaches an instruction outside its declaration", d.name),
                    ));
                }
                (d.name.clone(), d.frame)
            }
            None => (p.label_at(e).map_or_else(|| format!("proc_{e}"), str::to_string), 0),
        };
        procs.push(Procedure { name, entry: e, body, frame });
    }
    // Dead LFENCE padding (after a JMP, say) belongs to whatever precedes it.
    for a in 1..n {
        if owner[a].is_none() && p.instrs[a] == Instr::Lfence {
            if let Some(o) = owner[a - 1] {
                owner[a] = Some(o);
                procs[o].body.insert(a);
            }
        }
    }
    for (a, o) in owner.iter().enumerate() {
        if o.is_none() {
            report
                .violations
                .push(Violation::at(WF1, a, "instruction is not reachable from any ENDBR"));
        }
    }
    if report.violations.is_empty() {
        Ok(procs)
    } else {
        Err(report)
    }
}

fn procs_entry(procs: &[Procedure], i: usize) -> usize {
    procs[i].entry
}

fn frame_checks(p: &Program, f: &Procedure, report: &mut CtsReport) {
    let k = p.wrap(f.frame);
    for &a in &f.body {
        match &p.instrs[a] {
            Instr::Op { op, dst: Reg::Sp, srcs } => {
                let ok = match (op, srcs.as_slice()) {
                    (Opcode::Sub | Opcode::Add, [Operand::Reg(Reg::Sp), Operand::Imm(v)]) => *v == k,
                    (Opcode::Max | Opcode::Min, [Operand::Reg(Reg::Sp), Operand::Imm(_)]) => true,
                    _ => false,
                };
                if !ok {
                    report.violations.push(Violation::at(
                        WF1,
                        a,
                        format!("SP may only change by the frame size {}", f.frame),
                    ));
                }
            }
            Instr::Ld { base, dst: Reg::Sp, .. } if *base != Reg::Zr => {
                report.violations.push(Violation::at(WF1, a, "SP may only be loaded from a global"));
            }
            Instr::Ld { base: Reg::Sp, disp, .. } | Instr::St { base: Reg::Sp, disp, .. } => {
                if *disp < 0 || *disp as u64 >= f.frame {
                    report.violations.push(Violation::at(
                        WF1,
                        a,
                        format!("stack offset {disp} is outside the frame of size {}", f.frame),
                    ));
                }
            }
            _ => {}
        }
    }
}

pub fn check_wf(p: &Program, procs: &[Procedure], limits: &ExplorationLimits) -> CtsReport {
    let mut report = CtsReport::default();
    for f in procs {
        frame_checks(p, f, &mut report);
    }
    for (a, ins) in p.instrs.iter().enumerate() {
        if ins.is_call_or_ret() && !p.args.contains_key(&a) {
            report
                .violations
                .push(Violation::at(RuleId::Wf(2), a, "CALL/RET has no calling-convention entry"));
        }
        if let Instr::Ld { base: Reg::Zr, disp, .. } | Instr::St { base: Reg::Zr, disp, .. } = ins {
            if p.is_stack_addr(p.wrap(*disp as u64)) {
                report
                    .violations
                    .push(Violation::at(RuleId::Wf(3), a, "constant-address global access into the stack region"));
            }
        }
    }
    for d in &p.data {
        if d.range().any(|x| p.is_stack_addr(x)) {
            report.violations.push(Violation::global(
                RuleId::Wf(3),
                format!("global `{}` overlaps the stack region", d.name),
            ));
        }
    }
    report.notes.push("WF.4: no register is preserved across calls (convention, not checked)".into());

    for init in initial_configs(p, limits.enumerate_inputs) {
        let t = sequential_trace(p, init, limits.max_steps);
        for (i, s) in t.steps.iter().enumerate() {
            let sp = s.pre.get(Reg::Sp);
            if sp.label.is_sec() {
                push_once(&mut report, RuleId::Wf(3), s.addr as usize, i, "SP holds a secret");
            }
            let Some(ins) = p.instr(s.addr) else { continue };
            if let Instr::Ld { base, disp, .. } | Instr::St { base, disp, .. } = ins {
                let addr = p.wrap(s.pre.get(*base).value.wrapping_add(*disp as u64));
                if *base == Reg::Sp && !p.is_stack_addr(addr) {
                    push_once(&mut report, RuleId::Wf(3), s.addr as usize, i, "stack access outside the stack region");
                } else if !p.is_mapped(addr) {
                    push_once(&mut report, RuleId::Wf(5), s.addr as usize, i, format!("access to unmapped address {addr}"));
                }
            }
        }
    }
    report
}

pub(crate) fn push_once(report: &mut CtsReport, rule: RuleId, addr: usize, step: usize, msg: impl Into<String>) {
    if report.violations.iter().any(|v| v.rule == rule && v.addr == Some(addr)) {
        return;
    }
    report.violations.push(Violation { rule, addr: Some(addr), step: Some(step), message: msg.into() });
}

/// Live general-purpose registers on entry to each instruction of `f`.
pub fn liveness(p: &Program, f: &Procedure) -> BTreeMap<usize, BTreeSet<Reg>> {
    let mut live: BTreeMap<usize, BTreeSet<Reg>> = f.body.iter().map(|&a| (a, BTreeSet::new())).collect();
    let args = |a: usize| p.args.get(&a).cloned().unwrap_or_default();
    let mut changed = true;
    while changed {
        changed = false;
        for &a in f.body.iter().rev() {
            let ins = &p.instrs[a];
            let mut s: BTreeSet<Reg> = match ins {
                Instr::Call(_) | Instr::Ret => args(a),
                _ => {
                    let mut out = BTreeSet::new();
                    for succ in ins.succs(a) {
                        if let Some(l) = live.get(&succ) {
                            out.extend(l.iter().copied());
                        }
                    }
                    if let Some(d) = ins.def() {
                        out.remove(&d);
                    }
                    out
                }
            };
            s.extend(ins.uses());
            s.retain(|r| r.is_gpr());
            if live[&a] != s {
                live.insert(a, s);
                changed = true;
            }
        }
    }
    live
}
