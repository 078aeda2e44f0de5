use std::collections::BTreeMap;

use serde::Serialize;

use super::cut::multicut;
use super::rewrite::{AddrMap, Rewriter};
use super::sdfg::{build_static_dfg, generate_source_sink_pairs};
use super::tcfg::build_tcfg;
use super::{SerberusError, Variant};
use crate::cts::partition_procedures;
use crate::isa::{DataDecl, Instr, Label, Opcode, Operand, PrivateStack, Program, Reg, StackDecl};
use crate::Rational;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CutEdge {
    pub from: usize,
    pub to: usize,
    pub weight: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProcFences {
    pub proc_name: String,
    pub pairs: BTreeMap<String, usize>,
    pub cut: Vec<CutEdge>,
    pub total_weight: String,
    pub rounds: usize,
    pub fell_back: bool,
}

fn procedures(p: &Program) -> Result<Vec<crate::cts::Procedure>, SerberusError> {
    partition_procedures(p).map_err(SerberusError::Cts)
}

fn lfence_on_edge(p: &Program, rw: &mut Rewriter, u: usize, v: usize) {
    let f = Instr::Lfence;
    let ui = &p.instrs[u];
    if ui.is_call_or_ret() {
        let at = if p.instrs[v] == Instr::Endbr { v + 1 } else { v };
        if !rw.has_outside(at, &f) {
            rw.on_fallthrough(at, [f]);
        }
    } else if matches!(ui, Instr::Jmp(_)) {
        if !rw.has_inside(u, &f) {
            rw.before(u, [f]);
        }
    } else if v == u + 1 {
        if !rw.has_outside(v, &f) {
            rw.on_fallthrough(v, [f]);
        }
    } else {
        rw.split_taken(u, vec![f]);
    }
}

/// Cuts every transient path from each source to its sink with LFENCEs.
pub fn insert_fences(p: &Program, variant: Variant) -> Result<(Program, AddrMap, Vec<ProcFences>), SerberusError> {
    let procs = procedures(p)?;
    let mut rw = Rewriter::new(p);
    let mut report = vec![];
    for f in &procs {
        let g = build_tcfg::<Rational>(p, f);
        let dfg = build_static_dfg(p, f);
        let pairs = generate_source_sink_pairs(p, f, &dfg, variant);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for x in &pairs {
            *counts.entry(x.kind.to_string()).or_default() += 1;
        }
        let st: Vec<(usize, usize)> = pairs.iter().map(|x| (x.source, x.sink)).collect();
        let mc = multicut(&g, &st)?;
        for &(u, v) in &mc.cut.edges {
            lfence_on_edge(p, &mut rw, u, v);
        }
        report.push(ProcFences {
            proc_name: f.name.clone(),
            pairs: counts,
            cut: mc.cut.edges.iter().map(|&(u, v)| CutEdge { from: u, to: v, weight: g.weight((u, v)).to_string() }).collect(),
            total_weight: mc.cut.total_weight.to_string(),
            rounds: mc.rounds,
            fell_back: mc.fell_back,
        });
    }
    let (q, map) = rw.finish();
    Ok((q, map, report))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PrivateStackLayout {
    pub proc_name: String,
    pub psp: String,
    pub psp_addr: u64,
    pub base: u64,
    pub end: u64,
    pub frame: u64,
}

fn fresh_name(p: &Program, base: &str) -> String {
    let mut name = base.to_string();
    let mut i = 1;
    while p.data_by_name(&name).is_some() || p.labels.contains_key(&name) {
        name = format!("{base}_{i}");
        i += 1;
    }
    name
}

pub const STACK_FRAMES: u64 = 4;

/// Gives each procedure its own stack and stack-pointer global, switching to it on entry and after calls.
pub fn fps_transform(p: &Program) -> Result<(Program, AddrMap, Vec<PrivateStackLayout>), SerberusError> {
    let procs = procedures(p)?;
    let limit = if p.word_width >= 64 { u64::MAX } else { 1u64 << p.word_width };
    let mut next = p.data_top();
    let mut q = p.clone();
    let mut layout = vec![];
    let mut psps = vec![];
    for f in &procs {
        let name = fresh_name(&q, &format!("PSP_{}", f.name));
        q.data.push(DataDecl { name: name.clone(), label: Label::Pub, addr: next, values: vec![0] });
        psps.push((name, next));
        next += 1;
    }
    for (f, (psp, psp_addr)) in procs.iter().zip(&psps) {
        let k = f.frame;
        let base = next;
        let end = base + STACK_FRAMES * k;
        next = end + k;
        if next > limit {
            return Err(SerberusError::Layout(format!(
                "private stack for `{}` ends at {next}, beyond the {}-bit address space",
                f.name, p.word_width
            )));
        }
        let d = q.data.iter_mut().find(|d| d.name == *psp).expect("psp declared");
        d.values = vec![end];
        q.stacks.push(StackDecl {
            addr: base,
            size: end - base,
            owner: Some(PrivateStack { proc_name: f.name.clone(), psp: psp.clone() }),
        });
        layout.push(PrivateStackLayout { proc_name: f.name.clone(), psp: psp.clone(), psp_addr: *psp_addr, base, end, frame: k });
    }

    let mut rw = Rewriter::new(&q);
    for (f, l) in procs.iter().zip(&layout) {
        let psp = l.psp_addr as i64;
        let load = Instr::Ld { base: Reg::Zr, disp: psp, dst: Reg::Sp };
        let save = Instr::St { base: Reg::Zr, disp: psp, src: Reg::Sp };
        let clip = |op: Opcode, v: u64| Instr::Op { op, dst: Reg::Sp, srcs: vec![Operand::Reg(Reg::Sp), Operand::Imm(v)] };
        if l.frame == 0 {
            rw.after(f.entry, [load.clone(), clip(Opcode::Max, l.base), save.clone()]);
        } else {
            rw.after(f.entry, [load.clone()]);
        }
        for &a in &f.body {
            match &q.instrs[a] {
                Instr::Op { op: Opcode::Sub, dst: Reg::Sp, .. } if l.frame > 0 => {
                    rw.after(a, [clip(Opcode::Max, l.base), save.clone()]);
                }
                Instr::Op { op: Opcode::Add, dst: Reg::Sp, .. } if l.frame > 0 => {
                    rw.after(a, [clip(Opcode::Min, l.end), save.clone()]);
                }
                Instr::Ret if l.frame == 0 => rw.before(a, [clip(Opcode::Min, l.end), save.clone()]),
                Instr::Call(_) => rw.on_fallthrough(a + 1, [load.clone()]),
                _ => {}
            }
        }
    }
    let (out, map) = rw.finish();
    Ok((out, map, layout))
}

/// Zeroes each newly allocated stack frame right after allocation.
pub fn stack_init_transform(p: &Program) -> Result<(Program, AddrMap, usize), SerberusError> {
    let procs = procedures(p)?;
    let mut rw = Rewriter::new(p);
    let mut count = 0;
    for f in &procs {
        for &a in &f.body {
            if let Instr::Op { op: Opcode::Sub, dst: Reg::Sp, .. } = p.instrs[a] {
                rw.after(a, (0..f.frame as i64).map(|d| Instr::St { base: Reg::Sp, disp: d, src: Reg::Zr }));
                count += f.frame as usize;
            }
        }
    }
    let (q, map) = rw.finish();
    Ok((q, map, count))
}

/// Zeroes every non-argument register before each CALL and RET.
pub fn register_cleaning(p: &Program) -> Result<(Program, AddrMap, usize), SerberusError> {
    let mut rw = Rewriter::new(p);
    let mut count = 0;
    for (a, ins) in p.instrs.iter().enumerate() {
        if !ins.is_call_or_ret() {
            continue;
        }
        let args = p.args.get(&a).ok_or(SerberusError::MissingArgs(a))?;
        let target = match ins {
            Instr::Call(r) => Some(*r),
            _ => None,
        };
        let zero: Vec<Instr> = p
            .gprs()
            .filter(|r| !args.contains(r) && Some(*r) != target)
            .map(|r| Instr::mov_imm(r, 0))
            .collect();
        count += zero.len();
        rw.before(a, zero);
    }
    let (q, map) = rw.finish();
    Ok((q, map, count))
}

/// An LFENCE after every JMP, stopping straight-line speculation past it.
pub fn sls_fences(p: &Program) -> (Program, AddrMap, usize) {
    let mut rw = Rewriter::new(p);
    let mut count = 0;
    for (a, ins) in p.instrs.iter().enumerate() {
        if matches!(ins, Instr::Jmp(_)) {
            rw.after(a, [Instr::Lfence]);
            count += 1;
        }
    }
    let (q, map) = rw.finish();
    (q, map, count)
}

/// Comparison baseline: an LFENCE at the start of both successors of every conditional branch.
pub fn intel_lfence(p: &Program) -> (Program, AddrMap, usize) {
    let mut rw = Rewriter::new(p);
    let mut count = 0;
    for (a, ins) in p.instrs.iter().enumerate() {
        if let Instr::Bnz(_, d) = ins {
            rw.after(a, [Instr::Lfence]);
            count += 1;
            if let Some(t) = crate::isa::target(a, *d).filter(|&t| t < p.instrs.len() && t != a + 1) {
                if !rw.has_inside(t, &Instr::Lfence) {
                    rw.before(t, [Instr::Lfence]);
                    count += 1;
                }
            }
        }
    }
    let (q, map) = rw.finish();
    (q, map, count)
}
