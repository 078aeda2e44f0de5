use std::fmt::Write;

use super::*;

pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    let _ = writeln!(out, ".width {}", p.word_width);
    let _ = writeln!(out, ".gprs {}", p.num_gprs);
    let _ = writeln!(out, ".entry {}", code_ref(p, p.entry));
    // Addresses are only spelled out where the parser would not pick the same one.
    let mut next = 0;
    let mut at = |addr: u64, len: u64| {
        let s = if addr == next { String::new() } else { format!(" @ {addr}") };
        next = next.max(addr + len);
        s
    };
    for d in &p.data {
        let vals: Vec<String> = d.values.iter().map(u64::to_string).collect();
        let _ = writeln!(out, ".data {} {}{} = {}", d.name, d.label, at(d.addr, d.values.len() as u64), vals.join(", "));
    }
    for (r, v) in &p.inputs {
        let _ = writeln!(out, ".input {r} = {v}");
    }

    let mut labels_at: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (n, &a) in &p.labels {
        labels_at.entry(a).or_default().push(n);
    }
    for (addr, ins) in p.instrs.iter().enumerate() {
        for pr in p.procs.iter().filter(|pr| pr.end == addr && pr.start != addr) {
            let _ = writeln!(out, ".endproc  ; {}", pr.name);
        }
        let starting: Vec<&ProcDecl> = p.procs.iter().filter(|pr| pr.start == addr).collect();
        for pr in &starting {
            if pr.start == pr.end {
                continue;
            }
            let _ = writeln!(out, "\n.proc {} frame={}", pr.name, pr.frame);
        }
        if let Some(names) = labels_at.get(&addr) {
            for n in names {
                if starting.iter().any(|pr| pr.name == *n) {
                    continue;
                }
                let _ = writeln!(out, "{n}:");
            }
        }
        let mut line = format!("    {}", instr_text(p, addr, ins));
        if let Some(r) = p.regions.get(&addr) {
            let _ = write!(line, " @{r}");
        }
        let _ = writeln!(out, "{line}");
    }
    for pr in p.procs.iter().filter(|pr| pr.end == p.instrs.len() && pr.start != pr.end) {
        let _ = writeln!(out, ".endproc  ; {}", pr.name);
    }
    for pr in p.procs.iter().filter(|pr| pr.start == pr.end) {
        let _ = writeln!(out, ".proc {} frame={}\n.endproc", pr.name, pr.frame);
    }
    if !p.args.is_empty() {
        out.push('\n');
    }
    for (a, regs) in &p.args {
        let rs: Vec<String> = regs.iter().map(Reg::to_string).collect();
        let _ = writeln!(out, ".args {} = {}", code_ref(p, *a), rs.join(", "));
    }
    for s in p.stacks.iter().filter(|s| s.owner.is_none()) {
        let _ = writeln!(out, ".stack size={}{}", s.size, at(s.addr, s.size));
    }
    for (s, o) in p.stacks.iter().filter_map(|s| Some((s, s.owner.as_ref()?))) {
        let _ = writeln!(out, ".pstack {} psp={} size={} @ {}", o.proc_name, o.psp, s.size, s.addr);
    }
    out
}

fn code_ref(p: &Program, addr: usize) -> String {
    match p.label_at(addr) {
        Some(l) => l.to_string(),
        None => format!("@{addr}"),
    }
}

fn branch_ref(p: &Program, at: usize, d: i64) -> String {
    match target(at, d).and_then(|t| p.label_at(t)) {
        Some(l) => l.to_string(),
        None => format!("{d:+}"),
    }
}

fn mem(base: Reg, disp: i64) -> String {
    if disp < 0 {
        format!("[{base}{disp}]")
    } else {
        format!("[{base}+{disp}]")
    }
}

/// One instruction in assembly syntax, with branch targets shown as labels where possible.
pub fn instr_text(p: &Program, at: usize, ins: &Instr) -> String {
    match ins {
        Instr::Jmp(d) => format!("JMP {}", branch_ref(p, at, *d)),
        Instr::Bnz(r, d) => format!("BNZ {r}, {}", branch_ref(p, at, *d)),
        Instr::Call(r) => format!("CALL {r}"),
        Instr::Ret => "RET".into(),
        Instr::Endbr => "ENDBR".into(),
        Instr::Lfence => "LFENCE".into(),
        Instr::Ld { base, disp, dst } => format!("LD {}, {dst}", mem(*base, *disp)),
        Instr::St { base, disp, src } => format!("ST {}, {src}", mem(*base, *disp)),
        Instr::Div { a, b, dst } => format!("DIV {a}, {b}, {dst}"),
        Instr::Op { op, dst, srcs } => {
            let mut s = format!("{} {dst}", op.mnemonic());
            for o in srcs {
                s.push_str(", ");
                match o {
                    Operand::Reg(r) => s.push_str(&r.to_string()),
                    Operand::Imm(v) => s.push_str(&v.to_string()),
                    Operand::Code(a) => s.push_str(&code_ref(p, *a)),
                }
            }
            s
        }
    }
}
