use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::*;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown opcode `{name}`")]
    UnknownOpcode { line: usize, name: String },
    #[error("line {line}: duplicate label `{name}`")]
    DuplicateLabel { line: usize, name: String },
    #[error("line {line}: undefined label `{name}`")]
    UndefinedLabel { line: usize, name: String },
    #[error("line {line}: register `{name}` out of range")]
    BadRegister { line: usize, name: String },
    #[error("line {line}: {msg}")]
    Semantic { line: usize, msg: String },
}

type Res<T> = Result<T, ParseError>;

fn syntax(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Syntax { line, msg: msg.into() }
}

fn semantic(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Semantic { line, msg: msg.into() }
}

struct RawInstr {
    line: usize,
    mnemonic: String,
    rest: String,
}

enum Pending {
    Args { line: usize, target: String, regs: String },
    Entry { line: usize, target: String },
    Input { line: usize, reg: String, value: String },
    PStack { line: usize, proc_name: String, psp: String, size: u64, addr: u64 },
}

pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut prog = Program::default();
    let mut raw: Vec<RawInstr> = vec![];
    let mut pending: Vec<Pending> = vec![];
    let mut open_proc: Option<(usize, String, u64, usize)> = None;
    let mut next_data = 0u64;
    let mut entry_set = false;

    for (idx, full) in text.lines().enumerate() {
        let line = idx + 1;
        let mut s = full.split(';').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(colon) = label_prefix(s) {
            let name = s[..colon].trim();
            define_label(&mut prog, name, raw.len(), line, open_proc.as_ref())?;
            s = s[colon + 1..].trim();
            if s.is_empty() {
                continue;
            }
        }
        if let Some(d) = s.strip_prefix('.') {
            let (kw, rest) = split_word(d);
            match kw {
                "width" => {
                    prog.word_width = parse_uint(rest, line)? as u32;
                    if prog.word_width == 0 || prog.word_width > 63 {
                        return Err(semantic(line, "word width must be in 1..=63"));
                    }
                }
                "gprs" => prog.num_gprs = parse_uint(rest, line)? as u8,
                "entry" => {
                    entry_set = true;
                    pending.push(Pending::Entry { line, target: rest.to_string() })
                }
                "proc" => {
                    if open_proc.is_some() {
                        return Err(syntax(line, "nested .proc"));
                    }
                    let (name, attrs) = split_word(rest);
                    if name.is_empty() {
                        return Err(syntax(line, ".proc needs a name"));
                    }
                    let frame = attr(attrs, "frame", line)?.unwrap_or(0);
                    if prog.labels.contains_key(name) {
                        return Err(ParseError::DuplicateLabel { line, name: name.into() });
                    }
                    prog.labels.insert(name.to_string(), raw.len());
                    open_proc = Some((raw.len(), name.to_string(), frame, line));
                }
                "endproc" => {
                    let (start, name, frame, _) =
                        open_proc.take().ok_or_else(|| syntax(line, ".endproc without .proc"))?;
                    prog.procs.push(ProcDecl { name, start, end: raw.len(), frame });
                }
                "data" => {
                    let decl = parse_data(rest, line, next_data)?;
                    next_data = next_data.max(decl.addr + decl.values.len() as u64);
                    prog.data.push(decl);
                }
                "stack" => {
                    let (size, addr) = parse_region(rest, line)?;
                    let addr = addr.unwrap_or(next_data);
                    next_data = next_data.max(addr + size);
                    prog.stacks.push(StackDecl { addr, size, owner: None });
                }
                "pstack" => {
                    let (proc_name, attrs) = split_word(rest);
                    let psp = attr_str(attrs, "psp").ok_or_else(|| syntax(line, ".pstack needs psp="))?;
                    let (size, addr) = parse_region(attrs, line)?;
                    let addr = addr.ok_or_else(|| syntax(line, ".pstack needs @ address"))?;
                    pending.push(Pending::PStack {
                        line,
                        proc_name: proc_name.to_string(),
                        psp,
                        size,
                        addr,
                    });
                }
                "args" => {
                    let (target, regs) = split_eq(rest, line)?;
                    pending.push(Pending::Args { line, target, regs });
                }
                "input" => {
                    let (reg, value) = split_eq(rest, line)?;
                    pending.push(Pending::Input { line, reg, value });
                }
                _ => return Err(syntax(line, format!("unknown directive `.{kw}`"))),
            }
            continue;
        }
        let (m, rest) = split_word(s);
        raw.push(RawInstr { line, mnemonic: m.to_ascii_uppercase(), rest: rest.to_string() });
    }
    if let Some((_, name, _, line)) = open_proc {
        return Err(syntax(line, format!("procedure `{name}` is missing .endproc")));
    }

    let w = prog.word_width;
    for d in &mut prog.data {
        for v in &mut d.values {
            *v = wrap(*v, w);
        }
    }
    let ctx = Ctx { prog: &prog };
    let mut instrs = Vec::with_capacity(raw.len());
    let mut regions = BTreeMap::new();
    for (addr, r) in raw.iter().enumerate() {
        let (ins, region) = ctx.instr(r, addr)?;
        if let Some(reg) = region {
            regions.insert(addr, reg);
        }
        instrs.push(ins);
    }
    prog.instrs = instrs;
    prog.regions = regions;

    for p in pending {
        match p {
            Pending::Args { line, target, regs } => {
                let addr = ctx_code_addr(&prog, &target, line)?;
                if !matches!(prog.instrs.get(addr), Some(Instr::Call(_) | Instr::Ret)) {
                    return Err(semantic(line, format!(".args target `{target}` is not a CALL or RET")));
                }
                let mut set = BTreeSet::new();
                for t in regs.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                    set.insert(Ctx { prog: &prog }.reg(t, line)?);
                }
                prog.args.insert(addr, set);
            }
            Pending::Entry { line, target } => prog.entry = ctx_code_addr(&prog, &target, line)?,
            Pending::Input { line, reg, value } => {
                let r = Ctx { prog: &prog }.reg(&reg, line)?;
                if !r.is_gpr() {
                    return Err(semantic(line, "inputs must be general-purpose registers"));
                }
                let v = parse_int(&value, line)?;
                prog.inputs.push((r, wrap(v as u64, w)));
            }
            Pending::PStack { line, proc_name, psp, size, addr } => {
                if prog.proc_by_name(&proc_name).is_none() {
                    return Err(semantic(line, format!("unknown procedure `{proc_name}`")));
                }
                if prog.data_by_name(&psp).is_none() {
                    return Err(semantic(line, format!("unknown PSP global `{psp}`")));
                }
                prog.stacks.push(StackDecl { addr, size, owner: Some(PrivateStack { proc_name, psp }) });
            }
        }
    }
    if !entry_set {
        prog.entry = 0;
    }
    Ok(prog)
}

fn ctx_code_addr(prog: &Program, target: &str, line: usize) -> Res<usize> {
    let t = target.trim();
    if let Some(n) = t.strip_prefix('@') {
        return Ok(parse_uint(n, line)? as usize);
    }
    prog.labels
        .get(t)
        .copied()
        .ok_or_else(|| ParseError::UndefinedLabel { line, name: t.to_string() })
}

fn label_prefix(s: &str) -> Option<usize> {
    let colon = s.find(':')?;
    let head = &s[..colon];
    (!head.is_empty() && head.chars().all(is_ident_char)).then_some(colon)
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$'
}

fn define_label(
    prog: &mut Program,
    name: &str,
    addr: usize,
    line: usize,
    open: Option<&(usize, String, u64, usize)>,
) -> Res<()> {
    if let Some(&a) = prog.labels.get(name) {
        let is_proc_label = open.is_some_and(|(start, pname, _, _)| pname == name && *start == addr);
        if is_proc_label && a == addr {
            return Ok(());
        }
        return Err(ParseError::DuplicateLabel { line, name: name.into() });
    }
    prog.labels.insert(name.to_string(), addr);
    Ok(())
}

fn split_word(s: &str) -> (&str, &str) {
    let s = s.trim();
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim()),
        None => (s, ""),
    }
}

fn split_eq(s: &str, line: usize) -> Res<(String, String)> {
    let (a, b) = s.split_once('=').ok_or_else(|| syntax(line, "expected `=`"))?;
    Ok((a.trim().to_string(), b.trim().to_string()))
}

fn attr_str(s: &str, key: &str) -> Option<String> {
    s.split_whitespace()
        .find_map(|w| w.strip_prefix(key).and_then(|r| r.strip_prefix('=')).map(str::to_string))
}

fn attr(s: &str, key: &str, line: usize) -> Res<Option<u64>> {
    attr_str(s, key).map(|v| parse_uint(&v, line)).transpose()
}

fn parse_region(s: &str, line: usize) -> Res<(u64, Option<u64>)> {
    let size = attr(s, "size", line)?.ok_or_else(|| syntax(line, "missing size="))?;
    let addr = match s.split_once('@') {
        Some((_, a)) => Some(parse_uint(split_word(a).0, line)?),
        None => None,
    };
    Ok((size, addr))
}

fn parse_data(s: &str, line: usize, next: u64) -> Res<DataDecl> {
    let (head, vals) = s.split_once('=').ok_or_else(|| syntax(line, ".data needs `=`"))?;
    let mut words = head.split_whitespace();
    let name = words.next().ok_or_else(|| syntax(line, ".data needs a name"))?;
    let label = match words.next().map(|w| w.to_ascii_uppercase()) {
        Some(w) if w == "PUB" => Label::Pub,
        Some(w) if w == "SEC" => Label::Sec,
        _ => return Err(syntax(line, ".data needs PUB or SEC")),
    };
    let addr = match words.next() {
        None => next,
        Some("@") => parse_uint(words.next().ok_or_else(|| syntax(line, "missing address"))?, line)?,
        Some(w) if w.starts_with('@') => parse_uint(&w[1..], line)?,
        Some(w) => return Err(syntax(line, format!("unexpected `{w}`"))),
    };
    let values = vals
        .split(',')
        .map(|v| parse_int(v.trim(), line).map(|x| x as u64))
        .collect::<Res<Vec<_>>>()?;
    if values.is_empty() {
        return Err(syntax(line, ".data needs at least one value"));
    }
    Ok(DataDecl { name: name.to_string(), label, addr, values })
}

fn parse_uint(s: &str, line: usize) -> Res<u64> {
    let v = parse_int(s, line)?;
    u64::try_from(v).map_err(|_| syntax(line, format!("expected a non-negative integer, got `{s}`")))
}

fn parse_int(s: &str, line: usize) -> Res<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(h) = body.strip_prefix("0x") {
        i64::from_str_radix(h, 16)
    } else {
        body.parse::<i64>()
    }
    .map_err(|_| syntax(line, format!("bad integer `{s}`")))?;
    Ok(if neg { -v } else { v })
}

fn looks_numeric(s: &str) -> bool {
    let b = s.trim_start_matches(['+', '-']);
    b.chars().next().is_some_and(|c| c.is_ascii_digit())
}

struct Ctx<'a> {
    prog: &'a Program,
}

impl Ctx<'_> {
    fn reg(&self, s: &str, line: usize) -> Res<Reg> {
        let t = s.trim().to_ascii_lowercase();
        let r = match t.as_str() {
            "sp" => Reg::Sp,
            "zr" => Reg::Zr,
            "pc" => Reg::Pc,
            _ => {
                let n = t
                    .strip_prefix('r')
                    .and_then(|n| n.parse::<u8>().ok())
                    .ok_or_else(|| syntax(line, format!("expected register, got `{s}`")))?;
                if n >= self.prog.num_gprs {
                    return Err(ParseError::BadRegister { line, name: s.trim().into() });
                }
                Reg::Gpr(n)
            }
        };
        Ok(r)
    }

    fn src(&self, s: &str, line: usize) -> Res<Reg> {
        let r = self.reg(s, line)?;
        if r == Reg::Pc {
            return Err(semantic(line, "PC cannot be an operand"));
        }
        Ok(r)
    }

    fn dst(&self, s: &str, line: usize) -> Res<Reg> {
        let r = self.reg(s, line)?;
        if !(r.is_gpr() || r == Reg::Sp) {
            return Err(semantic(line, format!("`{s}` cannot be written")));
        }
        Ok(r)
    }

    fn data_addr(&self, name: &str, line: usize) -> Res<u64> {
        self.prog
            .data_by_name(name)
            .map(|d| d.addr)
            .ok_or_else(|| ParseError::UndefinedLabel { line, name: name.to_string() })
    }

    fn operand(&self, s: &str, line: usize) -> Res<Operand> {
        let t = s.trim();
        if looks_numeric(t) {
            return Ok(Operand::Imm(wrap(parse_int(t, line)? as u64, self.prog.word_width)));
        }
        if let Some(n) = t.strip_prefix('@') {
            return Ok(Operand::Code(parse_uint(n, line)? as usize));
        }
        if let Ok(r) = self.reg(t, line) {
            if r == Reg::Pc {
                return Err(semantic(line, "PC cannot be an operand"));
            }
            return Ok(Operand::Reg(r));
        }
        if let Some(&a) = self.prog.labels.get(t) {
            return Ok(Operand::Code(a));
        }
        Ok(Operand::Imm(self.data_addr(t, line)?))
    }

    fn branch(&self, s: &str, at: usize, line: usize) -> Res<i64> {
        let t = s.trim();
        if looks_numeric(t) {
            return parse_int(t, line);
        }
        let a = ctx_code_addr(self.prog, t, line)?;
        Ok(a as i64 - at as i64 - 1)
    }

    /// `[base+term-term...]`
    fn mem(&self, s: &str, line: usize) -> Res<(Reg, i64)> {
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|x| x.strip_suffix(']'))
            .ok_or_else(|| syntax(line, format!("expected memory operand, got `{s}`")))?;
        let mut terms = vec![];
        let mut cur = String::new();
        let mut sign = 1i64;
        for c in inner.chars() {
            if c == '+' || c == '-' {
                terms.push((sign, std::mem::take(&mut cur)));
                sign = if c == '-' { -1 } else { 1 };
            } else if !c.is_whitespace() {
                cur.push(c);
            }
        }
        terms.push((sign, cur));
        let (first_sign, base) = terms.remove(0);
        if first_sign != 1 || base.is_empty() {
            return Err(syntax(line, "memory operand must start with a base register"));
        }
        let base = self.src(&base, line)?;
        let mut disp = 0i64;
        for (sg, t) in terms {
            if t.is_empty() {
                return Err(syntax(line, "empty displacement term"));
            }
            let v = if looks_numeric(&t) { parse_int(&t, line)? } else { self.data_addr(&t, line)? as i64 };
            disp += sg * v;
        }
        Ok((base, disp))
    }

    fn instr(&self, r: &RawInstr, at: usize) -> Res<(Instr, Option<String>)> {
        let line = r.line;
        let mut rest = r.rest.trim().to_string();
        let mut region = None;
        if r.mnemonic == "LD" {
            if let Some(i) = rest.rfind('@') {
                let name = rest[i + 1..].trim().to_string();
                if self.prog.data_by_name(&name).is_none() {
                    return Err(semantic(line, format!("unknown region `{name}`")));
                }
                region = Some(name);
                rest = rest[..i].trim().to_string();
            }
        }
        let ops = split_operands(&rest);
        let want = |n: usize| -> Res<()> {
            if ops.len() != n {
                Err(syntax(line, format!("{} expects {n} operand(s), got {}", r.mnemonic, ops.len())))
            } else {
                Ok(())
            }
        };
        let ins = match r.mnemonic.as_str() {
            "JMP" => {
                want(1)?;
                Instr::Jmp(self.branch(&ops[0], at, line)?)
            }
            "BNZ" => {
                want(2)?;
                Instr::Bnz(self.src(&ops[0], line)?, self.branch(&ops[1], at, line)?)
            }
            "CALL" => {
                want(1)?;
                Instr::Call(self.src(&ops[0], line)?)
            }
            "RET" => {
                want(0)?;
                Instr::Ret
            }
            "ENDBR" => {
                want(0)?;
                Instr::Endbr
            }
            "LFENCE" => {
                want(0)?;
                Instr::Lfence
            }
            "LD" => {
                want(2)?;
                let (base, disp) = self.mem(&ops[0], line)?;
                Instr::Ld { base, disp, dst: self.dst(&ops[1], line)? }
            }
            "ST" => {
                want(2)?;
                let (base, disp) = self.mem(&ops[0], line)?;
                Instr::St { base, disp, src: self.src(&ops[1], line)? }
            }
            "DIV" => {
                want(3)?;
                Instr::Div {
                    a: self.src(&ops[0], line)?,
                    b: self.src(&ops[1], line)?,
                    dst: self.dst(&ops[2], line)?,
                }
            }
            m => {
                let op = Opcode::from_mnemonic(m)
                    .ok_or_else(|| ParseError::UnknownOpcode { line, name: m.to_string() })?;
                want(op.arity() + 1)?;
                let dst = self.dst(&ops[0], line)?;
                let srcs = ops[1..].iter().map(|o| self.operand(o, line)).collect::<Res<Vec<_>>>()?;
                if op == Opcode::Const && matches!(srcs[0], Operand::Reg(_)) {
                    return Err(semantic(line, "CONST takes an immediate"));
                }
                Instr::Op { op, dst, srcs }
            }
        };
        if region.is_some() && !ins.is_nca_load() {
            return Err(semantic(line, "region annotations apply to non-constant-address loads only"));
        }
        Ok((ins, region))
    }
}

fn split_operands(s: &str) -> Vec<String> {
    let mut out = vec![];
    let mut depth = 0;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' => {
                depth += 1;
                cur.push(c)
            }
            ']' => {
                depth -= 1;
                cur.push(c)
            }
            ',' if depth == 0 => out.push(std::mem::take(&mut cur).trim().to_string()),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}
