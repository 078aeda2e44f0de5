//! The abstract instruction set, programs and their textual form.

mod parse;
mod print;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use parse::{parse_program, ParseError};
pub use print::{instr_text, print_program};

pub const DEFAULT_WORD_WIDTH: u32 = 16;
pub const DEFAULT_GPRS: u8 = 8;

/// Security label. `Pub < Sec`, so `max` is the lattice join.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "PUB")]
    Pub,
    #[serde(rename = "SEC")]
    Sec,
}

impl Label {
    pub fn join(self, other: Label) -> Label {
        self.max(other)
    }

    pub fn is_sec(self) -> bool {
        self == Label::Sec
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Pub => "PUB",
            Label::Sec => "SEC",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabeledValue {
    pub value: u64,
    pub label: Label,
}

impl LabeledValue {
    pub fn new(value: u64, label: Label, width: u32) -> Self {
        LabeledValue { value: wrap(value, width), label }
    }

    pub fn public(value: u64, width: u32) -> Self {
        Self::new(value, Label::Pub, width)
    }

    pub fn zero() -> Self {
        LabeledValue { value: 0, label: Label::Pub }
    }

    pub fn declassified(self) -> Self {
        LabeledValue { label: Label::Pub, ..self }
    }
}

impl fmt::Display for LabeledValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.value, self.label)
    }
}

pub fn wrap(value: u64, width: u32) -> u64 {
    if width >= 64 {
        value
    } else {
        value & ((1u64 << width) - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reg {
    Gpr(u8),
    Sp,
    Pc,
    Zr,
}

impl Reg {
    pub fn is_gpr(self) -> bool {
        matches!(self, Reg::Gpr(_))
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::Gpr(i) => write!(f, "r{i}"),
            Reg::Sp => f.write_str("sp"),
            Reg::Pc => f.write_str("pc"),
            Reg::Zr => f.write_str("zr"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Mov,
    Add,
    Sub,
    Xor,
    And,
    Or,
    Mul,
    Max,
    Min,
    Const,
}

impl Opcode {
    pub const ALL: [Opcode; 10] = [
        Opcode::Mov,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Xor,
        Opcode::And,
        Opcode::Or,
        Opcode::Mul,
        Opcode::Max,
        Opcode::Min,
        Opcode::Const,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Mov => "MOV",
            Opcode::Add => "ADD",
            Opcode::Sub => "SUB",
            Opcode::Xor => "XOR",
            Opcode::And => "AND",
            Opcode::Or => "OR",
            Opcode::Mul => "MUL",
            Opcode::Max => "MAX",
            Opcode::Min => "MIN",
            Opcode::Const => "CONST",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL.into_iter().find(|o| o.mnemonic().eq_ignore_ascii_case(s))
    }

    pub fn arity(self) -> usize {
        match self {
            Opcode::Mov | Opcode::Const => 1,
            _ => 2,
        }
    }

    /// Applies the operation to already-wrapped operands.
    pub fn eval(self, args: &[u64], width: u32) -> u64 {
        let a = args.first().copied().unwrap_or(0);
        let b = args.get(1).copied().unwrap_or(0);
        let r = match self {
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
        wrap(r, width)
    }
}

/// An OP operand. `Code` holds an instruction address and follows it through rewrites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(u64),
    Code(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instr {
    Jmp(i64),
    Bnz(Reg, i64),
    Call(Reg),
    Ret,
    Endbr,
    Lfence,
    Ld { base: Reg, disp: i64, dst: Reg },
    St { base: Reg, disp: i64, src: Reg },
    Op { op: Opcode, dst: Reg, srcs: Vec<Operand> },
    Div { a: Reg, b: Reg, dst: Reg },
}

impl Instr {
    pub fn mov_imm(dst: Reg, imm: u64) -> Instr {
        Instr::Op { op: Opcode::Mov, dst, srcs: vec![Operand::Imm(imm)] }
    }

    pub fn op_imm(op: Opcode, dst: Reg, src: Reg, imm: u64) -> Instr {
        Instr::Op { op, dst, srcs: vec![Operand::Reg(src), Operand::Imm(imm)] }
    }

    /// Register written by the instruction, if any (PC excluded).
    pub fn def(&self) -> Option<Reg> {
        match self {
            Instr::Ld { dst, .. } | Instr::Op { dst, .. } | Instr::Div { dst, .. } => Some(*dst),
            _ => None,
        }
    }

    /// Registers read by the instruction, ZR excluded.
    pub fn uses(&self) -> Vec<Reg> {
        let mut v = match self {
            Instr::Bnz(r, _) | Instr::Call(r) => vec![*r],
            Instr::Ld { base, .. } => vec![*base],
            Instr::St { base, src, .. } => vec![*base, *src],
            Instr::Op { srcs, .. } => srcs
                .iter()
                .filter_map(|o| match o {
                    Operand::Reg(r) => Some(*r),
                    _ => None,
                })
                .collect(),
            Instr::Div { a, b, .. } => vec![*a, *b],
            _ => vec![],
        };
        v.retain(|r| *r != Reg::Zr);
        v
    }

    /// Operands exposed as observations when the instruction executes.
    pub fn sensitive_operands(&self) -> Vec<Reg> {
        match self {
            Instr::Bnz(r, _) | Instr::Call(r) => vec![*r],
            Instr::Ld { base, .. } | Instr::St { base, .. } => vec![*base],
            Instr::Div { a, b, .. } => vec![*a, *b],
            _ => vec![],
        }
    }

    pub fn is_transmitter(&self) -> bool {
        !self.sensitive_operands().is_empty()
    }

    pub fn is_call_or_ret(&self) -> bool {
        matches!(self, Instr::Call(_) | Instr::Ret)
    }

    /// Constant-address memory access: base register is ZR or SP.
    pub fn is_ca_access(&self) -> bool {
        matches!(self, Instr::Ld { base: Reg::Zr | Reg::Sp, .. } | Instr::St { base: Reg::Zr | Reg::Sp, .. })
    }

    pub fn is_nca_load(&self) -> bool {
        matches!(self, Instr::Ld { base, .. } if !matches!(base, Reg::Zr | Reg::Sp))
    }

    pub fn is_nca_store(&self) -> bool {
        matches!(self, Instr::St { base, .. } if !matches!(base, Reg::Zr | Reg::Sp))
    }

    pub fn is_ca_load(&self) -> bool {
        matches!(self, Instr::Ld { base: Reg::Zr | Reg::Sp, .. })
    }

    pub fn is_stack_load(&self) -> bool {
        matches!(self, Instr::Ld { base: Reg::Sp, .. })
    }

    /// Intraprocedural successors.
    pub fn succs(&self, at: usize) -> Vec<usize> {
        let next = at + 1;
        match self {
            Instr::Ret => vec![],
            Instr::Jmp(d) => target(at, *d).into_iter().collect(),
            Instr::Bnz(_, d) => {
                let mut v = vec![next];
                if let Some(t) = target(at, *d) {
                    if t != next {
                        v.push(t);
                    }
                }
                v
            }
            _ => vec![next],
        }
    }
}

/// Branch target `at + 1 + d`, or `None` if negative.
pub fn target(at: usize, d: i64) -> Option<usize> {
    let t = at as i64 + 1 + d;
    (t >= 0).then_some(t as usize)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Observation {
    Eps,
    Bnz(LabeledValue),
    Call(LabeledValue),
    Ld(LabeledValue),
    St(LabeledValue),
    Div(LabeledValue, LabeledValue),
}

impl Observation {
    pub fn is_sec(&self) -> bool {
        match self {
            Observation::Eps => false,
            Observation::Bnz(v) | Observation::Call(v) | Observation::Ld(v) | Observation::St(v) => {
                v.label.is_sec()
            }
            Observation::Div(a, b) => a.label.is_sec() || b.label.is_sec(),
        }
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observation::Eps => f.write_str("eps"),
            Observation::Bnz(v) => write!(f, "bnz {v}"),
            Observation::Call(v) => write!(f, "call {v}"),
            Observation::Ld(v) => write!(f, "ld {v}"),
            Observation::St(v) => write!(f, "st {v}"),
            Observation::Div(a, b) => write!(f, "div {a} {b}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcDecl {
    pub name: String,
    /// First instruction address (the ENDBR).
    pub start: usize,
    /// One past the last instruction address.
    pub end: usize,
    pub frame: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDecl {
    pub name: String,
    pub label: Label,
    pub addr: u64,
    pub values: Vec<u64>,
}

impl DataDecl {
    pub fn range(&self) -> std::ops::Range<u64> {
        self.addr..self.addr + self.values.len() as u64
    }
}

/// A zero-initialized public stack region. Private stacks name their owner and PSP global.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackDecl {
    pub addr: u64,
    pub size: u64,
    pub owner: Option<PrivateStack>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateStack {
    pub proc_name: String,
    pub psp: String,
}

impl StackDecl {
    pub fn range(&self) -> std::ops::Range<u64> {
        self.addr..self.addr + self.size
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub word_width: u32,
    pub num_gprs: u8,
    pub entry: usize,
    pub instrs: Vec<Instr>,
    /// Label name to instruction address.
    pub labels: BTreeMap<String, usize>,
    pub procs: Vec<ProcDecl>,
    pub data: Vec<DataDecl>,
    pub stacks: Vec<StackDecl>,
    /// Calling convention: CALL/RET address to argument registers.
    pub args: BTreeMap<usize, BTreeSet<Reg>>,
    /// NCA load address to the data region it is declared to point into.
    pub regions: BTreeMap<usize, String>,
    /// Public register inputs with their default values.
    pub inputs: Vec<(Reg, u64)>,
}

impl Default for Program {
    fn default() -> Self {
        Program {
            word_width: DEFAULT_WORD_WIDTH,
            num_gprs: DEFAULT_GPRS,
            entry: 0,
            instrs: vec![],
            labels: BTreeMap::new(),
            procs: vec![],
            data: vec![],
            stacks: vec![],
            args: BTreeMap::new(),
            regions: BTreeMap::new(),
            inputs: vec![],
        }
    }
}

impl Program {
    pub fn instr(&self, addr: u64) -> Option<&Instr> {
        usize::try_from(addr).ok().and_then(|a| self.instrs.get(a))
    }

    pub fn gprs(&self) -> impl Iterator<Item = Reg> {
        (0..self.num_gprs).map(Reg::Gpr)
    }

    pub fn wrap(&self, v: u64) -> u64 {
        wrap(v, self.word_width)
    }

    pub fn endbrs(&self) -> Vec<usize> {
        (0..self.instrs.len()).filter(|&a| self.instrs[a] == Instr::Endbr).collect()
    }

    /// Addresses directly following a CALL.
    pub fn post_call_sites(&self) -> Vec<usize> {
        (1..=self.instrs.len())
            .filter(|&a| matches!(self.instrs[a - 1], Instr::Call(_)))
            .collect()
    }

    pub fn is_stack_addr(&self, a: u64) -> bool {
        self.stacks.iter().any(|s| s.range().contains(&a))
    }

    pub fn data_label(&self, a: u64) -> Option<Label> {
        self.data.iter().find(|d| d.range().contains(&a)).map(|d| d.label)
    }

    pub fn data_by_name(&self, name: &str) -> Option<&DataDecl> {
        self.data.iter().find(|d| d.name == name)
    }

    pub fn is_mapped(&self, a: u64) -> bool {
        self.data_label(a).is_some() || self.is_stack_addr(a)
    }

    /// All mapped data addresses in ascending order.
    pub fn data_addrs(&self) -> BTreeSet<u64> {
        let mut s: BTreeSet<u64> = self.data.iter().flat_map(|d| d.range()).collect();
        s.extend(self.stacks.iter().flat_map(|st| st.range()));
        s
    }

    /// Initial labeled contents of every mapped address.
    pub fn initial_memory(&self) -> BTreeMap<u64, LabeledValue> {
        let mut m = BTreeMap::new();
        for st in &self.stacks {
            for a in st.range() {
                m.insert(a, LabeledValue::zero());
            }
        }
        for d in &self.data {
            for (i, v) in d.values.iter().enumerate() {
                m.insert(d.addr + i as u64, LabeledValue::new(*v, d.label, self.word_width));
            }
        }
        m
    }

    /// SP starts at the top of the first shared stack region.
    pub fn initial_sp(&self) -> u64 {
        self.stacks
            .iter()
            .find(|s| s.owner.is_none())
            .map(|s| s.addr + s.size)
            .unwrap_or(0)
    }

    pub fn proc_of(&self, addr: usize) -> Option<&ProcDecl> {
        self.procs.iter().find(|p| (p.start..p.end).contains(&addr))
    }

    pub fn proc_by_name(&self, name: &str) -> Option<&ProcDecl> {
        self.procs.iter().find(|p| p.name == name)
    }

    pub fn label_at(&self, addr: usize) -> Option<&str> {
        self.labels.iter().find(|(_, &a)| a == addr).map(|(n, _)| n.as_str())
    }

    pub fn has_secrets(&self) -> bool {
        self.data.iter().any(|d| d.label.is_sec())
    }

    /// One past the highest mapped or reserved data address.
    pub fn data_top(&self) -> u64 {
        let d = self.data.iter().map(|d| d.addr + d.values.len() as u64);
        let s = self.stacks.iter().map(|s| {
            let under = match &s.owner {
                Some(o) => self.proc_by_name(&o.proc_name).map(|p| p.frame).unwrap_or(0),
                None => 0,
            };
            s.addr + s.size + under
        });
        d.chain(s).max().unwrap_or(0)
    }
}
