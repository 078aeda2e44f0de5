use std::collections::BTreeMap;

use crate::isa::{target, Instr, Operand, Program};

/// Where each original address ended up after a rewrite.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AddrMap {
    /// New address of each original instruction.
    pub new_addr: Vec<usize>,
    /// New address that branches to an original address (or one past the end) now target.
    pub label: Vec<usize>,
    /// Original address of each new instruction, `None` for inserted ones.
    pub origin: Vec<Option<usize>>,
}

impl AddrMap {
    pub fn identity(n: usize) -> Self {
        AddrMap { new_addr: (0..n).collect(), label: (0..=n).collect(), origin: (0..n).map(Some).collect() }
    }

    /// The map of running `first` and then `then`.
    pub fn compose(first: &AddrMap, then: &AddrMap) -> AddrMap {
        AddrMap {
            new_addr: first.new_addr.iter().map(|&a| then.new_addr[a]).collect(),
            label: first.label.iter().map(|&a| then.label[a]).collect(),
            origin: then.origin.iter().map(|o| o.and_then(|a| first.origin[a])).collect(),
        }
    }

    pub fn inserted(&self) -> usize {
        self.origin.iter().filter(|o| o.is_none()).count()
    }
}

struct Block {
    anchor: usize,
    body: Vec<Instr>,
    jump_to: usize,
}

/// Collects insertions against the original addresses of a program, then lays out the result.
pub(crate) struct Rewriter<'p> {
    p: &'p Program,
    /// Before an address, reached only by falling through from the previous instruction (or by returning to it).
    outside: BTreeMap<usize, Vec<Instr>>,
    /// Before an address, reached by every path to it, branches included.
    inside: BTreeMap<usize, Vec<Instr>>,
    blocks: Vec<Block>,
    redirect: BTreeMap<usize, usize>,
}

impl<'p> Rewriter<'p> {
    pub fn new(p: &'p Program) -> Self {
        Rewriter { p, outside: BTreeMap::new(), inside: BTreeMap::new(), blocks: vec![], redirect: BTreeMap::new() }
    }

    pub fn before(&mut self, a: usize, ins: impl IntoIterator<Item = Instr>) {
        self.inside.entry(a).or_default().extend(ins);
    }

    pub fn on_fallthrough(&mut self, a: usize, ins: impl IntoIterator<Item = Instr>) {
        self.outside.entry(a).or_default().extend(ins);
    }

    pub fn after(&mut self, a: usize, ins: impl IntoIterator<Item = Instr>) {
        self.on_fallthrough(a + 1, ins);
    }

    pub fn has_outside(&self, a: usize, ins: &Instr) -> bool {
        self.outside.get(&a).is_some_and(|v| v.contains(ins))
    }

    pub fn has_inside(&self, a: usize, ins: &Instr) -> bool {
        self.inside.get(&a).is_some_and(|v| v.contains(ins))
    }

    /// Sends the taken edge of the branch at `u` through `body` before it continues to its old target.
    pub fn split_taken(&mut self, u: usize, body: Vec<Instr>) -> bool {
        let t = match self.p.instrs[u] {
            Instr::Jmp(d) | Instr::Bnz(_, d) => target(u, d),
            _ => None,
        };
        let Some(t) = t.filter(|&t| t <= self.p.instrs.len()) else { return false };
        if self.redirect.contains_key(&u) {
            return true;
        }
        let anchor = match self.p.proc_of(u) {
            Some(d) => d.end,
            None => self.p.endbrs().into_iter().find(|&e| e > u).unwrap_or(self.p.instrs.len()),
        };
        self.redirect.insert(u, self.blocks.len());
        self.blocks.push(Block { anchor, body, jump_to: t });
        true
    }

    pub fn finish(self) -> (Program, AddrMap) {
        let p = self.p;
        let n = p.instrs.len();
        let mut out: Vec<Instr> = vec![];
        let mut origin: Vec<Option<usize>> = vec![];
        let mut new_addr = vec![0; n];
        let mut label = vec![0; n + 1];
        let mut block_at = vec![0; self.blocks.len()];
        let mut block_jumps = vec![];
        for a in 0..=n {
            for ins in self.outside.get(&a).into_iter().flatten() {
                out.push(ins.clone());
                origin.push(None);
            }
            for (i, b) in self.blocks.iter().enumerate().filter(|(_, b)| b.anchor == a) {
                block_at[i] = out.len();
                for ins in &b.body {
                    out.push(ins.clone());
                    origin.push(None);
                }
                block_jumps.push((out.len(), b.jump_to));
                out.push(Instr::Jmp(0));
                origin.push(None);
            }
            label[a] = out.len();
            for ins in self.inside.get(&a).into_iter().flatten() {
                out.push(ins.clone());
                origin.push(None);
            }
            if a < n {
                new_addr[a] = out.len();
                out.push(p.instrs[a].clone());
                origin.push(Some(a));
            }
        }
        let len = out.len();
        let relocate = |t: i64| -> i64 {
            if t < 0 {
                t
            } else if (t as usize) <= n {
                label[t as usize] as i64
            } else {
                t - n as i64 + len as i64
            }
        };
        for (a, ins) in p.instrs.iter().enumerate() {
            let at = new_addr[a];
            let new_target = |d: i64| -> i64 {
                let t = match self.redirect.get(&a) {
                    Some(&b) => block_at[b] as i64,
                    None => relocate(a as i64 + 1 + d),
                };
                t - at as i64 - 1
            };
            out[at] = match ins {
                Instr::Jmp(d) => Instr::Jmp(new_target(*d)),
                Instr::Bnz(r, d) => Instr::Bnz(*r, new_target(*d)),
                Instr::Op { op, dst, srcs } => Instr::Op {
                    op: *op,
                    dst: *dst,
                    srcs: srcs
                        .iter()
                        .map(|o| match o {
                            Operand::Code(c) if *c <= n => Operand::Code(label[*c]),
                            o => *o,
                        })
                        .collect(),
                },
                other => other.clone(),
            };
        }
        for (at, t) in block_jumps {
            out[at] = Instr::Jmp(label[t] as i64 - at as i64 - 1);
        }
        let mut q = p.clone();
        q.instrs = out;
        q.entry = label.get(p.entry).copied().unwrap_or(p.entry);
        q.labels = p.labels.iter().map(|(k, &a)| (k.clone(), if a <= n { label[a] } else { a })).collect();
        q.args = p.args.iter().map(|(&a, s)| (new_addr[a], s.clone())).collect();
        q.regions = p.regions.iter().map(|(&a, s)| (new_addr[a], s.clone())).collect();
        for d in &mut q.procs {
            d.start = label[d.start.min(n)];
            d.end = label[d.end.min(n)];
        }
        (q, AddrMap { new_addr, label, origin })
    }
}
