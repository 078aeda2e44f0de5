//! Small random programs for checking the semantics against the oracle.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use specct::isa::{DataDecl, Instr, Opcode, Operand, StackDecl};
use specct::{Label, Program, Reg};

const REGS: [Reg; 5] = [Reg::Gpr(0), Reg::Gpr(1), Reg::Gpr(2), Reg::Sp, Reg::Zr];

fn reg(rng: &mut ChaCha8Rng) -> Reg {
    // Mostly general-purpose registers.
    if rng.gen_bool(0.8) {
        Reg::Gpr(rng.gen_range(0..3))
    } else {
        *REGS.choose(rng).unwrap()
    }
}

fn dst(rng: &mut ChaCha8Rng) -> Reg {
    if rng.gen_bool(0.1) {
        Reg::Sp
    } else {
        Reg::Gpr(rng.gen_range(0..3))
    }
}

fn operand(rng: &mut ChaCha8Rng, n: usize) -> Operand {
    match rng.gen_range(0..6) {
        0 | 1 => Operand::Imm(rng.gen_range(0..16)),
        2 => Operand::Code(rng.gen_range(0..=n)),
        _ => Operand::Reg(reg(rng)),
    }
}

/// Width 4, three GPRs, two public and two secret words, a four-word stack and 3..=`max_len` instructions.
pub fn program(rng: &mut ChaCha8Rng, max_len: usize) -> Program {
    let n = rng.gen_range(3..=max_len);
    let mut instrs = vec![Instr::Endbr];
    for at in 1..n {
        let disp = |rng: &mut ChaCha8Rng| {
            let t = rng.gen_range(0..=n) as i64;
            t - at as i64 - 1
        };
        let ins = match rng.gen_range(0..20) {
            0 | 1 => Instr::Endbr,
            2 => Instr::Lfence,
            3 => Instr::Jmp(disp(rng)),
            4..=6 => Instr::Bnz(reg(rng), disp(rng)),
            7 | 8 => Instr::Call(reg(rng)),
            9 => Instr::Ret,
            10..=12 => Instr::Ld { base: reg(rng), disp: rng.gen_range(0..9), dst: dst(rng) },
            13..=15 => Instr::St { base: reg(rng), disp: rng.gen_range(0..9), src: reg(rng) },
            16 => Instr::Div { a: reg(rng), b: reg(rng), dst: dst(rng) },
            _ => {
                let op = *Opcode::ALL.choose(rng).unwrap();
                let srcs = match op {
                    Opcode::Const if rng.gen_bool(0.5) => vec![Operand::Code(rng.gen_range(0..=n))],
                    Opcode::Const => vec![Operand::Imm(rng.gen_range(0..16))],
                    _ => (0..op.arity()).map(|_| operand(rng, n)).collect(),
                };
                Instr::Op { op, dst: dst(rng), srcs }
            }
        };
        instrs.push(ins);
    }
    let mut p = Program {
        word_width: 4,
        num_gprs: 3,
        instrs,
        data: vec![
            DataDecl { name: "P".into(), label: Label::Pub, addr: 0, values: vec![rng.gen_range(0..16), rng.gen_range(0..16)] },
            DataDecl { name: "S".into(), label: Label::Sec, addr: 2, values: vec![rng.gen_range(0..16), rng.gen_range(0..16)] },
        ],
        stacks: vec![StackDecl { addr: 4, size: 4, owner: None }],
        ..Program::default()
    };
    if rng.gen_bool(0.5) {
        p.inputs.push((Reg::Gpr(rng.gen_range(0..3)), rng.gen_range(0..16)));
    }
    p
}
