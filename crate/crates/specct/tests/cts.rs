mod common;

use proptest::prelude::*;
use specct::cts::*;
use specct::semantics::{initial_config, sequential_trace, ExplorationLimits};
use specct::{parse_program, Label, Program, Reg};

fn prog(src: &str) -> Program {
    parse_program(src).unwrap()
}

fn limits() -> ExplorationLimits {
    ExplorationLimits::default()
}

fn invalid(name: &str) -> Program {
    let path = common::corpus_dir().join("invalid").join(format!("{name}.asm"));
    parse_program(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TWO_PROCS: &str = "
.stack size=4
.proc main frame=0
    ENDBR
    CONST r1, f
site:
    CALL r1
main_ret:
    RET
.endproc
.proc f frame=0
f:
    ENDBR
f_ret:
    RET
.endproc
.args site = r1
.args main_ret =
.args f_ret =
";

#[test]
fn call_does_not_join_procedures() {
    let p = prog(TWO_PROCS);
    let procs = partition_procedures(&p).unwrap();
    assert_eq!(procs.len(), 2);
    assert_eq!(procs[0].body, (0..4).collect());
    assert_eq!(procs[1].entry, p.labels["f"]);
    assert_eq!(procs[1].body, (4..6).collect());
}

#[test]
fn branch_into_another_procedure_overlaps() {
    let src = "
.proc main frame=0
    ENDBR
    BNZ r1, inside
    RET
.endproc
.proc f frame=0
    ENDBR
inside:
    RET
.endproc
";
    let err = partition_procedures(&prog(src)).unwrap_err();
    assert!(err.has(RuleId::Wf(1)), "{err}");
}

#[test]
fn unreachable_instruction_is_rejected() {
    let src = ".proc main frame=0\nENDBR\nRET\nADD r1, r1, 1\n.endproc\n";
    let err = partition_procedures(&prog(src)).unwrap_err();
    assert!(err.has(RuleId::Wf(1)));
}

#[test]
fn frame_skeleton_is_one_procedure_per_endbr() {
    let p = prog(include_str!("../../../corpus/narg.asm"));
    let procs = partition_procedures(&p).unwrap();
    for f in &procs {
        assert_eq!(p.instrs[f.entry], specct::Instr::Endbr);
        assert_eq!(f.body.iter().filter(|&&a| p.instrs[a] == specct::Instr::Endbr).count(), 1);
    }
}

#[test]
fn missing_calling_convention() {
    let src = TWO_PROCS.replace(".args site = r1\n", "");
    let out = check_cts(&prog(&src), &limits());
    assert!(out.report.has(RuleId::Wf(2)));
}

#[test]
fn global_access_into_the_stack() {
    let src = ".stack size=4\n.proc main frame=0\nENDBR\nLD [zr+1], r1\nmain_ret:\nRET\n.endproc\n.args main_ret =\n";
    let out = check_cts(&prog(src), &limits());
    assert!(out.report.has(RuleId::Wf(3)), "{}", out.report);
}

#[test]
fn sequential_store_to_unmapped_address() {
    let src = ".stack size=4\n.proc main frame=0\nENDBR\nCONST r1, 40\nST [r1+0], zr\nmain_ret:\nRET\n.endproc\n.args main_ret =\n";
    let out = check_cts(&prog(src), &limits());
    let v = out.report.violations.iter().find(|v| v.rule == RuleId::Wf(5)).expect("WF.5");
    assert_eq!(v.addr, Some(2));
    assert_eq!(v.step, Some(2));
}

#[test]
fn ca_load_of_a_secret_types_its_destination() {
    let src = ".data K SEC = 1\n.stack size=4\n.proc main frame=0\nENDBR\nLD [zr+K], r1\nmain_ret:\nRET\n.endproc\n.args main_ret =\n";
    let p = prog(src);
    let out = check_cts(&p, &limits());
    let t = out.typing.unwrap();
    assert_eq!(t.reg(Reg::Gpr(1), 2), Some(Label::Sec));
}

#[test]
fn op_joins_its_inputs() {
    let src = ".data K SEC = 1\n.stack size=4\n.proc main frame=0\nENDBR\nLD [zr+K], r2\nADD r3, r1, r2\nADD r4, r1, r1\nmain_ret:\nRET\n.endproc\n.args main_ret =\n";
    let p = prog(src);
    let t = check_cts(&p, &limits()).typing.unwrap();
    assert_eq!(t.reg(Reg::Gpr(3), 3), Some(Label::Sec));
    assert_eq!(t.reg(Reg::Gpr(4), 4), Some(Label::Pub));
}

#[test]
fn public_program_is_typed_public() {
    let p = common::load("safe");
    let out = check_cts(&p, &limits());
    assert!(out.passed(), "{}", out.report);
    let t = out.typing.unwrap();
    assert!(t.tau_glob.values().all(|l| *l == Label::Pub));
    assert!(t.tau_stk.values().flat_map(|m| m.values()).all(|l| *l == Label::Pub));
    assert_eq!(t.nca_default, Label::Pub);
    // Registers that are read anywhere are public everywhere they are live.
    for (&a, regs) in &t.tau_reg {
        for r in p.instrs[a].uses() {
            assert_eq!(t.reg(r, a), Some(Label::Pub), "{r} at {a}");
        }
        assert_eq!(*regs.last().unwrap(), Label::Pub);
    }
}

#[test]
fn secret_transmitter_operand() {
    let src = ".data K SEC = 1\n.data A PUB = 0, 0\n.stack size=4\n.proc main frame=0\nENDBR\nLD [zr+K], r1\nAND r1, r1, 1\nLD [r1+A], r2\nmain_ret:\nRET\n.endproc\n.args main_ret =\n";
    let out = check_cts(&prog(src), &limits());
    assert!(out.report.has(RuleId::Typ(2)));
}

#[test]
fn secret_argument() {
    let out = check_cts(&invalid("secret_arg"), &limits());
    assert!(out.report.has(RuleId::Typ(9)), "{}", out.report);
    assert_eq!(out.report.verdict(), Verdict::Fail);
}

#[test]
fn latent_violation_is_caught_by_typing_only() {
    let out = check_cts(&invalid("latent"), &limits());
    assert!(out.report.has(RuleId::Typ(2)), "{}", out.report);
    assert!(!out.report.has(RuleId::Ct), "{}", out.report);
    assert!(!out.report.has(RuleId::Typ(1)));
}

#[test]
fn report_serializes() {
    let out = check_cts(&invalid("secret_arg"), &limits());
    let j = out.report.to_json();
    assert_eq!(j["verdict"], "fail");
    assert_eq!(j["violations"][0]["rule"], "TYP.9");
}

#[test]
fn corpus_is_cts() {
    for name in common::CORPUS {
        let out = check_cts(&common::load(name), &limits());
        assert!(out.passed(), "{name}: {}", out.report);
    }
}

#[test]
fn typeable_programs_have_no_secret_sequential_observation() {
    for name in common::CORPUS {
        let p = common::load(name);
        let out = check_cts(&p, &limits());
        assert!(!out.report.has(RuleId::Typ(1)) && !out.report.has(RuleId::Typ(2)));
        let t = sequential_trace(&p, initial_config(&p), 10_000);
        assert!(t.observations().all(|o| !o.is_sec()), "{name}");
    }
}

#[test]
fn sequential_values_respect_the_typing() {
    for name in common::CORPUS {
        let p = common::load(name);
        let out = check_cts(&p, &limits());
        let typing = out.typing.unwrap();
        let t = sequential_trace(&p, initial_config(&p), 10_000);
        for i in 0..=t.steps.len() {
            let c = t.config(i);
            for r in p.gprs().chain([Reg::Sp]) {
                if typing.reg(r, c.pc as usize) == Some(Label::Pub) {
                    assert!(!c.get(r).label.is_sec(), "{name}: {r} at step {i}");
                }
            }
        }
    }
}

fn typing(p: &Program) -> SecurityTyping {
    let procs = partition_procedures(p).unwrap();
    infer_security_typing(p, &procs).unwrap()
}

fn at_least_as_secret(a: &SecurityTyping, b: &SecurityTyping) -> bool {
    let le = |x: Label, y: Label| x <= y;
    b.tau_glob.iter().all(|(k, l)| le(*l, a.glob(*k)))
        && b.tau_reg.iter().all(|(k, ls)| a.tau_reg.get(k).is_some_and(|m| ls.iter().zip(m).all(|(x, y)| le(*x, *y))))
        && b.tau_stk.iter().all(|(f, m)| m.iter().all(|(d, l)| le(*l, a.stack(f, *d))))
        && le(b.nca_default, a.nca_default)
}

#[test]
fn inferring_from_the_induced_policy_is_idempotent() {
    for name in common::CORPUS {
        let p = common::load(name);
        let t = typing(&p);
        let mut q = p.clone();
        // The typing only covers globals that constant-address accesses touch.
        for d in &mut q.data {
            if d.range().all(|a| t.tau_glob.contains_key(&a)) {
                d.label = d.range().map(|a| t.glob(a)).fold(Label::Pub, Label::join);
            }
        }
        assert_eq!(typing(&q), t, "{name}");
    }
}

proptest! {
    #[test]
    fn marking_data_secret_never_makes_anything_public(k in 0usize..11, pick in any::<prop::sample::Index>()) {
        let p = common::load(common::CORPUS[k]);
        let publics: Vec<usize> = (0..p.data.len()).filter(|&i| p.data[i].label == Label::Pub).collect();
        prop_assume!(!publics.is_empty());
        let mut q = p.clone();
        q.data[publics[pick.index(publics.len())]].label = Label::Sec;
        let (before, after) = (typing(&p), typing(&q));
        prop_assert!(at_least_as_secret(&after, &before));
    }
}
