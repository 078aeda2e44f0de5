mod common;

use specct::analysis::*;
use specct::cts::check_cts;
use specct::semantics::*;
use specct::serberus::{serberus_pipeline, Variant};
use specct::{parse_program, Observation, Program, Reg};

fn limits() -> ExplorationLimits {
    ExplorationLimits::default()
}

fn sct(p: &Program, mode: HardwareMode) -> SctVerdict {
    let typing = check_cts(p, &limits()).typing.expect("typeable");
    check_sct(p, &typing, &limits(), mode).unwrap()
}

fn n(reg: Reg, step: usize) -> Node {
    Node { reg, step }
}

#[test]
fn dfg_register_memory_and_noop_edges() {
    let src = "
.data A PUB = 0
.stack size=4
.proc main frame=0
    ENDBR
    ADD r3, r1, r2
    ST [zr+A], r3
    LD [zr+A], r4
main_ret:
    RET
.endproc
.args main_ret =
";
    let p = parse_program(src).unwrap();
    let t = sequential_trace(&p, initial_config(&p), 50);
    let g = build_dynamic_dfg(&p, &t);
    let (r1, r2, r3, r4) = (Reg::Gpr(1), Reg::Gpr(2), Reg::Gpr(3), Reg::Gpr(4));
    assert!(g.has_edge(n(r1, 1), n(r3, 2), EdgeKind::RegisterDep));
    assert!(g.has_edge(n(r2, 1), n(r3, 2), EdgeKind::RegisterDep));
    assert!(g.has_edge(n(r3, 2), n(r4, 4), EdgeKind::MemoryDep));
    assert!(g.has_edge(n(r1, 0), n(r1, 1), EdgeKind::NoOp));
    assert!(!g.has_edge(n(r3, 1), n(r3, 2), EdgeKind::NoOp));
    assert!(g.dyn_dep(n(r1, 1), n(r4, 4)));
    assert!(!g.dyn_dep(n(r4, 1), n(r4, 4)));
    // Edges only go forward in time, so the graph is acyclic.
    assert!(g.edges.iter().all(|(a, b, _)| a.step < b.step));
}

fn first_witness_trace(p: &Program, mode: HardwareMode) -> (Trace, Witness) {
    let v = sct(p, mode);
    let w = v.witnesses.first().expect("violation").clone();
    (w.replay(p, mode).expect("replayable"), w)
}

#[test]
fn ncal_gadget_finding() {
    let p = common::load("ncal");
    let (t, w) = first_witness_trace(&p, HardwareMode::default());
    assert!(t.steps[w.observation_step].obs.is_sec());
    let typing = check_cts(&p, &limits()).typing.unwrap();
    let fs = classify_taint_primitives(&p, &t, &typing, HardwareMode::default()).unwrap();
    let ncal: Vec<_> = fs.iter().filter(|f| f.class == TaintClass::Ncal).collect();
    assert_eq!(ncal.len(), 1);
    assert!(p.instrs[ncal[0].instr as usize].is_nca_load());
    assert_eq!(w.findings[0].class, TaintClass::Ncal);
}

#[test]
fn ncas_gadget_finding_sits_at_the_ca_load() {
    let p = common::load("ncas");
    let (_, w) = first_witness_trace(&p, HardwareMode::default());
    let f = w.findings.iter().find(|f| f.class == TaintClass::Ncas).expect("NCAS");
    assert!(p.instrs[f.instr as usize].is_ca_load());
}

#[test]
fn sequential_trace_has_no_findings() {
    for name in common::CORPUS {
        let p = common::load(name);
        let typing = check_cts(&p, &limits()).typing.unwrap();
        let t = sequential_trace(&p, initial_config(&p), 10_000);
        assert!(classify_taint_primitives(&p, &t, &typing, HardwareMode::default()).unwrap().is_empty(), "{name}");
    }
}

#[test]
fn stale_store_is_the_only_way_to_leak() {
    let p = common::load("stl_stale");
    let v = sct(&p, HardwareMode::default());
    assert!(!v.secure());
    let first_load = p.instrs.iter().position(|i| matches!(i, specct::Instr::Ld { base: Reg::Zr, .. })).unwrap();
    let stale_store = p.instrs.iter().position(|i| matches!(i, specct::Instr::St { src: Reg::Gpr(1), .. })).unwrap();
    for w in &v.witnesses {
        let t = w.replay(&p, HardwareMode::default()).unwrap();
        let k = t.steps.iter().position(|s| s.addr as usize == first_load).unwrap();
        let Some(Source::Store(j)) = t.steps[k].source else { panic!("load read memory") };
        assert_eq!(t.steps[j].addr as usize, stale_store);
    }
}

#[test]
fn no_secrets_is_secure_with_full_coverage() {
    let p = common::load("safe");
    let v = sct(&p, HardwareMode::default());
    assert!(v.secure());
    // Mispredicted calls can recurse until the step bound, so only completeness is expected.
    assert!(v.coverage.complete());
    assert!(v.witnesses.is_empty());
}

#[test]
fn narg_gadget_violation() {
    let p = common::load("narg");
    let v = sct(&p, HardwareMode::default());
    assert!(!v.secure());
    assert!(v.witness_classes().contains(&TaintClass::Narg), "{v}");
}

#[test]
fn verdict_json_carries_replayable_witnesses() {
    let p = common::load("ncal");
    let v = sct(&p, HardwareMode::default());
    let j = v.to_json();
    assert_eq!(j["status"], "violation");
    let choices = j["witnesses"][0]["choices"].as_array().unwrap();
    assert_eq!(choices.len(), v.witnesses[0].choices.len());
}

#[test]
fn analysis_is_deterministic() {
    let p = common::load("ncas");
    let a = sct(&p, HardwareMode::default()).to_json();
    let b = sct(&p, HardwareMode::default()).to_json();
    assert_eq!(a.to_string(), b.to_string());
}

/// Every corpus program and its mitigated forms, under every mode: no unclassified taint
/// primitive and no secret observation without a taint ancestor (either is an error).
#[test]
fn every_leak_has_a_classified_ancestor() {
    let lim = ExplorationLimits { max_steps: 60, ..Default::default() };
    let modes: Vec<HardwareMode> = Variant::ALL.iter().map(|v| v.mode()).collect();
    for name in common::CORPUS {
        let p = common::load(name);
        let mut progs = vec![p.clone()];
        progs.extend(Variant::ALL.iter().map(|v| serberus_pipeline(&p, *v, &lim).unwrap().program));
        for q in &progs {
            let typing = check_cts(q, &lim).typing.unwrap();
            for &m in &modes {
                let v = check_sct(q, &typing, &lim, m);
                let v = v.unwrap_or_else(|e| panic!("{name} under {m}: {e}"));
                assert!(v.findings.keys().all(|c| c.allowed(m)));
                for w in &v.witnesses {
                    assert!(!w.findings.is_empty());
                }
            }
        }
    }
}

#[test]
fn a_secret_is_exposed_at_most_once_per_register() {
    for name in ["ncal", "ncas", "stkl", "narg", "stl_stale"] {
        let p = common::load(name);
        explore(&p, ExplorationLimits { max_steps: 80, ..Default::default() }, HardwareMode::default(), |t| {
            for (i, s) in t.steps.iter().enumerate() {
                if !s.obs.is_sec() || s.halted() {
                    continue;
                }
                let ins = &p.instrs[s.addr as usize];
                for r in ins.sensitive_operands() {
                    if s.pre.get(r).label.is_sec() && ins.def() != Some(r) {
                        assert!(!t.config(i + 1).get(r).label.is_sec(), "{name}: {r} at step {i}");
                    }
                }
            }
            Flow::Continue
        });
    }
}

#[test]
fn leaking_observation_is_secret() {
    for (name, _) in common::GADGETS {
        let p = common::load(name);
        let v = sct(&p, HardwareMode::default());
        for w in &v.witnesses {
            let t = w.replay(&p, HardwareMode::default()).unwrap();
            let o = &t.steps[w.observation_step].obs;
            assert!(o.is_sec());
            assert!(!matches!(o, Observation::Eps));
        }
    }
}
