#![allow(dead_code)]

pub mod brute_cut;
pub mod gen;
pub mod oracle;

use std::path::PathBuf;

use specct::analysis::TaintClass;
use specct::Program;

pub const CORPUS: [&str; 11] = [
    "ncal", "ncas", "stkl", "narg", "stl_stale", "sls_line", "loop", "safe", "multi", "ct_select", "callsites",
];

/// The gadgets with the class their leak is expected to trace back to.
pub const GADGETS: [(&str, TaintClass); 5] = [
    ("ncal", TaintClass::Ncal),
    ("ncas", TaintClass::Ncas),
    ("stkl", TaintClass::Stkl),
    ("narg", TaintClass::Narg),
    ("stl_stale", TaintClass::Ncas),
];

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub fn source(name: &str) -> String {
    let path = corpus_dir().join(format!("{name}.asm"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn load(name: &str) -> Program {
    specct::parse_program(&source(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// foo allocates a two-word frame around a call to bar.
pub const FRAME_SKELETON: &str = "
.stack size=8
.proc foo frame=2
foo:
    ENDBR
    SUB sp, sp, 2
    CONST r1, bar
site:
    CALL r1
    ST [sp+0], zr
    ADD sp, sp, 2
ret:
    RET
.endproc
.proc bar frame=0
bar:
    ENDBR
bar_ret:
    RET
.endproc
.args site = r1
.args ret =
.args bar_ret =
";
