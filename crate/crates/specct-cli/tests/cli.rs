use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

fn corpus(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(name)
}

fn specct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specct")).args(args).output().unwrap()
}

fn specct_stdin(args: &[&str], input: &[u8]) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_specct"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_reports_the_gadget() {
    let o = specct(&["verify-sct", corpus("ncal.asm").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("NCAL"), "{}", stdout(&o));
}

#[test]
fn mitigated_output_verifies() {
    let m = specct(&["mitigate", corpus("ncas.asm").to_str().unwrap(), "--variant", "core"]);
    assert_eq!(m.status.code(), Some(0), "{}", String::from_utf8_lossy(&m.stderr));
    let v = specct_stdin(&["verify-sct", "--stdin"], &m.stdout);
    assert_eq!(v.status.code(), Some(0), "{}", stdout(&v));
}

#[test]
fn mitigate_writes_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.asm");
    let o = specct(&["mitigate", corpus("stkl.asm").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(specct::parse_program(&text).is_ok());
    assert!(text.contains(".pstack"));
}

#[test]
fn check_cts_rejects_a_secret_argument() {
    let o = specct(&["check-cts", corpus("invalid/secret_arg.asm").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("TYP.9"), "{}", stdout(&o));
}

#[test]
fn json_output_is_deterministic() {
    let run = || specct(&["verify-sct", corpus("stl_stale.asm").to_str().unwrap(), "--json"]);
    let (a, b) = (run(), run());
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["status"], "violation");
}

#[test]
fn usage_and_io_errors_exit_2() {
    assert_eq!(specct(&["verify-sct", "/nonexistent.asm"]).status.code(), Some(2));
    assert_eq!(specct(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.asm");
    std::fs::write(&bad, "ENDBR\nJMP nowhere\n").unwrap();
    let o = specct(&["check-cts", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
}

#[test]
fn demo_passes_on_the_corpus() {
    let o = specct(&["demo", corpus("").to_str().unwrap(), "--variant", "core"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("ncal"));
}
