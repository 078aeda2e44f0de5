use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use specct::analysis::{check_sct, SctVerdict, TaintFinding};
use specct::cts::check_cts;
use specct::isa::instr_text;
use specct::semantics::{ExplorationLimits, HardwareMode, Rule, Source};
use specct::serberus::{serberus_pipeline, SerberusError, Variant};
use specct::{parse_program, print_program, Program};

#[derive(Parser)]
#[command(name = "specct", version, about = "Speculative constant-time checking and hardening")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Well-formedness and security-typing checks.
    CheckCts(Opts),
    /// Run a hardening pipeline and write the transformed program.
    Mitigate(Opts),
    /// Explore every bounded speculative trace and look for secret observations.
    VerifySct(Opts),
    /// Like verify-sct, with a step-by-step account of each witness.
    Explain(Opts),
    /// Run the whole corpus before and after hardening, one row per program and variant.
    Demo(DemoOpts),
}

#[derive(Args, Clone)]
struct Limits {
    /// Step bound per trace [default: 200, demo: 60].
    #[arg(long)]
    max_steps: Option<usize>,
    /// Stop after this many traces (the result is then marked incomplete).
    #[arg(long)]
    max_traces: Option<u64>,
    /// Explore every value of each declared input register.
    #[arg(long)]
    enumerate_inputs: bool,
    /// Override the program's word width.
    #[arg(long)]
    word_width: Option<u32>,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct Opts {
    /// Program file.
    input: Option<PathBuf>,
    /// Read the program from standard input.
    #[arg(long, conflicts_with = "input")]
    stdin: bool,
    /// Hardening variant; also selects the hardware mode for verification.
    #[arg(long)]
    variant: Option<Variant>,
    /// Hardware flags, e.g. `nostl` or `psf,sls`. Overrides the variant's mode.
    #[arg(long)]
    mode: Option<HardwareMode>,
    /// Write the main output here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    limits: Limits,
}

#[derive(Args)]
struct DemoOpts {
    /// Directory of `.asm` programs.
    #[arg(default_value = "corpus")]
    dir: PathBuf,
    /// Only this variant (all four by default).
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    limits: Limits,
}

impl Limits {
    fn exploration(&self, default_steps: usize) -> ExplorationLimits {
        ExplorationLimits {
            max_steps: self.max_steps.unwrap_or(default_steps),
            max_traces: self.max_traces,
            enumerate_inputs: self.enumerate_inputs,
            ..ExplorationLimits::default()
        }
    }
}

impl Opts {
    fn mode(&self) -> HardwareMode {
        match (self.variant, self.mode) {
            (Some(v), Some(m)) => {
                if m != v.mode() {
                    eprintln!("warning: mode {m} overrides the {v} variant's mode {}", v.mode());
                }
                m
            }
            (None, Some(m)) => m,
            (Some(v), None) => v.mode(),
            (None, None) => HardwareMode::default(),
        }
    }

    fn load(&self) -> Result<Program> {
        let (src, name) = if self.stdin {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).context("reading standard input")?;
            (s, "<stdin>".to_string())
        } else {
            let Some(path) = &self.input else { bail!("no input program (give a path or --stdin)") };
            (fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?, path.display().to_string())
        };
        parse(&src, &name, self.limits.word_width)
    }
}

fn parse(src: &str, name: &str, width: Option<u32>) -> Result<Program> {
    let mut p = parse_program(src).with_context(|| format!("parsing {name}"))?;
    if let Some(w) = width {
        if w == 0 || w > 63 {
            bail!("word width must be in 1..=63");
        }
        p.word_width = w;
    }
    Ok(p)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json") + "\n"
}

fn status(ok: bool) -> ExitCode {
    ExitCode::from(if ok { 0 } else { 1 })
}

fn check_cts_cmd(o: &Opts) -> Result<ExitCode> {
    let p = o.load()?;
    let out = check_cts(&p, &o.limits.exploration(200));
    let text = if o.limits.json { pretty(&out.report.to_json()) } else { out.report.to_string() };
    emit(o.out.as_deref(), &text)?;
    Ok(status(out.passed()))
}

fn mitigate(o: &Opts) -> Result<ExitCode> {
    let p = o.load()?;
    let variant = o.variant.unwrap_or(Variant::Core);
    let m = match serberus_pipeline(&p, variant, &o.limits.exploration(200)) {
        Ok(m) => m,
        Err(SerberusError::Cts(r)) => {
            eprint!("input is not statically constant-time:\n{r}");
            return Ok(ExitCode::from(1));
        }
        Err(e) => return Err(e.into()),
    };
    let report = if o.limits.json { pretty(&m.report.to_json()) } else { m.report.to_string() };
    emit(o.out.as_deref(), &print_program(&m.program))?;
    // With the program on stdout the report goes to stderr, so the output can be piped.
    if o.out.is_some() {
        print!("{report}");
    } else {
        eprint!("{report}");
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(o: &Opts, explain: bool) -> Result<ExitCode> {
    let p = o.load()?;
    let limits = o.limits.exploration(200);
    let cts = check_cts(&p, &limits);
    let Some(typing) = cts.typing.as_ref().filter(|_| cts.passed()) else {
        eprint!("input is not statically constant-time, so it has no security typing to check against:\n{}", cts.report);
        return Ok(ExitCode::from(1));
    };
    let mode = o.mode();
    let v = check_sct(&p, typing, &limits, mode)?;
    let text = match (explain, o.limits.json) {
        (false, false) => v.to_string(),
        (false, true) => pretty(&v.to_json()),
        (true, false) => explain_text(&p, &v, mode),
        (true, true) => pretty(&explain_json(&p, &v, mode)),
    };
    emit(o.out.as_deref(), &text)?;
    Ok(status(v.secure()))
}

fn rule_note(r: Rule, src: Option<Source>) -> String {
    let base = match r {
        Rule::Seq => "",
        Rule::Halt => "halt",
        Rule::Mispredict => "mispredicted branch",
        Rule::BranchTarget => "mispredicted call target",
        Rule::ReturnTarget => "mispredicted return",
        Rule::Forward => "load",
        Rule::UnmappedLoad => "unmapped load",
        Rule::UnmappedStore => "unmapped store",
        Rule::FallThrough => "straight-line fall-through",
    };
    match (r, src) {
        (Rule::Forward, Some(Source::Store(j))) => format!("load forwarded from the store at step {j}"),
        (Rule::Forward, _) => "load of a stale memory value".into(),
        _ => base.into(),
    }
}

fn explain_text(p: &Program, v: &SctVerdict, mode: HardwareMode) -> String {
    let mut s = v.to_string();
    for (n, w) in v.witnesses.iter().enumerate() {
        s += &format!("\nwitness {}: `{}` at instruction {} (step {})\n", n + 1, w.observation, w.instr, w.observation_step);
        if !w.inputs.is_empty() {
            let ins: Vec<String> = w.inputs.iter().map(|(r, x)| format!("{r}={x}")).collect();
            s += &format!("  inputs: {}\n", ins.join(" "));
        }
        let Some(tr) = w.replay(p, mode) else {
            s += "  (witness does not replay)\n";
            continue;
        };
        for (i, st) in tr.steps.iter().enumerate() {
            let text = p.instr(st.addr).map_or("?".to_string(), |ins| instr_text(p, st.addr as usize, ins));
            let spec = if tr.executes_transiently(i) { "T" } else { " " };
            let mut note = rule_note(st.rule, st.source);
            if let Some(f) = w.findings.iter().find(|f| f.step == i) {
                note = format!("{note}{}{}: {} now holds a secret", if note.is_empty() { "" } else { "; " }, f.class, f.violating_register);
            }
            if i == w.observation_step {
                note = format!("{note}{}leaks `{}`", if note.is_empty() { "" } else { "; " }, w.observation);
            }
            s += &format!("  {i:>4} {spec} @{:<4} {text:<28} {note}\n", st.addr);
        }
        s += &format!("  cause: {}\n", cause(&w.findings));
    }
    s
}

fn cause(fs: &[TaintFinding]) -> String {
    let names: Vec<String> = fs.iter().map(|f| format!("{} at step {}", f.class, f.step)).collect();
    names.join(", then ")
}

fn explain_json(p: &Program, v: &SctVerdict, mode: HardwareMode) -> serde_json::Value {
    let ws: Vec<serde_json::Value> = v
        .witnesses
        .iter()
        .map(|w| {
            let steps: Vec<serde_json::Value> = w
                .replay(p, mode)
                .map(|tr| {
                    tr.steps
                        .iter()
                        .enumerate()
                        .map(|(i, st)| {
                            json!({
                                "step": i,
                                "addr": st.addr,
                                "instr": p.instr(st.addr).map(|ins| instr_text(p, st.addr as usize, ins)),
                                "transient": tr.config(i).transient,
                                "rule": format!("{:?}", st.rule),
                                "observation": st.obs.to_string(),
                            })
                        })
                        .collect()
                })
                .unwrap_or_default();
            json!({ "witness": w, "steps": steps })
        })
        .collect();
    let mut j = v.to_json();
    j["schema"] = "specct.explain/1".into();
    j["explained"] = ws.into();
    j
}

struct Row {
    program: String,
    variant: Variant,
    pre: String,
    pre_classes: String,
    post: String,
    fences: usize,
    complete: bool,
    ok: bool,
}

fn verdict_word(v: &SctVerdict) -> &'static str {
    if v.secure() {
        "secure"
    } else {
        "leaks"
    }
}

fn demo(o: &DemoOpts) -> Result<ExitCode> {
    let limits = o.limits.exploration(60);
    let mut files: Vec<PathBuf> = fs::read_dir(&o.dir)
        .with_context(|| format!("reading {}", o.dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "asm"))
        .collect();
    files.sort();
    let variants: Vec<Variant> = match o.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let mut rows = vec![];
    for f in &files {
        let name = f.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let src = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let p = parse(&src, &f.display().to_string(), o.limits.word_width)?;
        let cts = check_cts(&p, &limits);
        let Some(typing) = cts.typing.as_ref().filter(|_| cts.passed()) else {
            bail!("{} is not statically constant-time:\n{}", f.display(), cts.report);
        };
        for &v in &variants {
            let pre = check_sct(&p, typing, &limits, v.mode())?;
            let m = serberus_pipeline(&p, v, &limits)?;
            let out = check_cts(&m.program, &limits);
            let post = match out.typing.as_ref().filter(|_| out.passed()) {
                Some(t) => Some(check_sct(&m.program, t, &limits, v.mode())?),
                None => None,
            };
            let classes: Vec<&str> = pre.witness_classes().into_iter().map(|c| c.name()).collect();
            rows.push(Row {
                program: name.clone(),
                variant: v,
                pre: verdict_word(&pre).into(),
                pre_classes: classes.join(","),
                post: post.as_ref().map_or("not CTS", verdict_word).into(),
                fences: m.report.fences_inserted,
                complete: pre.coverage.complete() && post.as_ref().is_some_and(|v| v.coverage.complete()),
                ok: post.as_ref().is_some_and(SctVerdict::secure),
            });
        }
    }
    let all_ok = rows.iter().all(|r| r.ok);
    let text = if o.limits.json {
        let rs: Vec<serde_json::Value> = rows
            .iter()
            .map(|r| {
                json!({
                    "program": r.program, "variant": r.variant, "pre": r.pre, "pre_classes": r.pre_classes,
                    "post": r.post, "fences": r.fences, "complete": r.complete,
                })
            })
            .collect();
        pretty(&json!({ "schema": "specct.demo/1", "max_steps": limits.max_steps, "rows": rs, "all_secure": all_ok }))
    } else {
        let mut s = format!("{:<12} {:<7} {:<7} {:<18} {:<8} {:>6}  {}\n", "program", "variant", "before", "classes", "after", "fences", "complete");
        for r in &rows {
            s += &format!(
                "{:<12} {:<7} {:<7} {:<18} {:<8} {:>6}  {}\n",
                r.program,
                r.variant.to_string(),
                r.pre,
                if r.pre_classes.is_empty() { "-" } else { &r.pre_classes },
                r.post,
                r.fences,
                if r.complete { "yes" } else { "no" }
            );
        }
        s
    };
    emit(o.out.as_deref(), &text)?;
    Ok(status(all_ok))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::CheckCts(o) => check_cts_cmd(o),
        Command::Mitigate(o) => mitigate(o),
        Command::VerifySct(o) => verify(o, false),
        Command::Explain(o) => verify(o, true),
        Command::Demo(o) => demo(o),
    };
    match r {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
