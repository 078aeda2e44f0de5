use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{successors, Config, HardwareMode, LoadSource, Rule, StepKind, Transition};
use crate::isa::{LabeledValue, Observation, Program, Reg};

/// Provenance of a loaded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Initial,
    Store(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepRecord {
    pub pre: Config,
    pub addr: u64,
    pub obs: Observation,
    pub kind: StepKind,
    pub rule: Rule,
    pub source: Option<Source>,
    /// Index of the chosen successor in `successors` order.
    pub choice: usize,
}

impl StepRecord {
    pub fn halted(&self) -> bool {
        self.rule == Rule::Halt
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEnd {
    Halted,
    Bound,
    Pruned,
    /// A prefix visitor asked not to extend the trace.
    Skipped,
    Open,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub steps: Vec<StepRecord>,
    pub final_config: Config,
    pub end: TraceEnd,
}

impl Trace {
    /// Configuration before step `i`; `i == len` gives the final configuration.
    pub fn config(&self, i: usize) -> &Config {
        self.steps.get(i).map(|s| &s.pre).unwrap_or(&self.final_config)
    }

    /// Whether step `i` executed transiently, i.e. the configuration after it is transient.
    pub fn executes_transiently(&self, i: usize) -> bool {
        self.config(i + 1).transient
    }

    pub fn choices(&self) -> Vec<(u64, usize)> {
        self.steps.iter().map(|s| (s.addr, s.choice)).collect()
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.steps.iter().map(|s| &s.obs)
    }
}

/// Incremental trace construction that also tracks which store step produced each value.
#[derive(Clone, Debug)]
pub struct Walker<'p> {
    prog: &'p Program,
    mode: HardwareMode,
    pub trace: Trace,
    store_steps: Vec<usize>,
    mem_steps: BTreeMap<u64, usize>,
}

impl<'p> Walker<'p> {
    pub fn new(prog: &'p Program, mode: HardwareMode, init: Config) -> Self {
        Walker {
            prog,
            mode,
            trace: Trace { steps: vec![], final_config: init, end: TraceEnd::Open },
            store_steps: vec![],
            mem_steps: BTreeMap::new(),
        }
    }

    pub fn current(&self) -> &Config {
        &self.trace.final_config
    }

    pub fn options(&self) -> Vec<Transition> {
        successors(self.current(), self.prog, self.mode)
    }

    pub fn is_done(&self) -> bool {
        self.trace.end != TraceEnd::Open
    }

    /// Takes transition `choice` out of `options`.
    pub fn take(&mut self, choice: usize, t: Transition) {
        let step = self.trace.steps.len();
        let halted = t.halted();
        let pre = std::mem::replace(&mut self.trace.final_config, t.config);
        let source = t.source.map(|s| match s {
            LoadSource::Store(k) => Source::Store(self.store_steps[k]),
            LoadSource::Memory => {
                match load_addr(&pre, self.prog).and_then(|a| self.mem_steps.get(&a)) {
                    Some(&s) => Source::Store(s),
                    None => Source::Initial,
                }
            }
        });
        if !halted {
            let post = &self.trace.final_config;
            if post.stores.len() > pre.stores.len() {
                self.store_steps.push(step);
            } else if post.stores.is_empty() && !pre.stores.is_empty() {
                for ((a, _), s) in pre.stores.iter().zip(self.store_steps.drain(..)) {
                    self.mem_steps.insert(*a, s);
                }
            }
        }
        self.trace.steps.push(StepRecord {
            addr: pre.pc,
            pre,
            obs: t.obs,
            kind: t.kind,
            rule: t.rule,
            source,
            choice,
        });
        if halted {
            self.trace.end = TraceEnd::Halted;
        }
    }

    pub fn step(&mut self, choice: usize) -> bool {
        let mut opts = self.options();
        if choice >= opts.len() {
            return false;
        }
        let t = opts.swap_remove(choice);
        self.take(choice, t);
        true
    }
}

fn load_addr(c: &Config, p: &Program) -> Option<u64> {
    match p.instr(c.pc)? {
        crate::isa::Instr::Ld { base, disp, .. } => Some(p.wrap(c.get(*base).value.wrapping_add(*disp as u64))),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorationLimits {
    pub max_steps: usize,
    pub max_traces: Option<u64>,
    pub memoize: bool,
    pub enumerate_inputs: bool,
}

impl Default for ExplorationLimits {
    fn default() -> Self {
        ExplorationLimits { max_steps: 200, max_traces: None, memoize: true, enumerate_inputs: false }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub traces: u64,
    pub steps: u64,
    pub pruned: u64,
    pub initial_configs: u64,
    /// Some trace reached the step bound.
    pub bound_hit: bool,
    /// Exploration stopped early (trace cap or visitor request).
    pub truncated: bool,
    /// Prefixes the visitor chose not to extend.
    #[serde(default)]
    pub skipped: u64,
    pub max_steps: usize,
}

impl Coverage {
    /// Every trace up to the step bound was enumerated.
    pub fn complete(&self) -> bool {
        !self.truncated
    }

    /// Complete, and no trace was cut short by the step bound.
    pub fn exhaustive(&self) -> bool {
        self.complete() && !self.bound_hit
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
    /// Do not extend the current prefix (prefix visitors only).
    Skip,
}

pub fn initial_config(p: &Program) -> Config {
    let mut regs = vec![LabeledValue::zero(); p.num_gprs as usize + 1];
    for (r, v) in &p.inputs {
        if let Reg::Gpr(i) = r {
            regs[*i as usize] = LabeledValue::public(*v, p.word_width);
        }
    }
    *regs.last_mut().unwrap() = LabeledValue::public(p.initial_sp(), p.word_width);
    Config {
        regs,
        pc: p.entry as u64,
        dmem: p.initial_memory(),
        stores: vec![],
        call_stack: vec![],
        transient: false,
    }
}

/// The policy-derived configuration, or one per assignment of the public inputs.
pub fn initial_configs(p: &Program, enumerate_inputs: bool) -> Vec<Config> {
    let base = initial_config(p);
    if !enumerate_inputs || p.inputs.is_empty() {
        return vec![base];
    }
    let domain = 1u64 << p.word_width.min(16);
    let mut out = vec![base];
    for (r, _) in &p.inputs {
        let mut next = vec![];
        for c in &out {
            for v in 0..domain {
                let mut c = c.clone();
                c.set(*r, LabeledValue::public(v, p.word_width));
                next.push(c);
            }
        }
        out = next;
    }
    out
}

struct Dfs<'a, 'p, F> {
    limits: ExplorationLimits,
    visit: &'a mut F,
    cov: Coverage,
    memo: HashMap<Config, usize>,
    stop: bool,
    prefixes: bool,
    walker: Walker<'p>,
}

impl<F: FnMut(&Trace) -> Flow> Dfs<'_, '_, F> {
    fn emit(&mut self, end: TraceEnd) {
        self.walker.trace.end = end;
        self.cov.traces += 1;
        if end == TraceEnd::Bound {
            self.cov.bound_hit = true;
        }
        if end == TraceEnd::Pruned {
            self.cov.pruned += 1;
        }
        if end == TraceEnd::Skipped {
            self.cov.skipped += 1;
        }
        if (self.visit)(&self.walker.trace) == Flow::Stop {
            self.stop = true;
            self.cov.truncated = true;
        }
        if let Some(cap) = self.limits.max_traces {
            if self.cov.traces >= cap {
                self.stop = true;
                self.cov.truncated = true;
            }
        }
        self.walker.trace.end = TraceEnd::Open;
    }

    fn run(&mut self) {
        let depth = self.walker.trace.steps.len();
        if self.limits.memoize {
            let key = memo_key(self.walker.current());
            match self.memo.get(&key) {
                Some(&d) if d <= depth => {
                    self.emit(TraceEnd::Pruned);
                    return;
                }
                _ => {
                    self.memo.insert(key, depth);
                }
            }
        }
        if self.prefixes && depth > 0 {
            match (self.visit)(&self.walker.trace) {
                Flow::Continue => {}
                Flow::Stop => {
                    self.stop = true;
                    self.cov.truncated = true;
                    return;
                }
                Flow::Skip => {
                    self.emit(TraceEnd::Skipped);
                    return;
                }
            }
        }
        if depth >= self.limits.max_steps {
            self.emit(TraceEnd::Bound);
            return;
        }
        let opts = self.walker.options();
        for (i, t) in opts.into_iter().enumerate() {
            if self.stop {
                return;
            }
            let saved = self.walker.clone_state();
            self.cov.steps += 1;
            self.walker.take(i, t);
            if self.walker.is_done() {
                let end = self.walker.trace.end;
                self.emit(end);
                self.walker.trace.end = TraceEnd::Open;
            } else {
                self.run();
            }
            self.walker.restore(saved);
        }
    }
}

/// Once transient, a RET may go to every post-call site whatever the top of the call stack
/// holds, so only the stack depth can change what happens next.
fn memo_key(c: &Config) -> Config {
    let mut k = c.clone();
    if k.transient {
        k.call_stack.iter_mut().for_each(|a| *a = 0);
    }
    k
}

struct Saved {
    final_config: Config,
    len: usize,
    store_steps: Vec<usize>,
    mem_steps: BTreeMap<u64, usize>,
}

impl Walker<'_> {
    fn clone_state(&self) -> Saved {
        Saved {
            final_config: self.trace.final_config.clone(),
            len: self.trace.steps.len(),
            store_steps: self.store_steps.clone(),
            mem_steps: self.mem_steps.clone(),
        }
    }

    fn restore(&mut self, s: Saved) {
        self.trace.final_config = s.final_config;
        self.trace.steps.truncate(s.len);
        self.store_steps = s.store_steps;
        self.mem_steps = s.mem_steps;
        self.trace.end = TraceEnd::Open;
    }
}

/// Depth-first enumeration of all bounded traces. `visit` sees every maximal (or pruned) trace.
pub fn explore<F: FnMut(&Trace) -> Flow>(p: &Program, limits: ExplorationLimits, mode: HardwareMode, visit: F) -> Coverage {
    run_dfs(p, limits, mode, visit, false)
}

/// Like `explore`, but `visit` also sees every non-empty open prefix (with `end == Open`) and may
/// answer `Flow::Skip` to end the trace there.
pub fn explore_prefixes<F: FnMut(&Trace) -> Flow>(
    p: &Program,
    limits: ExplorationLimits,
    mode: HardwareMode,
    visit: F,
) -> Coverage {
    run_dfs(p, limits, mode, visit, true)
}

fn run_dfs<F: FnMut(&Trace) -> Flow>(
    p: &Program,
    limits: ExplorationLimits,
    mode: HardwareMode,
    mut visit: F,
    prefixes: bool,
) -> Coverage {
    let mut total = Coverage { max_steps: limits.max_steps, ..Coverage::default() };
    for init in initial_configs(p, limits.enumerate_inputs) {
        total.initial_configs += 1;
        let mut dfs = Dfs {
            limits,
            visit: &mut visit,
            cov: Coverage::default(),
            memo: HashMap::new(),
            stop: false,
            prefixes,
            walker: Walker::new(p, mode, init),
        };
        if let Some(cap) = limits.max_traces {
            dfs.limits.max_traces = Some(cap.saturating_sub(total.traces));
        }
        dfs.run();
        total.traces += dfs.cov.traces;
        total.steps += dfs.cov.steps;
        total.pruned += dfs.cov.pruned;
        total.skipped += dfs.cov.skipped;
        total.bound_hit |= dfs.cov.bound_hit;
        total.truncated |= dfs.cov.truncated;
        if dfs.stop {
            break;
        }
    }
    total
}

/// Rebuilds a trace from its list of (address, successor index) choices.
pub fn replay(p: &Program, mode: HardwareMode, init: Config, choices: &[(u64, usize)]) -> Option<Trace> {
    let mut w = Walker::new(p, mode, init);
    for &(addr, c) in choices {
        if w.is_done() || w.current().pc != addr || !w.step(c) {
            return None;
        }
    }
    Some(w.trace)
}

/// The sequential trace: always the first successor, until a halt or the bound.
pub fn sequential_trace(p: &Program, init: Config, max_steps: usize) -> Trace {
    let mut w = Walker::new(p, HardwareMode::default(), init);
    while !w.is_done() && w.trace.steps.len() < max_steps {
        let t = super::seq_transition(w.current(), p);
        w.take(0, t);
    }
    if !w.is_done() {
        w.trace.end = TraceEnd::Bound;
    }
    w.trace
}
