//! Fence insertion, function-private stacks, register cleaning and the mitigation pipeline.

mod cut;
mod passes;
mod rewrite;
mod sdfg;
mod tcfg;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::cts::{check_cts, CtsReport};
use crate::isa::Program;
use crate::semantics::{ExplorationLimits, HardwareMode};

pub use cut::{max_flow_min_cut, min_cut_excluding, multicut, Capacity, CutSet, MulticutError, MulticutResult};
pub use passes::{
    fps_transform, insert_fences, intel_lfence, register_cleaning, sls_fences, stack_init_transform, CutEdge,
    PrivateStackLayout, ProcFences, STACK_FRAMES,
};
pub use rewrite::AddrMap;
pub use sdfg::{build_static_dfg, generate_source_sink_pairs, PairKind, SEdge, SNode, SourceSinkPair, StaticDfg};
pub use tcfg::{build_tcfg, loop_info, natural_loops, tsuccs, Edge, Tcfg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Core,
    Psf,
    Nostl,
    Sls,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Core, Variant::Psf, Variant::Nostl, Variant::Sls];

    /// The hardware mode the variant's output is meant to run under.
    pub fn mode(self) -> HardwareMode {
        match self {
            Variant::Core => HardwareMode { stl: true, psf: false, sls: false },
            Variant::Psf => HardwareMode { stl: true, psf: true, sls: false },
            Variant::Nostl => HardwareMode { stl: false, psf: false, sls: false },
            Variant::Sls => HardwareMode { stl: true, psf: false, sls: true },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Core => "core",
            Variant::Psf => "psf",
            Variant::Nostl => "nostl",
            Variant::Sls => "sls",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant `{s}` (expected core, psf, nostl or sls)"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SerberusError {
    #[error("input is not statically constant-time:\n{0}")]
    Cts(CtsReport),
    #[error("{0}")]
    Layout(String),
    #[error(transparent)]
    Multicut(#[from] MulticutError),
    #[error("CALL/RET at {0} has no calling-convention entry")]
    MissingArgs(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PassReport {
    pub variant: Variant,
    pub fences: Vec<ProcFences>,
    pub fences_inserted: usize,
    pub private_stacks: Vec<PrivateStackLayout>,
    pub stack_zero_stores: usize,
    pub registers_zeroed: usize,
    pub sls_fences: usize,
}

impl PassReport {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v["schema"] = "specct.passes/1".into();
        v
    }
}

impl fmt::Display for PassReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant: {}", self.variant)?;
        for p in &self.fences {
            let pairs: Vec<String> = p.pairs.iter().map(|(k, n)| format!("{k}={n}")).collect();
            writeln!(
                f,
                "  {}: pairs [{}], cut {} edge(s), weight {}",
                p.proc_name,
                pairs.join(" "),
                p.cut.len(),
                p.total_weight
            )?;
        }
        writeln!(f, "  fences inserted: {}", self.fences_inserted)?;
        for s in &self.private_stacks {
            writeln!(f, "  private stack {}: [{}, {}) psp {}@{}", s.proc_name, s.base, s.end, s.psp, s.psp_addr)?;
        }
        if self.stack_zero_stores > 0 {
            writeln!(f, "  stack zero stores: {}", self.stack_zero_stores)?;
        }
        writeln!(f, "  registers zeroed: {}", self.registers_zeroed)?;
        if self.sls_fences > 0 {
            writeln!(f, "  fences after JMP: {}", self.sls_fences)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Mitigated {
    pub program: Program,
    pub report: PassReport,
    /// From input addresses to output addresses.
    pub map: AddrMap,
}

/// Runs the passes of `variant` in order. The input must pass the CTS checks.
pub fn serberus_pipeline(p: &Program, variant: Variant, limits: &ExplorationLimits) -> Result<Mitigated, SerberusError> {
    let cts = check_cts(p, limits);
    if !cts.passed() {
        return Err(SerberusError::Cts(cts.report));
    }
    let mut report = PassReport {
        variant,
        fences: vec![],
        fences_inserted: 0,
        private_stacks: vec![],
        stack_zero_stores: 0,
        registers_zeroed: 0,
        sls_fences: 0,
    };
    let (mut cur, mut map, fences) = insert_fences(p, variant)?;
    report.fences_inserted = map.inserted();
    report.fences = fences;
    let mut chain = |cur: &mut Program, next: (Program, AddrMap)| {
        map = AddrMap::compose(&map, &next.1);
        *cur = next.0;
    };
    match variant {
        Variant::Core | Variant::Sls => {
            let (q, m, layout) = fps_transform(&cur)?;
            report.private_stacks = layout;
            chain(&mut cur, (q, m));
        }
        Variant::Nostl => {
            let (q, m, n) = stack_init_transform(&cur)?;
            report.stack_zero_stores = n;
            chain(&mut cur, (q, m));
        }
        Variant::Psf => {}
    }
    let (q, m, n) = register_cleaning(&cur)?;
    report.registers_zeroed = n;
    chain(&mut cur, (q, m));
    if variant == Variant::Sls {
        let (q, m, n) = sls_fences(&cur);
        report.sls_fences = n;
        chain(&mut cur, (q, m));
    }
    Ok(Mitigated { program: cur, report, map })
}
