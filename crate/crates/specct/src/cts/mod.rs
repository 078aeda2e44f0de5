//! Procedures, well-formedness, security typing and the static constant-time check.

mod procs;
mod typing;

use std::fmt;

use serde::{Serialize, Serializer};

use crate::isa::Program;
use crate::semantics::ExplorationLimits;

pub use procs::{check_wf, liveness, partition_procedures, Procedure};
pub use typing::{check_typ, infer_security_typing, SecurityTyping};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RuleId {
    Wf(u8),
    Typ(u8),
    Ct,
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleId::Wf(n) => write!(f, "WF.{n}"),
            RuleId::Typ(n) => write!(f, "TYP.{n}"),
            RuleId::Ct => f.write_str("CT"),
        }
    }
}

impl Serialize for RuleId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule: RuleId,
    pub addr: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub message: String,
}

impl Violation {
    pub fn at(rule: RuleId, addr: usize, message: impl Into<String>) -> Self {
        Violation { rule, addr: Some(addr), step: None, message: message.into() }
    }

    pub fn global(rule: RuleId, message: impl Into<String>) -> Self {
        Violation { rule, addr: None, step: None, message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.rule)?;
        if let Some(a) = self.addr {
            write!(f, " @{a}")?;
        }
        if let Some(s) = self.step {
            write!(f, " (step {s})")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CtsReport {
    pub violations: Vec<Violation>,
    pub notes: Vec<String>,
}

impl CtsReport {
    pub fn verdict(&self) -> Verdict {
        if self.violations.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: CtsReport) {
        for v in other.violations {
            if !self.violations.contains(&v) {
                self.violations.push(v);
            }
        }
        for n in other.notes {
            if !self.notes.contains(&n) {
                self.notes.push(n);
            }
        }
    }

    pub fn has(&self, rule: RuleId) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema": "specct.cts/1",
            "verdict": self.verdict(),
            "violations": self.violations,
            "notes": self.notes,
        })
    }
}

impl fmt::Display for CtsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verdict: {}", if self.passed() { "pass" } else { "fail" })?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}

/// Everything produced by a full CTS check.
#[derive(Clone, Debug)]
pub struct CtsOutcome {
    pub report: CtsReport,
    pub procs: Vec<Procedure>,
    pub typing: Option<SecurityTyping>,
}

impl CtsOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.typing.is_some()
    }
}

/// Well-formedness, typing inference and typeability, in that order.
pub fn check_cts(p: &Program, limits: &ExplorationLimits) -> CtsOutcome {
    let mut report = CtsReport::default();
    let procs = match partition_procedures(p) {
        Ok(ps) => ps,
        Err(r) => {
            report.merge(r);
            return CtsOutcome { report, procs: vec![], typing: None };
        }
    };
    report.merge(check_wf(p, &procs, limits));
    let typing = match infer_security_typing(p, &procs) {
        Ok(t) => t,
        Err(r) => {
            report.merge(r);
            return CtsOutcome { report, procs, typing: None };
        }
    };
    report.merge(check_typ(p, &procs, &typing, limits));
    CtsOutcome { report, procs, typing: Some(typing) }
}
