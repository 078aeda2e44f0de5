//! Speculative constant-time analysis and hardening for a small abstract ISA.

pub mod analysis;
pub mod cts;
pub mod isa;
pub mod semantics;
pub mod serberus;

pub use isa::{parse_program, print_program, Instr, Label, LabeledValue, Observation, Program, Reg};
pub use serberus::Capacity;

/// Exact edge weights and flow capacities.
pub type Rational = num_rational::Ratio<i64>;
/// Floating-point edge weights, for callers that prefer speed over exactness.
pub type Float = f64;
