//! Driving-state directed acyclic graph as an executable structural causal
//! model: discrete mechanisms, do-interventions on the action variable, and
//! key-factor identification with an exhaustive oracle.

mod types;
mod scm;
mod explain;
mod text;
pub mod scenario;

pub(crate) use scm::{assignment_index, decode_index};
pub use explain::{key_factors, oracle_key_factors, XI_GRID};
pub use scm::{build_dsdag, Scm, ScmDescription, ScmError};
pub use text::{parse_scm, write_scm, HEADER};
pub use types::{
    Action, CausalExplanation, Danger, EnvFactor, EnvState, EvolveOutcome, Heading, Intervention,
    Loading, Node, SafeState, Speed, VehicleState, CANONICAL_EDGES,
};
