//! Core library for the MCAM reference stack: a driving-state structural
//! causal model with interventions and key-factor identification, a
//! synthetic scenario simulator with known ground-truth causes, and the
//! neural pipeline (multi-level feature extraction, causal fusion and
//! gating, caption decoding) trained on simulator data.

pub mod numerics;
pub mod dsdag;
pub mod simulator;
pub mod mfe;
pub mod cam;
pub mod vlt;
pub mod metrics;
