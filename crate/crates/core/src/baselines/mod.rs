//! Comparison controllers and tuning utilities: a two-layer PID, an
//! L1-style adaptive augmentation for the MPC, and the DARE-based gain
//! computation used to derive terminal weights and tuning diagnostics.

pub mod dare;
pub mod l1;
pub mod pid;
pub mod tuning;
