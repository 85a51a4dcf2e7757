//! Independent oracles and checks for `cstr-core`: finite-difference
//! gradients, brute-force metrics, the label jitter contract, structural
//! invariants of the forward pass and reproducibility of outputs.
//!
//! The checks return `Err` with a description instead of panicking so the
//! acceptance run can report every criterion.

pub mod determinism;
pub mod fd;
pub mod grad_cases;
pub mod invariants;
pub mod metrics_oracle;
pub mod noise_oracle;
