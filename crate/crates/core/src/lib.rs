//! Cross-scale segmentation decoder with token refinement.
//!
//! The decoder consolidates a multi-scale feature pyramid on a compact
//! bottleneck lattice ([`gltr`]), extracts fine-scale structural cues into an
//! immutable key/value buffer ([`bgc`]), consults that buffer exactly once
//! through gated cross-scale attention ([`gcs`]) and finally corrects the
//! least confident pixels with a small residual MLP ([`point`]).
//!
//! Everything runs on the small reverse-mode engine in [`tensor`].

pub mod band;
pub mod bgc;
pub mod data;
pub mod encoder;
pub mod gcs;
pub mod gltr;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod point;
pub mod tensor;
pub mod train;
