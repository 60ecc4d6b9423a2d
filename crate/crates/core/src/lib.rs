//! Time-to-first-spike networks with an exact ReLU equivalent.
//!
//! Spike times are computed in closed form, mapped one-to-one onto ReLU
//! activations, and differentiated exactly.

pub mod bridge;
pub mod constraints;
pub mod diagnostics;
pub mod dynamics;
pub mod grad;
pub mod linalg;
pub mod sample;
pub mod scheduler;
