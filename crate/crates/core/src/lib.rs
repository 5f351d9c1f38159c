//! Zeeman spectroscopy of trapped ⁹Be⁺ ions in the ²S₁/₂ ground state.
//!
//! The crate covers the level structure ([`levels`]), a forward simulator for
//! frequency scans ([`synth`]), peak extraction ([`peaks`]), the coil
//! calibration fits ([`fieldfit`]), closed-loop field nulling ([`minimize`])
//! and the derived limits ([`analysis`]). [`io`], [`config`] and [`cli`] tie
//! them to files and the `zeemancal` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod exec;
pub mod fieldfit;
pub mod io;
pub mod levels;
pub mod lsq;
pub mod measured;
pub mod minimize;
pub mod peaks;
pub mod study;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Execution;
pub use measured::Measured;
