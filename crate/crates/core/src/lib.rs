//! Continuous-time mmWave beam tracking with a closed-form liquid neural
//! network cell.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode differentiation graph, Adam,
//!   a finite-difference oracle and the checkpoint format.
//! - [`channel`]: narrowband ULA channel, DFT codebook, pilot sweeps, UE
//!   mobility and the exhaustive-search beam oracle.
//! - [`lnn`]: the closed-form continuous-time (CfC) cell and a reference
//!   liquid time-constant ODE stepper.
//! - [`models`]: feature extractor, output layer and the three trackers
//!   (CfC, LSTM, ODE-LSTM).
//! - [`dataset`]: episode generation and the binary dataset format.
//! - [`harness`]: configuration, training, evaluation, sweeps and the
//!   built-in verification suites used by the CLI.

pub mod channel;
pub mod dataset;
mod error;
pub mod harness;
pub mod lnn;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
