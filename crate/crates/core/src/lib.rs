//! Koopman model averaging.
//!
//! Learn an ensemble of linear embedding models of a nonlinear control system
//! from trajectory data, merge them with pseudo-BMA weights into one weighted
//! linear embedding model, and use it for multi-step prediction, LQR
//! stabilization and box-constrained linear MPC.

pub mod dynamics;
pub mod edmd;
pub mod error;
pub mod exec;
pub mod features;
pub mod linalg;
pub mod training;
pub mod averaging;
pub mod control;
pub mod workbench;

pub use error::{KmaError, Result};
pub use exec::ExecMode;
