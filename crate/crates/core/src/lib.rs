//! Ptychographic phase retrieval with a one-shot learned "fast-forward"
//! operator, plus a synthetic-data simulator and convergence metrics.
//!
//! The usual flow is [`simkit::synthesize`] to make data,
//! [`engine::run`] to reconstruct (optionally with a
//! [`ffop::FastForwardOperator`] inserted mid-run), and
//! [`evalkit::speedup_table`] to compare runs.

pub mod engine;
pub mod error;
pub mod evalkit;
pub mod ffop;
pub mod fields;
pub mod forward;
pub mod io;
pub mod objective;
pub mod optim;
pub mod simkit;

pub use engine::{run, Engine, EngineConfig, LossRecord, ReconstructionState};
pub use error::{Error, Result};
pub use fields::{ComplexGrid, DiffractionDataset, ProbeStack, RealGrid, ScanPositions};
pub use forward::PhysicsConfig;
