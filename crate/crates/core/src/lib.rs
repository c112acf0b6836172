//! Neural networks for tabular claim counts whose individual conditional
//! expectation (ICE) curves are kept smooth and monotone through penalties
//! on pseudo-data.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: dense matrices and the gradient tape.
//! - [`schema`]: CSV ingestion, scaling, categorical coding, grids, splits.
//! - [`network`]: the embedding + dense network, forward and backward.
//! - [`penalties`]: deviance, smoothing and monotonicity losses.
//! - [`ice`]: pseudo-batches over full grids or local windows.
//! - [`trainer`]: Adam training, early stopping, nagging, distillation, sweeps.
//! - [`interpret`]: ICE curves, PDPs, audits and CSV exports.
//! - [`synth`]: synthetic portfolios with a known true rate.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod ice;
pub mod interpret;
pub mod network;
pub mod penalties;
pub mod schema;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use ice::{IceScope, PseudoBatch, WindowSpec};
pub use interpret::{AuditScore, PdpWeighting};
pub use network::{Architecture, ForwardCache, NetworkParams};
pub use penalties::{ColumnConstraint, ConstraintSpec, Direction, IceBlock, LossParts};
pub use schema::{ColumnRoles, GridPolicy, RawRecord, Schema, SplitIndices, TabularDataset};
pub use synth::SynthSpec;
pub use tensor::{GradTape, Matrix};
pub use trainer::{Mode, RunResult, TrainConfig, TrainData};
