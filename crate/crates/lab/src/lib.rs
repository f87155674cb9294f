//! Experiment harness around `r3-core`: the sorting task, configuration,
//! file formats and the diagnose, train and replay-verify commands.

pub mod config;
pub mod diagnose;
pub mod error;
pub mod io;
pub mod policy;
pub mod task;
pub mod train;
pub mod verify;

pub use config::ExperimentConfig;
pub use diagnose::{run_diagnose, DiagnoseReport, DiagnoseSummary};
pub use error::{LabError, Result};
pub use train::{run_train, TrainReport, TrainSummary};
pub use verify::{run_replay_verify, Check, VerifyReport};
