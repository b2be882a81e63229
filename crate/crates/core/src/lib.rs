//! TriAdaptLoRA engine: triangular-split low-rank adapters with
//! importance-driven, budget-constrained adaptive rank growth, plus a toy
//! training host and experiment runner that exercise the mechanism at desk
//! scale.

pub mod adapter;
pub mod error;
pub mod experiment;
pub mod importance;
pub mod linalg;
pub mod scheduler;
pub mod trainer;

pub use adapter::{AdapterCheckpoint, AdapterGrads, AdapterState, InitPolicy, NormRecord, Role, SiteId};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, RunRecord};
pub use importance::{NormVariant, OpCounter, ScoreBoard, ScoreSnapshot};
pub use linalg::{Matrix, RngState};
pub use scheduler::{BudgetState, GrowthEngine, GrowthEvent, ScheduleConfig, ThresholdMode};
