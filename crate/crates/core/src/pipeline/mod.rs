//! Worker planning and the scan engine that drives agents and fuzzers.

pub mod diff;
pub mod plan;
pub mod poc;
pub mod recipe;
pub mod report;
pub mod tools;
pub mod engine;

pub use diff::{DeltaSpec, DiffError};
pub use engine::{AgentRunRecord, Agents, Engine, Project, ScanConfig, SimTargets, TargetSource, WorkerOutcome};
pub use plan::{plan_workers, ScanMode, TaskBudgets, TaskMetrics, TaskState, WorkerFilter, WorkerTask};
pub use recipe::BlobRecipe;
pub use report::{DiscoveryMethod, ReportBook, VulnReport};
