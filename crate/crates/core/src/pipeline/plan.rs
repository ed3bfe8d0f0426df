use std::collections::BTreeSet;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agentcore::cost::CostError;
use crate::agentcore::{PriceTable, ScanBudget};
use crate::callgraph::CallGraph;
use crate::spstore::Sanitizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    Full,
    Delta,
}

impl ScanMode {
    pub fn default_budget(&self) -> ScanBudget {
        match self {
            ScanMode::Full => ScanBudget::FULL,
            ScanMode::Delta => ScanBudget::DELTA,
        }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanMode::Full => "full",
            ScanMode::Delta => "delta",
        })
    }
}

impl std::str::FromStr for ScanMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(ScanMode::Full),
            "delta" => Ok(ScanMode::Delta),
            other => Err(format!("unknown scan mode `{other}` (expected full or delta)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskState {
    Pending,
    Running,
    Done,
    Timeout,
    Failed,
}

impl TaskState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskState::Done | TaskState::Timeout | TaskState::Failed)
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskState::Pending => "pending",
            TaskState::Running => "running",
            TaskState::Done => "done",
            TaskState::Timeout => "timeout",
            TaskState::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskBudgets {
    pub wall_clock_secs: Option<u64>,
    /// Token ceiling across every agent of the task.
    pub tokens: Option<u64>,
    pub dollars: Option<f64>,
}

impl TaskBudgets {
    pub fn unlimited() -> Self {
        TaskBudgets::default()
    }

    /// Minutes and dollars, with the dollar figure turned into a token
    /// ceiling at the most expensive rate among `models`.
    pub fn from_scan_budget<'a>(
        budget: ScanBudget,
        prices: &PriceTable,
        models: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, CostError> {
        Ok(TaskBudgets {
            wall_clock_secs: Some(budget.minutes * 60),
            tokens: Some(prices.token_ceiling(budget.dollars, models)?),
            dollars: Some(budget.dollars),
        })
    }

    pub fn wall_clock(&self) -> Option<Duration> {
        self.wall_clock_secs.map(Duration::from_secs)
    }
}

/// Counters for one task. Every field only grows while the task runs;
/// the verdict split is recounted from the store on each refresh.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub tokens: u64,
    pub tool_calls: u64,
    pub agent_runs: u64,
    /// Candidates this task submitted, merged ones included (SP_tot).
    pub sp_total: u64,
    /// Distinct points this task created (SP_ded).
    pub sp_dedup: u64,
    pub tp: u64,
    pub fp: u64,
    pub unverified: u64,
    pub poc_attempts: u64,
    pub povs: u64,
    pub reports: u64,
    pub fuzz_iterations: u64,
}

impl TaskMetrics {
    /// SP_tot >= SP_ded and SP_ded = TPv + FP + unverified.
    pub fn identities_hold(&self) -> bool {
        self.sp_total >= self.sp_dedup && self.sp_dedup == self.tp + self.fp + self.unverified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerTask {
    pub id: String,
    pub fuzzer: String,
    pub sanitizer: Sanitizer,
    pub mode: ScanMode,
    pub budgets: TaskBudgets,
    pub state: TaskState,
    pub metrics: TaskMetrics,
    /// Functions reachable from the fuzzer.
    pub subgraph_size: usize,
    /// Nothing is reachable, so the task can produce no findings.
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Wall-clock time spent running, kept out of the metrics so those
    /// stay reproducible.
    #[serde(default)]
    pub wall_ms: u64,
}

/// Restricts planning to some fuzzers and/or sanitizers. An empty set
/// allows everything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkerFilter {
    pub fuzzers: BTreeSet<String>,
    pub sanitizers: BTreeSet<Sanitizer>,
}

impl WorkerFilter {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn pair(fuzzer: &str, sanitizer: Sanitizer) -> Self {
        WorkerFilter { fuzzers: BTreeSet::from([fuzzer.to_string()]), sanitizers: BTreeSet::from([sanitizer]) }
    }

    pub fn admits(&self, fuzzer: &str, sanitizer: Sanitizer) -> bool {
        (self.fuzzers.is_empty() || self.fuzzers.contains(fuzzer))
            && (self.sanitizers.is_empty() || self.sanitizers.contains(&sanitizer))
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("no fuzzers given")]
    NoFuzzers,
    #[error("no sanitizers given")]
    NoSanitizers,
    #[error("the filter leaves no (fuzzer, sanitizer) pair to run")]
    EmptyProduct,
}

pub fn task_id(fuzzer: &str, sanitizer: Sanitizer) -> String {
    format!("{fuzzer}-{sanitizer}")
}

/// One task per (fuzzer, sanitizer) pair the filter admits, in input order.
pub fn plan_workers(
    graph: &CallGraph,
    fuzzers: &[String],
    sanitizers: &[Sanitizer],
    filter: &WorkerFilter,
    mode: ScanMode,
    budgets: TaskBudgets,
) -> Result<Vec<WorkerTask>, PlanError> {
    if fuzzers.is_empty() {
        return Err(PlanError::NoFuzzers);
    }
    if sanitizers.is_empty() {
        return Err(PlanError::NoSanitizers);
    }
    let mut seen = BTreeSet::new();
    let mut tasks = Vec::new();
    for fuzzer in fuzzers {
        for &sanitizer in sanitizers {
            if !filter.admits(fuzzer, sanitizer) || !seen.insert((fuzzer.clone(), sanitizer)) {
                continue;
            }
            let size = graph.compute_depths(fuzzer).map(|d| d.len()).unwrap_or(0);
            let mut warnings = Vec::new();
            if size == 0 {
                warnings.push(format!("fuzzer `{fuzzer}` reaches no functions"));
            }
            tasks.push(WorkerTask {
                id: task_id(fuzzer, sanitizer),
                fuzzer: fuzzer.clone(),
                sanitizer,
                mode,
                budgets,
                state: TaskState::Pending,
                metrics: TaskMetrics::default(),
                subgraph_size: size,
                degenerate: size == 0,
                warnings,
                error: None,
                wall_ms: 0,
            });
        }
    }
    if tasks.is_empty() {
        return Err(PlanError::EmptyProduct);
    }
    Ok(tasks)
}
