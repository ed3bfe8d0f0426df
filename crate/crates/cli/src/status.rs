//! `spscan status`: a per-task metrics table read from the store.

use std::fmt::Write as _;

use anyhow::{Context, Result};
use serde::Deserialize;
use spscan::pipeline::{AgentRunRecord, TaskMetrics, WorkerTask};

use crate::store::{Collection, StoreBackend};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStatus {
    pub task: WorkerTask,
    /// Tokens summed over the task's logged agent runs.
    pub logged_tokens: u64,
    pub logged_runs: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatusSnapshot {
    pub tasks: Vec<TaskStatus>,
    pub total: TaskMetrics,
    pub total_wall_ms: u64,
}

impl StatusSnapshot {
    pub fn identities_hold(&self) -> bool {
        self.total.identities_hold() && self.tasks.iter().all(|t| t.task.metrics.identities_hold())
    }
}

#[derive(Deserialize)]
struct MetricsRecord {
    #[serde(default)]
    agent_runs: Vec<AgentRunRecord>,
}

fn add(total: &mut TaskMetrics, m: &TaskMetrics) {
    total.tokens += m.tokens;
    total.tool_calls += m.tool_calls;
    total.agent_runs += m.agent_runs;
    total.sp_total += m.sp_total;
    total.sp_dedup += m.sp_dedup;
    total.tp += m.tp;
    total.fp += m.fp;
    total.unverified += m.unverified;
    total.poc_attempts += m.poc_attempts;
    total.povs += m.povs;
    total.reports += m.reports;
    total.fuzz_iterations += m.fuzz_iterations;
}

/// Reads every task record. Each record is read once, without locking.
pub fn snapshot(store: &dyn StoreBackend) -> Result<StatusSnapshot> {
    let mut snap = StatusSnapshot::default();
    for (key, value) in store.list(Collection::Tasks)? {
        let task: WorkerTask = serde_json::from_value(value).with_context(|| format!("decoding task {key}"))?;
        let runs = match store.get(Collection::Metrics, &key)? {
            Some(v) => {
                serde_json::from_value::<MetricsRecord>(v).with_context(|| format!("decoding metrics {key}"))?.agent_runs
            }
            None => Vec::new(),
        };
        add(&mut snap.total, &task.metrics);
        snap.total_wall_ms += task.wall_ms;
        snap.tasks.push(TaskStatus {
            logged_tokens: runs.iter().map(|r| r.tokens).sum(),
            logged_runs: runs.len() as u64,
            task,
        });
    }
    Ok(snap)
}

const HEADER: [&str; 13] =
    ["task", "mode", "state", "tokens", "wall_s", "tools", "SP_tot", "SP_ded", "TPv", "FP", "unver", "PoVs", "reports"];

fn row(cells: &mut Vec<[String; 13]>, name: &str, mode: &str, state: &str, m: &TaskMetrics, wall_ms: u64) {
    let n = |v: u64| v.to_string();
    cells.push([
        name.to_string(),
        mode.to_string(),
        state.to_string(),
        n(m.tokens),
        format!("{:.1}", wall_ms as f64 / 1000.0),
        n(m.tool_calls),
        n(m.sp_total),
        n(m.sp_dedup),
        n(m.tp),
        n(m.fp),
        n(m.unverified),
        n(m.povs),
        n(m.reports),
    ]);
}

pub fn render(snap: &StatusSnapshot) -> String {
    let mut cells: Vec<[String; 13]> = vec![HEADER.map(String::from)];
    for t in &snap.tasks {
        let task = &t.task;
        row(&mut cells, &task.id, &task.mode.to_string(), &task.state.to_string(), &task.metrics, task.wall_ms);
    }
    row(&mut cells, "total", "", "", &snap.total, snap.total_wall_ms);
    let widths: Vec<usize> = (0..HEADER.len()).map(|i| cells.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &cells {
        let mut line = String::new();
        for (i, c) in r.iter().enumerate() {
            if i < 3 {
                let _ = write!(line, "{:<w$}  ", c, w = widths[i]);
            } else {
                let _ = write!(line, "{:>w$}  ", c, w = widths[i]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "metric identities (SP_tot >= SP_ded = TPv + FP + unver): {}",
        if snap.identities_hold() { "hold" } else { "VIOLATED" }
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemoryStore;

    #[test]
    fn fresh_store_shows_zeros() {
        let snap = snapshot(&MemoryStore::new()).unwrap();
        assert!(snap.tasks.is_empty());
        assert_eq!(snap.total, TaskMetrics::default());
        let text = render(&snap);
        let total = text.lines().find(|l| l.starts_with("total")).unwrap();
        assert!(total.split_whitespace().skip(1).all(|c| c.chars().all(|ch| ch == '0' || ch == '.')), "{total}");
        assert!(text.contains("hold"));
    }
}
