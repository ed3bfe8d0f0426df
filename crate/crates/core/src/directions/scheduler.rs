use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use crate::callgraph::{CallGraph, FunctionId};

use super::{build_pools, Direction, Pools};

/// Directions a single worker may hold.
pub const MAX_DIRECTIONS: usize = 5;

/// Functions analyzed by any direction of any worker sharing this handle.
/// Cloning shares the set; create a fresh one for per-worker scope.
#[derive(Debug, Clone, Default)]
pub struct AnalyzedSet {
    inner: Arc<Mutex<BTreeSet<FunctionId>>>,
}

impl AnalyzedSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks `id` analyzed; true if this call was the one that marked it.
    pub fn test_and_set(&self, id: &FunctionId) -> bool {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).insert(id.clone())
    }

    pub fn contains(&self, id: &FunctionId) -> bool {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).contains(id)
    }

    pub fn snapshot(&self) -> BTreeSet<FunctionId> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pool membership crossed with analysis status; lower runs first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Priority {
    CoreUnanalyzed = 1,
    CoreAnalyzed = 2,
    GeneralUnanalyzed = 3,
    GeneralAnalyzed = 4,
}

impl Priority {
    pub fn of(core: bool, analyzed: bool) -> Priority {
        match (core, analyzed) {
            (true, false) => Priority::CoreUnanalyzed,
            (true, true) => Priority::CoreAnalyzed,
            (false, false) => Priority::GeneralUnanalyzed,
            (false, true) => Priority::GeneralAnalyzed,
        }
    }

    pub fn number(&self) -> u8 {
        *self as u8
    }

    pub fn is_revisit(&self) -> bool {
        matches!(self, Priority::CoreAnalyzed | Priority::GeneralAnalyzed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Registration {
    Accepted { warnings: Vec<String> },
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pick {
    pub function: FunctionId,
    /// `None` when scheduling from the whole-subgraph fallback pool.
    pub direction: Option<String>,
    pub priority: Priority,
    pub depth: Option<u32>,
}

#[derive(Debug, Clone)]
struct Slot {
    direction: Option<Direction>,
    pools: Pools,
}

/// Per-worker scheduler over registered directions.
///
/// Candidates are ranked by [`Priority`], then by lower call depth, then by
/// function id. A function already analyzed (by anyone sharing the
/// [`AnalyzedSet`]) may be revisited from a direction that has not yet
/// picked it, at most `max_revisits` times per worker.
#[derive(Debug)]
pub struct Scheduler {
    fuzzer: String,
    subgraph: Arc<CallGraph>,
    slots: Vec<Slot>,
    analyzed: AnalyzedSet,
    picked_by: BTreeMap<FunctionId, BTreeSet<usize>>,
    revisits: BTreeMap<FunctionId, u32>,
    max_revisits: u32,
    warnings: Vec<String>,
}

impl Scheduler {
    pub fn new(fuzzer: impl Into<String>, subgraph: Arc<CallGraph>, analyzed: AnalyzedSet) -> Self {
        Scheduler {
            fuzzer: fuzzer.into(),
            subgraph,
            slots: Vec::new(),
            analyzed,
            picked_by: BTreeMap::new(),
            revisits: BTreeMap::new(),
            max_revisits: 1,
            warnings: Vec::new(),
        }
    }

    pub fn with_max_revisits(mut self, n: u32) -> Self {
        self.max_revisits = n;
        self
    }

    pub fn directions(&self) -> impl Iterator<Item = &Direction> {
        self.slots.iter().filter_map(|s| s.direction.as_ref())
    }

    pub fn direction(&self, name: &str) -> Option<&Direction> {
        self.directions().find(|d| d.name == name)
    }

    pub fn pools(&self, name: &str) -> Option<&Pools> {
        self.slots
            .iter()
            .find(|s| s.direction.as_ref().is_some_and(|d| d.name == name))
            .map(|s| &s.pools)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn register_direction(&mut self, direction: Direction) -> Registration {
        if direction.name.trim().is_empty() {
            return Registration::Rejected("direction name is empty".into());
        }
        let held = self.directions().count();
        if held >= MAX_DIRECTIONS {
            return Registration::Rejected(format!(
                "worker already holds {MAX_DIRECTIONS} directions"
            ));
        }
        if self.direction(&direction.name).is_some() {
            return Registration::Rejected(format!("duplicate direction `{}`", direction.name));
        }
        let pools = build_pools(&direction, &self.subgraph);
        let warnings = pools.warnings.clone();
        self.warnings.extend(warnings.iter().cloned());
        self.slots.retain(|s| s.direction.is_some());
        self.slots.push(Slot { direction: Some(direction), pools });
        Registration::Accepted { warnings }
    }

    /// Schedules from the whole subgraph as one General pool. Used when no
    /// direction was produced; a later registration replaces it.
    pub fn use_whole_subgraph(&mut self) {
        if !self.slots.is_empty() {
            return;
        }
        let general = self
            .subgraph
            .functions()
            .filter(|f| !f.external)
            .map(|f| f.id.clone())
            .collect();
        self.slots.push(Slot {
            direction: None,
            pools: Pools { core: BTreeSet::new(), general, warnings: Vec::new() },
        });
    }

    fn depth(&self, id: &FunctionId) -> Option<u32> {
        self.subgraph.depth(id, &self.fuzzer)
    }

    /// Every currently eligible (function, slot, priority) triple.
    pub fn candidates(&self) -> Vec<(FunctionId, usize, Priority)> {
        let mut out = Vec::new();
        for (slot_idx, slot) in self.slots.iter().enumerate() {
            let members = slot
                .pools
                .core
                .iter()
                .map(|f| (f, true))
                .chain(slot.pools.general.iter().map(|f| (f, false)));
            for (f, core) in members {
                if self.picked_by.get(f).is_some_and(|s| s.contains(&slot_idx)) {
                    continue;
                }
                let analyzed = self.analyzed.contains(f);
                if analyzed && self.revisits.get(f).copied().unwrap_or(0) >= self.max_revisits {
                    continue;
                }
                out.push((f.clone(), slot_idx, Priority::of(core, analyzed)));
            }
        }
        out
    }

    /// Returns the best candidate and marks it analyzed, or `None` when
    /// nothing is left.
    pub fn next_function(&mut self) -> Option<Pick> {
        loop {
            let best = self.candidates().into_iter().min_by(|a, b| {
                a.2.cmp(&b.2)
                    .then_with(|| {
                        let da = self.depth(&a.0).unwrap_or(u32::MAX);
                        let db = self.depth(&b.0).unwrap_or(u32::MAX);
                        da.cmp(&db)
                    })
                    .then_with(|| a.0.cmp(&b.0))
                    .then_with(|| a.1.cmp(&b.1))
            })?;
            let (function, slot_idx, priority) = best;
            if priority.is_revisit() {
                *self.revisits.entry(function.clone()).or_default() += 1;
            } else if !self.analyzed.test_and_set(&function) {
                // another worker claimed it between ranking and marking
                continue;
            }
            self.picked_by.entry(function.clone()).or_default().insert(slot_idx);
            return Some(Pick {
                depth: self.depth(&function),
                direction: self.slots[slot_idx].direction.as_ref().map(|d| d.name.clone()),
                function,
                priority,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directions::RiskLevel;

    fn dir(name: &str, entry: &[&str], core: &[&str]) -> Direction {
        Direction {
            name: name.into(),
            entry_functions: entry.iter().map(|s| s.to_string()).collect(),
            core_functions: core.iter().map(|s| s.to_string()).collect(),
            risk_level: RiskLevel::Medium,
            risk_reason: String::new(),
        }
    }

    fn graph() -> Arc<CallGraph> {
        Arc::new(
            CallGraph::builder()
                .function("e", &["shallow", "mid"])
                .function("shallow", &["g1"])
                .function("mid", &["deep"])
                .function("deep", &["g2"])
                .function("g1", &[])
                .function("g2", &[])
                .entry("fz", "e")
                .build()
                .unwrap(),
        )
    }

    #[test]
    fn sixth_direction_rejected() {
        let mut s = Scheduler::new("fz", graph(), AnalyzedSet::new());
        for i in 0..5 {
            assert!(matches!(s.register_direction(dir(&format!("d{i}"), &["e"], &[])), Registration::Accepted { .. }));
        }
        assert!(matches!(s.register_direction(dir("d5", &["e"], &[])), Registration::Rejected(_)));
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = Scheduler::new("fz", graph(), AnalyzedSet::new());
        s.register_direction(dir("a", &["e"], &[]));
        assert!(matches!(s.register_direction(dir("a", &["e"], &[])), Registration::Rejected(_)));
    }

    #[test]
    fn core_unanalyzed_beats_general_regardless_of_depth() {
        let mut s = Scheduler::new("fz", graph(), AnalyzedSet::new());
        s.register_direction(dir("a", &["mid"], &[]));
        // core: mid (depth 2); general: deep (3), g2 (4)
        let p = s.next_function().unwrap();
        assert_eq!(p.function.as_str(), "mid");
        assert_eq!(p.priority, Priority::CoreUnanalyzed);
    }

    #[test]
    fn depth_breaks_ties() {
        let mut s = Scheduler::new("fz", graph(), AnalyzedSet::new());
        s.register_direction(dir("a", &["deep"], &["shallow"]));
        assert_eq!(s.next_function().unwrap().function.as_str(), "shallow");
        assert_eq!(s.next_function().unwrap().function.as_str(), "deep");
    }

    #[test]
    fn revisits_are_capped_and_come_from_other_directions() {
        let analyzed = AnalyzedSet::new();
        let mut s = Scheduler::new("fz", graph(), analyzed.clone());
        s.register_direction(dir("a", &["shallow"], &[]));
        s.register_direction(dir("b", &["shallow"], &[]));
        let picks: Vec<Pick> = std::iter::from_fn(|| s.next_function()).collect();
        let order: Vec<(&str, u8)> = picks.iter().map(|p| (p.function.as_str(), p.priority.number())).collect();
        assert_eq!(order, vec![("shallow", 1), ("shallow", 2), ("g1", 3), ("g1", 4)]);
        assert_eq!(picks[1].direction.as_deref(), Some("b"));
    }

    #[test]
    fn shared_set_makes_other_workers_work_priority_two() {
        let analyzed = AnalyzedSet::new();
        analyzed.test_and_set(&"mid".into());
        let mut s = Scheduler::new("fz", graph(), analyzed).with_max_revisits(0);
        s.register_direction(dir("a", &["mid"], &[]));
        let picks: Vec<String> = std::iter::from_fn(|| s.next_function()).map(|p| p.function.to_string()).collect();
        assert_eq!(picks, vec!["deep", "g2"]);
    }

    #[test]
    fn fallback_pool_covers_subgraph() {
        let mut s = Scheduler::new("fz", graph(), AnalyzedSet::new()).with_max_revisits(0);
        s.use_whole_subgraph();
        let picks: Vec<Pick> = std::iter::from_fn(|| s.next_function()).collect();
        assert_eq!(picks.len(), 6);
        assert!(picks.iter().all(|p| p.direction.is_none() && p.priority == Priority::GeneralUnanalyzed));
        assert_eq!(picks[0].function.as_str(), "e");
    }
}
