//! Directions (business-feature scopes), their Core/General function pools,
//! and the priority scheduler that decides which function to analyze next.

mod scheduler;

pub use scheduler::{AnalyzedSet, Pick, Priority, Registration, Scheduler, MAX_DIRECTIONS};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::callgraph::{CallGraph, FunctionId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskLevel {
    Low,
    Medium,
    High,
}

impl RiskLevel {
    /// Importance rank used to order the PoC queue.
    pub fn rank(&self) -> u8 {
        match self {
            RiskLevel::High => 3,
            RiskLevel::Medium => 2,
            RiskLevel::Low => 1,
        }
    }
}

impl fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskLevel::High => "high",
            RiskLevel::Medium => "medium",
            RiskLevel::Low => "low",
        })
    }
}

impl FromStr for RiskLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(RiskLevel::High),
            "medium" => Ok(RiskLevel::Medium),
            "low" => Ok(RiskLevel::Low),
            other => Err(format!("unknown risk level `{other}`")),
        }
    }
}

/// A business feature of the code under test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Direction {
    pub name: String,
    pub entry_functions: Vec<String>,
    pub core_functions: Vec<String>,
    pub risk_level: RiskLevel,
    #[serde(default)]
    pub risk_reason: String,
}

/// The two function pools of one direction. Disjoint by construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pools {
    pub core: BTreeSet<FunctionId>,
    pub general: BTreeSet<FunctionId>,
    /// Named functions that did not resolve in the subgraph.
    pub warnings: Vec<String>,
}

/// Core = entry ∪ core functions; General = everything the entry functions
/// transitively call inside the subgraph, minus Core. External stubs are
/// left out of both pools since they have no body to analyze.
pub fn build_pools(direction: &Direction, subgraph: &CallGraph) -> Pools {
    let mut pools = Pools::default();
    let mut entries = Vec::new();
    let mut resolve = |name: &str, is_entry: bool, pools: &mut Pools| match subgraph.resolve(name) {
        Ok(f) if !f.external => {
            pools.core.insert(f.id.clone());
            if is_entry {
                entries.push(f.id.clone());
            }
        }
        Ok(_) => pools
            .warnings
            .push(format!("direction `{}`: `{name}` is external, skipped", direction.name)),
        Err(_) => pools
            .warnings
            .push(format!("direction `{}`: function `{name}` not in subgraph, skipped", direction.name)),
    };
    for name in &direction.entry_functions {
        resolve(name, true, &mut pools);
    }
    for name in &direction.core_functions {
        resolve(name, false, &mut pools);
    }
    pools.general = subgraph
        .closure_from(entries.iter())
        .into_iter()
        .filter(|id| !pools.core.contains(id))
        .filter(|id| subgraph.function(id).is_some_and(|f| !f.external))
        .collect();
    pools
}
