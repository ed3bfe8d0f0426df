use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::provider::ModelChain;

/// Model tier: reasoning, main, utility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    T1,
    T2,
    T3,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentRole {
    DirectionGenerator,
    SpGenerator,
    SpDeduplicator,
    SpVerifier,
    PocGenerator,
    Report,
    SeedGenerator,
    ContextCompressor,
}

impl AgentRole {
    pub const ALL: [AgentRole; 8] = [
        AgentRole::DirectionGenerator,
        AgentRole::SpGenerator,
        AgentRole::SpDeduplicator,
        AgentRole::SpVerifier,
        AgentRole::PocGenerator,
        AgentRole::Report,
        AgentRole::SeedGenerator,
        AgentRole::ContextCompressor,
    ];

    pub fn default_tier(&self) -> Tier {
        match self {
            AgentRole::DirectionGenerator | AgentRole::SpVerifier => Tier::T1,
            AgentRole::SpGenerator
            | AgentRole::PocGenerator
            | AgentRole::Report
            | AgentRole::SeedGenerator => Tier::T2,
            AgentRole::SpDeduplicator | AgentRole::ContextCompressor => Tier::T3,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AgentRole::DirectionGenerator => "direction-generator",
            AgentRole::SpGenerator => "sp-generator",
            AgentRole::SpDeduplicator => "sp-deduplicator",
            AgentRole::SpVerifier => "sp-verifier",
            AgentRole::PocGenerator => "poc-generator",
            AgentRole::Report => "report",
            AgentRole::SeedGenerator => "seed-generator",
            AgentRole::ContextCompressor => "context-compressor",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown agent role `{s}`"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentBudgets {
    pub max_tool_calls: Option<u32>,
    pub max_total_tokens: Option<u64>,
    pub max_wall_clock: Option<Duration>,
    /// Per-tool call caps, e.g. `create_pov` → 40.
    pub tool_limits: BTreeMap<String, u32>,
    /// Compress the conversation before a turn once it exceeds this size.
    pub context_limit: Option<usize>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SpecError {
    #[error("{role} runs on tier {expected} but the chain is {actual}")]
    TierMismatch { role: AgentRole, expected: Tier, actual: Tier },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub role: AgentRole,
    pub tier: Tier,
    pub model_chain: ModelChain,
    pub tool_names: BTreeSet<String>,
    pub budgets: AgentBudgets,
}

impl AgentSpec {
    pub fn new(role: AgentRole, model_chain: ModelChain) -> Result<Self, SpecError> {
        let expected = role.default_tier();
        if model_chain.tier() != expected {
            return Err(SpecError::TierMismatch { role, expected, actual: model_chain.tier() });
        }
        Ok(AgentSpec {
            role,
            tier: expected,
            model_chain,
            tool_names: BTreeSet::new(),
            budgets: AgentBudgets::default(),
        })
    }

    pub fn with_tools<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tool_names.extend(names.into_iter().map(Into::into));
        self
    }

    pub fn with_budgets(mut self, budgets: AgentBudgets) -> Self {
        self.budgets = budgets;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_tiers() {
        assert_eq!(AgentRole::DirectionGenerator.default_tier(), Tier::T1);
        assert_eq!(AgentRole::SpVerifier.default_tier(), Tier::T1);
        assert_eq!(AgentRole::PocGenerator.default_tier(), Tier::T2);
        assert_eq!(AgentRole::SpDeduplicator.default_tier(), Tier::T3);
        assert_eq!(AgentRole::ContextCompressor.default_tier(), Tier::T3);
    }

    #[test]
    fn spec_rejects_wrong_tier_chain() {
        let chain = ModelChain::new(Tier::T3, vec!["small".into()]).unwrap();
        assert!(AgentSpec::new(AgentRole::SpVerifier, chain).is_err());
    }
}
