use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::compress::{compress_context, Summarizer};
use super::message::{Conversation, Message};
use super::provider::{call_with_fallback, FallbackError, Provider, ProviderRequest, TokenUsage};
use super::registry::ToolRegistry;
use super::spec::{AgentRole, AgentSpec};

/// Initial context for one agent run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSeed {
    pub system: String,
    pub user: String,
    /// Free-form key identifying what the run is about, e.g. `png_fuzzer/address/png_read_row`.
    pub session: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetKind {
    ToolCalls,
    Tokens,
    WallClock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// The provider stopped on its own.
    Stopped,
    BudgetExhausted(BudgetKind),
    /// A tool asked the loop to end.
    Halted,
    /// Every model in the chain failed, or one failed fatally.
    ProviderFailed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallRecord {
    pub turn: usize,
    pub name: String,
    pub arguments: Value,
    /// First 16 hex digits of the SHA-256 of the result text.
    pub result_digest: String,
    pub is_error: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutcome {
    pub role: AgentRole,
    pub final_text: String,
    pub log: Vec<ToolCallRecord>,
    pub usage: TokenUsage,
    pub turn_usage: Vec<TokenUsage>,
    pub termination: Termination,
    pub turns: usize,
    /// Model behind each turn.
    pub served_by: Vec<String>,
    pub conversation: Conversation,
}

impl AgentOutcome {
    pub fn tool_calls(&self, name: &str) -> usize {
        self.log.iter().filter(|r| r.name == name).count()
    }

    pub fn budget_exhausted(&self) -> bool {
        matches!(self.termination, Termination::BudgetExhausted(_))
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AgentError {
    #[error("tool `{0}` is named by the agent spec but missing from the registry")]
    MissingTool(String),
}

pub fn digest(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Runs the tool-calling loop until the provider stops or a budget trips.
///
/// Budgets are checked before every provider call (tokens, wall clock) and
/// before every tool execution (tool calls). Tool failures come back to the
/// model as error results. Token usage is the provider's figure when it
/// reports one, otherwise the length estimate of prompt and completion.
pub fn run_agent(
    spec: &AgentSpec,
    seed: &AgentSeed,
    registry: &mut ToolRegistry,
    provider: &dyn Provider,
    summarizer: Option<&dyn Summarizer>,
) -> Result<AgentOutcome, AgentError> {
    if let Some(missing) = spec.tool_names.iter().find(|n| !registry.contains(n)) {
        return Err(AgentError::MissingTool(missing.clone()));
    }
    for (tool, limit) in &spec.budgets.tool_limits {
        registry.set_limit(tool, *limit);
    }
    let schemas: Vec<_> = registry
        .schemas()
        .into_iter()
        .filter(|s| spec.tool_names.contains(&s.name))
        .collect();

    let started = Instant::now();
    let mut conv = Conversation::new();
    conv.push(Message::system(seed.system.clone())).expect("system message");
    conv.push(Message::user(seed.user.clone())).expect("user message");

    let mut out = AgentOutcome {
        role: spec.role,
        final_text: String::new(),
        log: Vec::new(),
        usage: TokenUsage::default(),
        turn_usage: Vec::new(),
        termination: Termination::Stopped,
        turns: 0,
        served_by: Vec::new(),
        conversation: Conversation::new(),
    };
    let mut tool_calls_used: u32 = 0;

    let termination = 'outer: loop {
        if let Some(max) = spec.budgets.max_total_tokens {
            if out.usage.total() >= max {
                break Termination::BudgetExhausted(BudgetKind::Tokens);
            }
        }
        if let Some(max) = spec.budgets.max_wall_clock {
            if started.elapsed() >= max {
                break Termination::BudgetExhausted(BudgetKind::WallClock);
            }
        }
        if let Some(limit) = spec.budgets.context_limit {
            if let Ok(c) = compress_context(&conv, limit, summarizer) {
                conv = c;
            }
        }

        let request = ProviderRequest::new(spec.role, seed.session.clone(), conv.messages().to_vec(), schemas.clone());
        let resp = match call_with_fallback(provider, &spec.model_chain, &request) {
            Ok((resp, _)) => resp,
            Err(e @ FallbackError::ChainExhausted { .. }) | Err(e @ FallbackError::Fatal { .. }) => {
                break Termination::ProviderFailed(e.to_string());
            }
        };
        out.turns += 1;
        out.served_by.push(resp.served_by.clone());
        let assistant = Message::assistant(resp.text.clone(), resp.tool_calls.clone());
        let turn_usage = resp.usage.unwrap_or(TokenUsage {
            prompt: conv.total_tokens() as u64,
            completion: assistant.tokens as u64,
        });
        out.usage += turn_usage;
        out.turn_usage.push(turn_usage);
        if !resp.text.is_empty() {
            out.final_text = resp.text.clone();
        }
        conv.push(assistant).expect("assistant message");

        for call in &resp.tool_calls {
            if let Some(max) = spec.budgets.max_tool_calls {
                if tool_calls_used >= max {
                    break 'outer Termination::BudgetExhausted(BudgetKind::ToolCalls);
                }
            }
            tool_calls_used += 1;
            let result = if spec.tool_names.contains(&call.name) {
                registry.invoke(&call.name, &call.arguments)
            } else {
                super::registry::ToolOutput::error(format!("error: tool `{}` is not available", call.name))
            };
            out.log.push(ToolCallRecord {
                turn: out.turns,
                name: call.name.clone(),
                arguments: call.arguments.clone(),
                result_digest: digest(&result.text),
                is_error: result.is_error,
            });
            conv.push(Message::tool_result(call.id.clone(), result.text)).expect("follows assistant");
            if result.halt {
                break 'outer Termination::Halted;
            }
        }
        if resp.tool_calls.is_empty() || resp.stop {
            break Termination::Stopped;
        }
    };

    out.termination = termination;
    out.conversation = conv;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agentcore::provider::ModelChain;
    use crate::agentcore::registry::{FnTool, ToolOutput};
    use crate::agentcore::scripted::{Scenario, ScriptedProvider, Step};
    use crate::agentcore::spec::{AgentBudgets, Tier};
    use serde_json::json;

    fn spec(role: AgentRole, tools: &[&str]) -> AgentSpec {
        let chain = ModelChain::new(role.default_tier(), vec!["m1".into(), "m2".into()]).unwrap();
        AgentSpec::new(role, chain).unwrap().with_tools(tools.iter().copied())
    }

    fn echo_registry() -> ToolRegistry {
        let mut r = ToolRegistry::empty();
        r.insert(FnTool::new("echo", "", json!({}), |a| ToolOutput::ok(a.to_string())).boxed());
        r.insert(FnTool::new("boom", "", json!({}), |_| ToolOutput::error("error: boom")).boxed());
        r
    }

    fn seed() -> AgentSeed {
        AgentSeed { system: "sys".into(), user: "go".into(), session: "s".into() }
    }

    fn two_calls_then_stop() -> ScriptedProvider {
        ScriptedProvider::new(Scenario::new().script(
            AgentRole::SpGenerator,
            "*",
            vec![
                Step::calls(vec![("echo", json!({"x": 1}))]),
                Step::calls(vec![("boom", json!({}))]),
                Step::finish("done"),
            ],
        ))
    }

    #[test]
    fn two_calls_then_stop_logs_two_entries() {
        let p = two_calls_then_stop();
        let out = run_agent(&spec(AgentRole::SpGenerator, &["echo", "boom"]), &seed(), &mut echo_registry(), &p, None)
            .unwrap();
        assert_eq!(out.log.len(), 2);
        assert_eq!(out.termination, Termination::Stopped);
        assert_eq!(out.final_text, "done");
        assert!(out.log[1].is_error);
        assert_eq!(out.turns, 3);
        assert_eq!(out.served_by, vec!["m1"; 3]);
    }

    #[test]
    fn deterministic_replay() {
        let s = spec(AgentRole::SpGenerator, &["echo", "boom"]);
        let a = run_agent(&s, &seed(), &mut echo_registry(), &two_calls_then_stop(), None).unwrap();
        let b = run_agent(&s, &seed(), &mut echo_registry(), &two_calls_then_stop(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tool_call_budget_trips() {
        let p = ScriptedProvider::new(Scenario::new().script(
            AgentRole::SpGenerator,
            "*",
            vec![Step::calls(vec![("echo", json!(1)), ("echo", json!(2)), ("echo", json!(3))])],
        ));
        let s = spec(AgentRole::SpGenerator, &["echo"])
            .with_budgets(AgentBudgets { max_tool_calls: Some(1), ..Default::default() });
        let out = run_agent(&s, &seed(), &mut echo_registry(), &p, None).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.termination, Termination::BudgetExhausted(BudgetKind::ToolCalls));
    }

    #[test]
    fn token_budget_trips_within_one_turn() {
        let steps = (0..50).map(|i| Step::calls(vec![("echo", json!(i))])).collect();
        let p = ScriptedProvider::new(Scenario::new().script(AgentRole::SpGenerator, "*", steps));
        let s = spec(AgentRole::SpGenerator, &["echo"])
            .with_budgets(AgentBudgets { max_total_tokens: Some(40), ..Default::default() });
        let out = run_agent(&s, &seed(), &mut echo_registry(), &p, None).unwrap();
        assert_eq!(out.termination, Termination::BudgetExhausted(BudgetKind::Tokens));
        assert!(out.turns < 50);
        let last = out.turn_usage.last().unwrap().total();
        assert!(out.usage.total() - last < 40);
        assert!(out.usage.total() >= 40);
    }

    #[test]
    fn unknown_tool_call_is_error_result() {
        let p = ScriptedProvider::new(Scenario::new().script(
            AgentRole::SpGenerator,
            "*",
            vec![Step::calls(vec![("not_mine", json!({}))]), Step::finish("ok")],
        ));
        let out = run_agent(&spec(AgentRole::SpGenerator, &["echo"]), &seed(), &mut echo_registry(), &p, None).unwrap();
        assert!(out.log[0].is_error);
        assert_eq!(out.termination, Termination::Stopped);
    }

    #[test]
    fn missing_tool_is_rejected_up_front() {
        let p = two_calls_then_stop();
        assert_eq!(
            run_agent(&spec(AgentRole::SpGenerator, &["ghost"]), &seed(), &mut echo_registry(), &p, None),
            Err(AgentError::MissingTool("ghost".into()))
        );
    }

    #[test]
    fn per_tool_limit_caps_executions() {
        let steps = (0..45).map(|i| Step::calls(vec![("echo", json!(i))])).collect();
        let p = ScriptedProvider::new(Scenario::new().script(AgentRole::PocGenerator, "*", steps));
        let mut budgets = AgentBudgets::default();
        budgets.tool_limits.insert("echo".into(), 40);
        let s = spec(AgentRole::PocGenerator, &["echo"]).with_budgets(budgets);
        let mut reg = echo_registry();
        let out = run_agent(&s, &seed(), &mut reg, &p, None).unwrap();
        assert_eq!(reg.calls("echo"), 40);
        assert_eq!(out.log.iter().filter(|r| !r.is_error).count(), 40);
    }

    #[test]
    fn chain_exhaustion_is_an_outcome() {
        let mut sc = Scenario::new();
        sc.failures.insert("m1".into(), crate::agentcore::scripted::FailureKind::Timeout);
        sc.failures.insert("m2".into(), crate::agentcore::scripted::FailureKind::Unavailable);
        let p = ScriptedProvider::new(sc);
        let out = run_agent(&spec(AgentRole::SpGenerator, &[]), &seed(), &mut echo_registry(), &p, None).unwrap();
        assert!(matches!(out.termination, Termination::ProviderFailed(_)));
        assert_eq!(out.turns, 0);
        let _ = Tier::T1;
    }
}
