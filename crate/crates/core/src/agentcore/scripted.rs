//! Deterministic provider that replays a scenario file.
//!
//! ```json
//! {
//!   "version": 1,
//!   "scripts": [
//!     { "role": "sp-generator", "session": "png_fuzzer/*",
//!       "steps": [
//!         { "tool_calls": [ { "name": "get_callees", "arguments": { "function": "png_read_row" } } ] },
//!         { "final": "done" } ] }
//!   ],
//!   "failures": { "main-a": "rate-limit" }
//! }
//! ```
//!
//! A script is chosen by role and session; an exact session match beats a
//! glob (`*` matches any run of characters), and among globs the first one
//! listed wins. The step index is the number of assistant messages already
//! in the request. Past the last step, or with no matching script, the
//! provider stops with empty text.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::message::{MessageRole, ToolCall};
use super::provider::{Provider, ProviderError, ProviderRequest, ProviderResponse, TokenUsage};
use super::spec::AgentRole;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedCall {
    pub name: String,
    #[serde(default)]
    pub arguments: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ScriptedCall>,
    #[serde(default, rename = "final", skip_serializing_if = "Option::is_none")]
    pub final_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

impl Step {
    pub fn calls(calls: Vec<(&str, Value)>) -> Self {
        Step {
            tool_calls: calls
                .into_iter()
                .map(|(n, a)| ScriptedCall { name: n.into(), arguments: a })
                .collect(),
            final_text: None,
            usage: None,
        }
    }

    pub fn finish(text: &str) -> Self {
        Step { tool_calls: Vec::new(), final_text: Some(text.into()), usage: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub role: AgentRole,
    #[serde(default = "any_session")]
    pub session: String,
    pub steps: Vec<Step>,
}

fn any_session() -> String {
    "*".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    RateLimit,
    Timeout,
    Unavailable,
    Fatal,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub scripts: Vec<Script>,
    /// Models that always fail with the given kind.
    #[serde(default)]
    pub failures: std::collections::BTreeMap<String, FailureKind>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported scenario version {0}")]
    Version(u32),
    #[error("script {index} for {role}: step {step} has neither tool calls nor final text")]
    EmptyStep { index: usize, role: AgentRole, step: usize },
}

impl Scenario {
    pub fn new() -> Self {
        Scenario { version: SCENARIO_VERSION, ..Default::default() }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.version != SCENARIO_VERSION {
            return Err(ScenarioError::Version(self.version));
        }
        for (index, script) in self.scripts.iter().enumerate() {
            for (step, s) in script.steps.iter().enumerate() {
                if s.tool_calls.is_empty() && s.final_text.is_none() {
                    return Err(ScenarioError::EmptyStep { index, role: script.role, step });
                }
            }
        }
        Ok(())
    }

    pub fn script(mut self, role: AgentRole, session: &str, steps: Vec<Step>) -> Self {
        self.scripts.push(Script { role, session: session.into(), steps });
        self
    }

    pub fn find(&self, role: AgentRole, session: &str) -> Option<&Script> {
        let all: Vec<&Script> = self.scripts.iter().filter(|s| s.role == role).collect();
        all.iter()
            .find(|s| s.session == session)
            .or_else(|| all.iter().find(|s| glob_match(&s.session, session)))
            .copied()
    }
}

/// `*` matches any (possibly empty) run of characters; everything else is literal.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

/// A served request, kept for inspection by tests and audits.
#[derive(Debug, Clone, PartialEq)]
pub struct ServedRequest {
    pub role: AgentRole,
    pub session: String,
    pub step: usize,
    pub model: String,
    pub request: ProviderRequest,
}

#[derive(Debug)]
pub struct ScriptedProvider {
    scenario: Scenario,
    served: Mutex<Vec<ServedRequest>>,
}

impl ScriptedProvider {
    pub fn new(scenario: Scenario) -> Self {
        ScriptedProvider { scenario, served: Mutex::new(Vec::new()) }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn served(&self) -> Vec<ServedRequest> {
        self.served.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn has_script(&self, role: AgentRole, session: &str) -> bool {
        self.scenario.find(role, session).is_some()
    }
}

impl Provider for ScriptedProvider {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        if let Some(kind) = self.scenario.failures.get(&request.model) {
            let msg = format!("scripted failure for {}", request.model);
            return Err(match kind {
                FailureKind::RateLimit => ProviderError::RateLimit(msg),
                FailureKind::Timeout => ProviderError::Timeout(msg),
                FailureKind::Unavailable => ProviderError::Unavailable(msg),
                FailureKind::Fatal => ProviderError::Fatal(msg),
            });
        }
        let step = request.messages.iter().filter(|m| m.role == MessageRole::Assistant).count();
        self.served.lock().unwrap_or_else(|e| e.into_inner()).push(ServedRequest {
            role: request.agent,
            session: request.session.clone(),
            step,
            model: request.model.clone(),
            request: request.clone(),
        });
        let entry = self
            .scenario
            .find(request.agent, &request.session)
            .and_then(|s| s.steps.get(step));
        let Some(entry) = entry else {
            return Ok(ProviderResponse {
                text: String::new(),
                tool_calls: Vec::new(),
                stop: true,
                usage: None,
                served_by: request.model.clone(),
            });
        };
        let tool_calls: Vec<ToolCall> = entry
            .tool_calls
            .iter()
            .enumerate()
            .map(|(i, c)| ToolCall {
                id: format!("call-{step}-{i}"),
                name: c.name.clone(),
                arguments: c.arguments.clone(),
            })
            .collect();
        Ok(ProviderResponse {
            text: entry.final_text.clone().unwrap_or_default(),
            stop: tool_calls.is_empty(),
            tool_calls,
            usage: entry.usage,
            served_by: request.model.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agentcore::message::Message;
    use serde_json::json;

    #[test]
    fn glob_rules() {
        assert!(glob_match("*", ""));
        assert!(glob_match("png/*", "png/png_read_row"));
        assert!(glob_match("a*c*e", "abcde"));
        assert!(!glob_match("a*c*e", "abde"));
        assert!(!glob_match("png/*", "tar/x"));
        assert!(glob_match("exact", "exact"));
        assert!(!glob_match("ab*ba", "aba"));
    }

    #[test]
    fn exact_session_beats_glob() {
        let s = Scenario::new()
            .script(AgentRole::SpGenerator, "*", vec![Step::finish("glob")])
            .script(AgentRole::SpGenerator, "png/f", vec![Step::finish("exact")]);
        assert_eq!(s.find(AgentRole::SpGenerator, "png/f").unwrap().steps[0], Step::finish("exact"));
        assert_eq!(s.find(AgentRole::SpGenerator, "png/g").unwrap().steps[0], Step::finish("glob"));
        assert!(s.find(AgentRole::Report, "png/g").is_none());
    }

    #[test]
    fn parses_file_format() {
        let text = r#"{"version":1,"scripts":[{"role":"poc-generator","session":"x/*",
            "steps":[{"tool_calls":[{"name":"create_pov","arguments":{"recipe":[]}}]},{"final":"ok"}]}],
            "failures":{"m1":"rate-limit"}}"#;
        let s = Scenario::from_json(text).unwrap();
        assert_eq!(s.scripts[0].steps.len(), 2);
        assert_eq!(s.failures["m1"], FailureKind::RateLimit);
        assert!(Scenario::from_json(r#"{"version":2}"#).is_err());
        assert!(Scenario::from_json(r#"{"version":1,"bogus":1}"#).is_err());
        assert!(Scenario::from_json(r#"{"version":1,"scripts":[{"role":"report","steps":[{}]}]}"#).is_err());
    }

    #[test]
    fn replays_by_assistant_count() {
        let p = ScriptedProvider::new(Scenario::new().script(
            AgentRole::SpGenerator,
            "*",
            vec![Step::calls(vec![("get_callers", json!({"function": "f"}))]), Step::finish("bye")],
        ));
        let mut req = ProviderRequest::new(AgentRole::SpGenerator, "s", vec![Message::user("go")], vec![]);
        let r1 = p.complete(&req).unwrap();
        assert_eq!(r1.tool_calls[0].id, "call-0-0");
        assert!(!r1.stop);
        req.messages.push(Message::assistant("", r1.tool_calls.clone()));
        let r2 = p.complete(&req).unwrap();
        assert!(r2.stop);
        assert_eq!(r2.text, "bye");
        assert_eq!(p.served().len(), 2);
    }
}
