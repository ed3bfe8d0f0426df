use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde_json::Value;

use super::provider::ToolSchema;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolOutput {
    pub text: String,
    pub is_error: bool,
    /// Ask the agent loop to stop after this result is recorded.
    pub halt: bool,
}

impl ToolOutput {
    pub fn ok(text: impl Into<String>) -> Self {
        ToolOutput { text: text.into(), is_error: false, halt: false }
    }

    pub fn error(text: impl Into<String>) -> Self {
        ToolOutput { text: text.into(), is_error: true, halt: false }
    }

    pub fn halting(mut self) -> Self {
        self.halt = true;
        self
    }
}

pub trait Tool: Send {
    fn schema(&self) -> ToolSchema;
    fn call(&mut self, arguments: &Value) -> ToolOutput;
}

type ToolFn = Box<dyn FnMut(&Value) -> ToolOutput + Send>;

/// A tool backed by a closure.
pub struct FnTool {
    schema: ToolSchema,
    f: ToolFn,
}

impl FnTool {
    pub fn new(
        name: &str,
        description: &str,
        parameters: Value,
        f: impl FnMut(&Value) -> ToolOutput + Send + 'static,
    ) -> Self {
        FnTool {
            schema: ToolSchema { name: name.into(), description: description.into(), parameters },
            f: Box::new(f),
        }
    }

    pub fn boxed(self) -> Box<dyn Tool> {
        Box::new(self)
    }
}

impl Tool for FnTool {
    fn schema(&self) -> ToolSchema {
        self.schema.clone()
    }

    fn call(&mut self, arguments: &Value) -> ToolOutput {
        (self.f)(arguments)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("tool `{0}` registered twice")]
    DuplicateTool(String),
}

type GroupCtor = Arc<dyn Fn() -> Vec<Box<dyn Tool>> + Send + Sync>;

/// Builds fresh tool registries. A constructor registered as a group is
/// invoked once per registry, so tools of one group may share state with
/// each other but never with another registry.
#[derive(Clone, Default)]
pub struct ToolFactory {
    groups: Vec<(Vec<String>, GroupCtor)>,
}

impl ToolFactory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        ctor: impl Fn() -> Box<dyn Tool> + Send + Sync + 'static,
    ) -> Result<(), RegistryError> {
        self.register_group(&[name], move || vec![ctor()])
    }

    /// `names` must list what `ctor` returns, in any order.
    pub fn register_group(
        &mut self,
        names: &[&str],
        ctor: impl Fn() -> Vec<Box<dyn Tool>> + Send + Sync + 'static,
    ) -> Result<(), RegistryError> {
        for n in names {
            if self.knows(n) {
                return Err(RegistryError::DuplicateTool(n.to_string()));
            }
        }
        self.groups.push((names.iter().map(|s| s.to_string()).collect(), Arc::new(ctor)));
        Ok(())
    }

    pub fn knows(&self, name: &str) -> bool {
        self.groups.iter().any(|(names, _)| names.iter().any(|n| n == name))
    }

    pub fn tool_names(&self) -> BTreeSet<String> {
        self.groups.iter().flat_map(|(n, _)| n.iter().cloned()).collect()
    }

    /// A new registry holding exactly `names`.
    pub fn make_registry(&self, names: &BTreeSet<String>) -> Result<ToolRegistry, RegistryError> {
        if let Some(missing) = names.iter().find(|n| !self.knows(n)) {
            return Err(RegistryError::UnknownTool(missing.clone()));
        }
        let mut tools = BTreeMap::new();
        for (group_names, ctor) in &self.groups {
            if !group_names.iter().any(|n| names.contains(n)) {
                continue;
            }
            for tool in ctor() {
                let name = tool.schema().name;
                if names.contains(&name) {
                    tools.insert(name, tool);
                }
            }
        }
        Ok(ToolRegistry { tools, limits: BTreeMap::new(), calls: BTreeMap::new() })
    }
}

/// Tools owned by one agent instance, with per-tool call caps.
pub struct ToolRegistry {
    tools: BTreeMap<String, Box<dyn Tool>>,
    limits: BTreeMap<String, u32>,
    calls: BTreeMap<String, u32>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("tools", &self.tools.keys().collect::<Vec<_>>())
            .field("limits", &self.limits)
            .field("calls", &self.calls)
            .finish()
    }
}

impl ToolRegistry {
    pub fn empty() -> Self {
        ToolRegistry { tools: BTreeMap::new(), limits: BTreeMap::new(), calls: BTreeMap::new() }
    }

    pub fn insert(&mut self, tool: Box<dyn Tool>) {
        self.tools.insert(tool.schema().name, tool);
    }

    pub fn set_limit(&mut self, name: &str, max_calls: u32) {
        self.limits.insert(name.to_string(), max_calls);
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.tools.keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    pub fn schemas(&self) -> Vec<ToolSchema> {
        self.tools.values().map(|t| t.schema()).collect()
    }

    /// Executed (not refused) calls of `name` so far.
    pub fn calls(&self, name: &str) -> u32 {
        self.calls.get(name).copied().unwrap_or(0)
    }

    /// Runs a tool. Unknown tools and calls beyond a tool's cap come back as
    /// error results rather than failures.
    pub fn invoke(&mut self, name: &str, arguments: &Value) -> ToolOutput {
        let Some(tool) = self.tools.get_mut(name) else {
            return ToolOutput::error(format!("error: unknown tool `{name}`"));
        };
        let used = self.calls.get(name).copied().unwrap_or(0);
        if let Some(&limit) = self.limits.get(name) {
            if used >= limit {
                return ToolOutput::error(format!("error: `{name}` call limit of {limit} reached"));
            }
        }
        self.calls.insert(name.to_string(), used + 1);
        tool.call(arguments)
    }
}
