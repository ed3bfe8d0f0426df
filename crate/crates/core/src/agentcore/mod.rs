//! Tool-calling agent loop, tiered provider chains with fallback, per-agent
//! tool registries, context compression and a scripted provider.

mod agent_loop;
mod compress;
pub mod cost;
#[cfg(feature = "http")]
pub mod http;
mod message;
pub mod prompts;
mod provider;
mod registry;
pub mod scripted;
mod spec;

pub use agent_loop::{
    digest, run_agent, AgentError, AgentOutcome, AgentSeed, BudgetKind, Termination, ToolCallRecord,
};
pub use compress::{compress_context, truncation_index, AgentSummarizer, CompressError, Summarizer};
pub use cost::{PriceTable, ScanBudget};
pub use message::{estimate_tokens, Conversation, ConversationError, Message, MessageRole, ToolCall};
pub use provider::{
    call_with_fallback, ChainError, FallbackAttempt, FallbackError, ModelChain, Provider, ProviderError,
    ProviderRequest, ProviderResponse, TokenUsage, ToolSchema, TEMPERATURE,
};
pub use registry::{FnTool, RegistryError, Tool, ToolFactory, ToolOutput, ToolRegistry};
pub use scripted::{Scenario, ScriptedProvider, Step};
pub use spec::{AgentBudgets, AgentRole, AgentSpec, SpecError, Tier};
