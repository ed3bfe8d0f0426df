use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::message::{Message, ToolCall};
use super::spec::{AgentRole, Tier};

/// Sampling temperature applied to every request.
pub const TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub tools: Vec<ToolSchema>,
    pub temperature: f64,
    /// Which agent is asking, and for what; lets scripted providers pick a
    /// script and HTTP adapters tag logs.
    pub agent: AgentRole,
    pub session: String,
}

impl ProviderRequest {
    pub fn new(agent: AgentRole, session: impl Into<String>, messages: Vec<Message>, tools: Vec<ToolSchema>) -> Self {
        ProviderRequest {
            model: String::new(),
            messages,
            tools,
            temperature: TEMPERATURE,
            agent,
            session: session.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt + self.completion
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: Self) {
        self.prompt += rhs.prompt;
        self.completion += rhs.completion;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderResponse {
    pub text: String,
    pub tool_calls: Vec<ToolCall>,
    pub stop: bool,
    /// Provider-reported usage, when the backend gives one.
    pub usage: Option<TokenUsage>,
    /// Model that produced this response.
    pub served_by: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("rate limited: {0}")]
    RateLimit(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("request failed: {0}")]
    Fatal(String),
}

impl ProviderError {
    /// Failures that move the chain on to the next model.
    pub fn is_retryable(&self) -> bool {
        !matches!(self, ProviderError::Fatal(_))
    }
}

/// One chat-completion-with-tools exchange.
pub trait Provider: Send + Sync {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for std::sync::Arc<P> {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        (**self).complete(request)
    }
}

impl<P: Provider + ?Sized> Provider for &P {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        (**self).complete(request)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ChainError {
    #[error("model chain for {0} is empty")]
    Empty(Tier),
}

/// Ordered models of a single tier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelChain {
    tier: Tier,
    models: Vec<String>,
}

impl ModelChain {
    pub fn new(tier: Tier, models: Vec<String>) -> Result<Self, ChainError> {
        if models.is_empty() {
            return Err(ChainError::Empty(tier));
        }
        Ok(ModelChain { tier, models })
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn primary(&self) -> &str {
        &self.models[0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FallbackAttempt {
    pub model: String,
    pub error: Option<ProviderError>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FallbackError {
    #[error("every model in the {tier} chain failed")]
    ChainExhausted { tier: Tier, attempts: Vec<FallbackAttempt> },
    #[error("{model}: {error}")]
    Fatal { model: String, error: ProviderError, attempts: Vec<FallbackAttempt> },
}

impl fmt::Display for FallbackAttempt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.error {
            None => write!(f, "{}: ok", self.model),
            Some(e) => write!(f, "{}: {e}", self.model),
        }
    }
}

/// Tries each model of the chain in order until one answers. Rate-limit,
/// timeout and unavailability move on to the next model; other failures
/// stop immediately. The response's `served_by` names the model used.
pub fn call_with_fallback(
    provider: &dyn Provider,
    chain: &ModelChain,
    request: &ProviderRequest,
) -> Result<(ProviderResponse, Vec<FallbackAttempt>), FallbackError> {
    let mut attempts = Vec::new();
    for model in chain.models() {
        let mut req = request.clone();
        req.model = model.clone();
        req.temperature = TEMPERATURE;
        match provider.complete(&req) {
            Ok(mut resp) => {
                resp.served_by = model.clone();
                attempts.push(FallbackAttempt { model: model.clone(), error: None });
                return Ok((resp, attempts));
            }
            Err(e) if e.is_retryable() => {
                attempts.push(FallbackAttempt { model: model.clone(), error: Some(e) });
            }
            Err(e) => {
                attempts.push(FallbackAttempt { model: model.clone(), error: Some(e.clone()) });
                return Err(FallbackError::Fatal { model: model.clone(), error: e, attempts });
            }
        }
    }
    Err(FallbackError::ChainExhausted { tier: chain.tier(), attempts })
}
