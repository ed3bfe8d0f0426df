use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Rough token estimate used whenever a provider does not report usage:
/// one token per four bytes, at least one per non-empty text.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
    ToolResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub arguments: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
    pub tokens: usize,
}

impl Message {
    fn build(role: MessageRole, content: String, tool_calls: Vec<ToolCall>, tool_call_id: Option<String>) -> Self {
        let mut size = estimate_tokens(&content);
        for c in &tool_calls {
            size += estimate_tokens(&c.name) + estimate_tokens(&c.arguments.to_string());
        }
        Message { role, content, tool_calls, tool_call_id, tokens: size.max(1) }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::build(MessageRole::System, text.into(), Vec::new(), None)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::build(MessageRole::User, text.into(), Vec::new(), None)
    }

    pub fn assistant(text: impl Into<String>, tool_calls: Vec<ToolCall>) -> Self {
        Self::build(MessageRole::Assistant, text.into(), tool_calls, None)
    }

    pub fn tool_result(call_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self::build(MessageRole::ToolResult, text.into(), Vec::new(), Some(call_id.into()))
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConversationError {
    #[error("tool result for `{0}` does not follow the assistant message that requested it")]
    OrphanToolResult(String),
}

/// Ordered message list. Tool results are only accepted directly after the
/// assistant message (or sibling results) that requested them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    messages: Vec<Message>,
}

impl Conversation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_messages(messages: Vec<Message>) -> Result<Self, ConversationError> {
        let mut c = Conversation::new();
        for m in messages {
            c.push(m)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, message: Message) -> Result<(), ConversationError> {
        if message.role == MessageRole::ToolResult {
            let call_id = message.tool_call_id.clone().unwrap_or_default();
            let requester = self
                .messages
                .iter()
                .rev()
                .find(|m| m.role != MessageRole::ToolResult);
            let ok = requester.is_some_and(|m| {
                m.role == MessageRole::Assistant && m.tool_calls.iter().any(|c| c.id == call_id)
            });
            if !ok {
                return Err(ConversationError::OrphanToolResult(call_id));
            }
        }
        self.messages.push(message);
        Ok(())
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.messages.iter().map(|m| m.tokens).sum()
    }

    /// Number of assistant turns so far.
    pub fn assistant_turns(&self) -> usize {
        self.messages.iter().filter(|m| m.role == MessageRole::Assistant).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tool_results_must_follow_requester() {
        let mut c = Conversation::new();
        c.push(Message::system("s")).unwrap();
        assert!(c.push(Message::tool_result("c1", "x")).is_err());
        let call = ToolCall { id: "c1".into(), name: "t".into(), arguments: Value::Null };
        c.push(Message::assistant("", vec![call])).unwrap();
        c.push(Message::tool_result("c1", "ok")).unwrap();
        assert_eq!(
            c.push(Message::tool_result("c2", "x")),
            Err(ConversationError::OrphanToolResult("c2".into()))
        );
    }

    #[test]
    fn token_estimate() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
        assert_eq!(Message::user("").tokens, 1);
    }
}
