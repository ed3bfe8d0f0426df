use super::message::{Conversation, Message, MessageRole};
use super::provider::{call_with_fallback, ModelChain, Provider, ProviderRequest};
use super::spec::{AgentRole, Tier};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CompressError {
    #[error("budget of {budget} tokens cannot hold the system message and last exchange ({needed})")]
    BudgetTooSmall { budget: usize, needed: usize },
}

/// Produces a summary block for messages dropped by compression.
pub trait Summarizer {
    fn summarize(&self, messages: &[Message]) -> Option<String>;
}

/// Summaries from a utility-tier model.
pub struct AgentSummarizer<'a> {
    pub provider: &'a dyn Provider,
    pub chain: ModelChain,
}

impl Summarizer for AgentSummarizer<'_> {
    fn summarize(&self, messages: &[Message]) -> Option<String> {
        if self.chain.tier() != Tier::T3 {
            return None;
        }
        let mut transcript = String::new();
        for m in messages {
            transcript.push_str(&format!("[{:?}] {}\n", m.role, m.content));
        }
        let req = ProviderRequest::new(
            AgentRole::ContextCompressor,
            "compress",
            vec![
                Message::system(super::prompts::render_system(AgentRole::ContextCompressor, &Default::default())),
                Message::user(transcript),
            ],
            Vec::new(),
        );
        let (resp, _) = call_with_fallback(self.provider, &self.chain, &req).ok()?;
        (!resp.text.trim().is_empty()).then_some(resp.text)
    }
}

/// One line per dropped message: index, role and a short prefix.
pub fn truncation_index(messages: &[Message], first_index: usize) -> String {
    let mut out = format!("[earlier context: {} messages condensed]\n", messages.len());
    for (i, m) in messages.iter().enumerate() {
        let role = match m.role {
            MessageRole::System => "system",
            MessageRole::User => "user",
            MessageRole::Assistant => "assistant",
            MessageRole::ToolResult => "tool",
        };
        let mut head: String = m.content.chars().take(80).collect();
        head = head.replace('\n', " ");
        let calls: Vec<&str> = m.tool_calls.iter().map(|c| c.name.as_str()).collect();
        if calls.is_empty() {
            out.push_str(&format!("#{} {role}: {head}\n", first_index + i));
        } else {
            out.push_str(&format!("#{} {role} -> {}: {head}\n", first_index + i, calls.join(",")));
        }
    }
    out
}

fn clip_to_tokens(text: &str, tokens: usize) -> String {
    let max_bytes = tokens * 4;
    if text.len() <= max_bytes {
        return text.to_string();
    }
    let mut end = max_bytes;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    text[..end].to_string()
}

/// Shrinks a conversation to `budget` estimated tokens. The leading system
/// message and everything from the last assistant message onward are kept
/// verbatim; what lies between becomes a single summary message.
pub fn compress_context(
    conversation: &Conversation,
    budget: usize,
    summarizer: Option<&dyn Summarizer>,
) -> Result<Conversation, CompressError> {
    if conversation.total_tokens() <= budget {
        return Ok(conversation.clone());
    }
    let msgs = conversation.messages();
    let head = usize::from(msgs.first().is_some_and(|m| m.role == MessageRole::System));
    let tail_start = msgs
        .iter()
        .rposition(|m| m.role == MessageRole::Assistant)
        .unwrap_or(msgs.len().saturating_sub(1))
        .max(head);
    let kept: usize = msgs[..head].iter().chain(&msgs[tail_start..]).map(|m| m.tokens).sum();
    if kept > budget {
        return Err(CompressError::BudgetTooSmall { budget, needed: kept });
    }
    let middle = &msgs[head..tail_start];
    let room = budget - kept;
    let mut out = msgs[..head].to_vec();
    if !middle.is_empty() && room > 0 {
        let text = summarizer
            .and_then(|s| s.summarize(middle))
            .unwrap_or_else(|| truncation_index(middle, head));
        out.push(Message::user(clip_to_tokens(&text, room)));
    }
    out.extend(msgs[tail_start..].iter().cloned());
    Ok(Conversation::from_messages(out).expect("tail keeps tool results behind their requester"))
}
