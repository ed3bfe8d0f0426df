//! Provider speaking the OpenAI-compatible `/chat/completions` shape with
//! tool calling.

use std::time::Duration;

use serde_json::{json, Value};

use super::message::{Message, MessageRole, ToolCall};
use super::provider::{Provider, ProviderError, ProviderRequest, ProviderResponse, TokenUsage};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "SPSCAN_API_KEY";
/// Environment variable overriding the endpoint base URL.
pub const BASE_URL_ENV: &str = "SPSCAN_BASE_URL";

pub struct HttpProvider {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Fatal(e.to_string()))?;
        Ok(HttpProvider { base_url: base_url.into().trim_end_matches('/').to_string(), api_key, client })
    }

    /// Credentials and endpoint from the environment; `default_base` is used
    /// when no base URL is set.
    pub fn from_env(default_base: &str, timeout: Duration) -> Result<Self, ProviderError> {
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| default_base.to_string());
        Self::new(base, std::env::var(API_KEY_ENV).ok(), timeout)
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }
}

fn wire_message(m: &Message) -> Value {
    match m.role {
        MessageRole::System => json!({"role": "system", "content": m.content}),
        MessageRole::User => json!({"role": "user", "content": m.content}),
        MessageRole::ToolResult => json!({
            "role": "tool",
            "tool_call_id": m.tool_call_id.clone().unwrap_or_default(),
            "content": m.content,
        }),
        MessageRole::Assistant => {
            let mut v = json!({"role": "assistant", "content": m.content});
            if !m.tool_calls.is_empty() {
                v["tool_calls"] = m
                    .tool_calls
                    .iter()
                    .map(|c| {
                        json!({
                            "id": c.id,
                            "type": "function",
                            "function": {"name": c.name, "arguments": c.arguments.to_string()},
                        })
                    })
                    .collect();
            }
            v
        }
    }
}

pub fn request_body(req: &ProviderRequest) -> Value {
    let mut body = json!({
        "model": req.model,
        "temperature": req.temperature,
        "messages": req.messages.iter().map(wire_message).collect::<Vec<_>>(),
    });
    if !req.tools.is_empty() {
        body["tools"] = req
            .tools
            .iter()
            .map(|t| {
                json!({
                    "type": "function",
                    "function": {"name": t.name, "description": t.description, "parameters": t.parameters},
                })
            })
            .collect();
    }
    body
}

pub fn parse_response(body: &Value) -> Result<ProviderResponse, ProviderError> {
    let msg = body
        .pointer("/choices/0/message")
        .ok_or_else(|| ProviderError::Fatal("response has no choices[0].message".into()))?;
    let text = msg.get("content").and_then(Value::as_str).unwrap_or_default().to_string();
    let mut tool_calls = Vec::new();
    for (i, c) in msg.get("tool_calls").and_then(Value::as_array).into_iter().flatten().enumerate() {
        let name = c
            .pointer("/function/name")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::Fatal(format!("tool call {i} has no name")))?;
        let raw = c.pointer("/function/arguments").cloned().unwrap_or(Value::Null);
        let arguments = match raw {
            Value::String(s) if s.trim().is_empty() => json!({}),
            Value::String(s) => serde_json::from_str(&s).unwrap_or(Value::String(s)),
            other => other,
        };
        let id = c.get("id").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| format!("call-{i}"));
        tool_calls.push(ToolCall { id, name: name.to_string(), arguments });
    }
    let usage = body.get("usage").map(|u| TokenUsage {
        prompt: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    });
    Ok(ProviderResponse {
        text,
        stop: tool_calls.is_empty(),
        tool_calls,
        usage,
        served_by: body.get("model").and_then(Value::as_str).unwrap_or_default().to_string(),
    })
}

pub fn classify_status(status: u16, body: &str) -> ProviderError {
    let msg = format!("HTTP {status}: {}", body.chars().take(200).collect::<String>());
    match status {
        429 => ProviderError::RateLimit(msg),
        408 | 504 => ProviderError::Timeout(msg),
        500..=599 => ProviderError::Unavailable(msg),
        _ => ProviderError::Fatal(msg),
    }
}

impl Provider for HttpProvider {
    fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        let mut rb = self.client.post(self.endpoint()).json(&request_body(request));
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout(e.to_string())
            } else {
                ProviderError::Unavailable(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, &text));
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| ProviderError::Fatal(e.to_string()))?;
        parse_response(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agentcore::provider::ToolSchema;
    use crate::agentcore::spec::AgentRole;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn serve_once(status: &str, body: &str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let reply = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        let h = std::thread::spawn(move || {
            let (mut sock, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(sock.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            sock.write_all(reply.as_bytes()).unwrap();
            String::from_utf8(buf).unwrap()
        });
        (format!("http://{addr}"), h)
    }

    fn request() -> ProviderRequest {
        let mut r = ProviderRequest::new(
            AgentRole::SpGenerator,
            "s",
            vec![Message::system("sys"), Message::user("hi")],
            vec![ToolSchema { name: "get_callers".into(), description: "d".into(), parameters: json!({"type": "object"}) }],
        );
        r.model = "main-a".into();
        r
    }

    #[test]
    fn round_trip_with_tool_call() {
        let body = r#"{"model":"main-a","choices":[{"message":{"content":"","tool_calls":[
            {"id":"x1","type":"function","function":{"name":"get_callers","arguments":"{\"function\":\"f\"}"}}]}}],
            "usage":{"prompt_tokens":12,"completion_tokens":5}}"#;
        let (url, h) = serve_once("200 OK", body);
        let p = HttpProvider::new(url, Some("k".into()), Duration::from_secs(5)).unwrap();
        let resp = p.complete(&request()).unwrap();
        assert_eq!(resp.tool_calls[0].name, "get_callers");
        assert_eq!(resp.tool_calls[0].arguments, json!({"function": "f"}));
        assert_eq!(resp.usage, Some(TokenUsage { prompt: 12, completion: 5 }));
        assert!(!resp.stop);
        let sent: Value = serde_json::from_str(&h.join().unwrap()).unwrap();
        assert_eq!(sent["temperature"], json!(0.1));
        assert_eq!(sent["tools"][0]["function"]["name"], "get_callers");
    }

    #[test]
    fn rate_limit_is_retryable() {
        let (url, h) = serve_once("429 Too Many Requests", "{}");
        let p = HttpProvider::new(url, None, Duration::from_secs(5)).unwrap();
        assert!(matches!(p.complete(&request()), Err(ProviderError::RateLimit(_))));
        h.join().unwrap();
    }

    #[test]
    fn status_classes() {
        assert!(matches!(classify_status(503, ""), ProviderError::Unavailable(_)));
        assert!(matches!(classify_status(504, ""), ProviderError::Timeout(_)));
        assert!(matches!(classify_status(400, ""), ProviderError::Fatal(_)));
    }

    #[test]
    fn connection_refused_is_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let p = HttpProvider::new(format!("http://{addr}"), None, Duration::from_secs(2)).unwrap();
        assert!(p.complete(&request()).unwrap_err().is_retryable());
    }
}
