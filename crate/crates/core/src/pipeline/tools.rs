//! Agent-facing tools for the pipeline stages other than PoC generation.

use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use crate::agentcore::{FnTool, Tool, ToolOutput};
use crate::callgraph::{CallGraph, FunctionId, Query};
use crate::directions::{Direction, Registration, RiskLevel, Scheduler};
use crate::spstore::{
    DedupOutcome, DuplicateJudge, SharedSpStore, SpCandidate, SpId, SpSource, Verdict, Verification, VulnType,
};

pub(crate) fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn str_arg<'a>(args: &'a Value, key: &str) -> Result<&'a str, String> {
    args.get(key).and_then(Value::as_str).ok_or_else(|| format!("error: missing string argument `{key}`"))
}

fn string_list(args: &Value, key: &str) -> Vec<String> {
    match args.get(key) {
        Some(Value::Array(xs)) => xs.iter().filter_map(Value::as_str).map(str::to_string).collect(),
        Some(Value::String(s)) => s.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        _ => Vec::new(),
    }
}

fn query_parameters(name: &str) -> Value {
    match name {
        "get_function_source" | "get_callers" | "get_callees" => {
            json!({"type": "object", "properties": {"function": {"type": "string"}}, "required": ["function"]})
        }
        "get_reachable_functions" | "get_unreached_functions" => {
            json!({"type": "object", "properties": {"fuzzer": {"type": "string"}}})
        }
        "search_code" => json!({"type": "object",
            "properties": {"pattern": {"type": "string"}, "regex": {"type": "boolean"}},
            "required": ["pattern"]}),
        _ => json!({"type": "object", "properties": {"path": {"type": "string"}}, "required": ["path"]}),
    }
}

fn query_description(name: &str) -> &'static str {
    match name {
        "get_function_source" => "Source text of a function.",
        "get_callers" => "Functions that call the given function.",
        "get_callees" => "Functions called by the given function.",
        "get_reachable_functions" => "Functions reachable from a fuzzer, shallowest first.",
        "get_unreached_functions" => "Functions a fuzzer cannot reach.",
        "search_code" => "Functions whose source matches a substring or regex.",
        _ => "Every function defined in a file.",
    }
}

/// The seven code-query tools over `graph`, defaulting to `fuzzer`.
pub fn query_tools(graph: &Arc<CallGraph>, fuzzer: &str) -> Vec<Box<dyn Tool>> {
    Query::TOOL_NAMES
        .iter()
        .map(|&name| {
            let g = graph.clone();
            let fz = fuzzer.to_string();
            FnTool::new(name, query_description(name), query_parameters(name), move |args| {
                match Query::from_tool_call(name, args, &fz) {
                    Ok(q) => {
                        let r = g.query(&q);
                        if r.is_ok() {
                            ToolOutput::ok(r.text)
                        } else {
                            ToolOutput::error(format!("error: {}", r.text))
                        }
                    }
                    Err(e) => ToolOutput::error(format!("error: {e}")),
                }
            })
            .boxed()
        })
        .collect()
}

/// `create_direction`: registers a direction with the worker's scheduler.
pub fn direction_tool(scheduler: Arc<Mutex<Scheduler>>) -> Box<dyn Tool> {
    FnTool::new(
        "create_direction",
        "Register a business feature to analyze: name, entry_functions, core_functions, risk_level, risk_reason.",
        json!({"type": "object", "properties": {
            "name": {"type": "string"},
            "entry_functions": {"type": "array", "items": {"type": "string"}},
            "core_functions": {"type": "array", "items": {"type": "string"}},
            "risk_level": {"type": "string", "enum": ["high", "medium", "low"]},
            "risk_reason": {"type": "string"}},
            "required": ["name", "entry_functions", "risk_level"]}),
        move |args| {
            let name = match str_arg(args, "name") {
                Ok(n) => n.to_string(),
                Err(e) => return ToolOutput::error(e),
            };
            let risk_level = match args.get("risk_level").and_then(Value::as_str).map(RiskLevel::from_str) {
                Some(Ok(r)) => r,
                Some(Err(e)) => return ToolOutput::error(format!("error: {e}")),
                None => RiskLevel::Medium,
            };
            let direction = Direction {
                name,
                entry_functions: string_list(args, "entry_functions"),
                core_functions: string_list(args, "core_functions"),
                risk_level,
                risk_reason: args.get("risk_reason").and_then(Value::as_str).unwrap_or_default().to_string(),
            };
            let label = direction.name.clone();
            match lock(&scheduler).register_direction(direction) {
                Registration::Accepted { warnings } if warnings.is_empty() => {
                    ToolOutput::ok(format!("direction `{label}` registered"))
                }
                Registration::Accepted { warnings } => {
                    ToolOutput::ok(format!("direction `{label}` registered with warnings:\n{}", warnings.join("\n")))
                }
                Registration::Rejected(why) => ToolOutput::error(format!("error: {why}")),
            }
        },
    )
    .boxed()
}

/// What `create_suspicious_point` needs to file candidates.
#[derive(Clone)]
pub struct SpSink {
    pub store: SharedSpStore,
    pub graph: Arc<CallGraph>,
    pub source: SpSource,
    pub default_function: FunctionId,
    pub importance: u8,
    pub task_id: String,
    pub judge: Arc<dyn DuplicateJudge + Send + Sync>,
    /// Outcome of every accepted submission, in order.
    pub accepted: Arc<Mutex<Vec<DedupOutcome>>>,
}

pub fn create_sp_tool(sink: SpSink) -> Box<dyn Tool> {
    FnTool::new(
        "create_suspicious_point",
        "Record a suspected bug: description (control-flow landmarks, no line numbers), vuln_type, score in [0,1]; function defaults to the one under review.",
        json!({"type": "object", "properties": {
            "function": {"type": "string"},
            "description": {"type": "string"},
            "vuln_type": {"type": "string"},
            "score": {"type": "number"}},
            "required": ["description", "vuln_type", "score"]}),
        move |args| {
            let function = match args.get("function").and_then(Value::as_str) {
                None => sink.default_function.clone(),
                Some(name) => match sink.graph.resolve(name) {
                    Ok(f) => f.id.clone(),
                    Err(_) => return ToolOutput::error(format!("error: unknown function `{name}`")),
                },
            };
            let description = match str_arg(args, "description") {
                Ok(d) => d,
                Err(e) => return ToolOutput::error(e),
            };
            let vuln_type = match str_arg(args, "vuln_type") {
                Ok(v) => VulnType::from_str(v).unwrap_or_else(|_| VulnType::Other(v.to_string())),
                Err(e) => return ToolOutput::error(e),
            };
            let Some(score) = args.get("score").and_then(Value::as_f64) else {
                return ToolOutput::error("error: missing numeric argument `score`");
            };
            let candidate = match SpCandidate::new(function, sink.source.clone(), description, vuln_type, score) {
                Ok(c) => c.with_importance(sink.importance).with_origin(sink.task_id.clone()),
                Err(e) => return ToolOutput::error(format!("error: {e}")),
            };
            let outcome = sink.store.lock().submit(&sink.graph, candidate, sink.judge.as_ref());
            match outcome {
                Ok(o) => {
                    let text = match &o {
                        DedupOutcome::Inserted(id) => format!("created {id}"),
                        DedupOutcome::MergedInto(id) => format!("duplicate of {id}; merged"),
                    };
                    lock(&sink.accepted).push(o);
                    ToolOutput::ok(text)
                }
                Err(e) => ToolOutput::error(format!("error: {e}")),
            }
        },
    )
    .boxed()
}

/// `update_suspicious_point`: records the verifier's decision for the
/// pipeline to apply. Ends the verifier run.
pub fn update_sp_tool(sp: SpId, slot: Arc<Mutex<Option<Verification>>>) -> Box<dyn Tool> {
    FnTool::new(
        "update_suspicious_point",
        "Record the verdict (tp or fp), optionally a corrected description, a new score and PoC guidance.",
        json!({"type": "object", "properties": {
            "verdict": {"type": "string", "enum": ["tp", "fp"]},
            "description": {"type": "string"},
            "score": {"type": "number"},
            "poc_guidance": {"type": "string"}},
            "required": ["verdict"]}),
        move |args| {
            let verdict = match args.get("verdict").and_then(Value::as_str) {
                Some("tp") => Verdict::Tp,
                Some("fp") => Verdict::Fp,
                other => return ToolOutput::error(format!("error: verdict must be tp or fp, got {other:?}")),
            };
            let mut v = Verification { verdict: Some(verdict), ..Default::default() };
            if let Some(d) = args.get("description").and_then(Value::as_str) {
                if let Err(e) = crate::spstore::validate_description(d) {
                    return ToolOutput::error(format!("error: {e}"));
                }
                v.corrected_description = Some(d.to_string());
            }
            if let Some(s) = args.get("score").and_then(Value::as_f64) {
                if !(0.0..=1.0).contains(&s) {
                    return ToolOutput::error(format!("error: score {s} outside [0, 1]"));
                }
                v.new_score = Some(s);
            }
            v.poc_guidance = args.get("poc_guidance").and_then(Value::as_str).map(str::to_string);
            *lock(&slot) = Some(v);
            ToolOutput::ok(format!("{sp} marked {}", if verdict == Verdict::Tp { "tp" } else { "fp" })).halting()
        },
    )
    .boxed()
}

/// Parses `{"hex": ".."}` or `{"text": ".."}` into bytes.
pub fn blob_arg(args: &Value) -> Result<Vec<u8>, String> {
    if let Some(h) = args.get("hex").and_then(Value::as_str) {
        return hex::decode(h.replace([' ', '\n'], "")).map_err(|e| format!("error: bad hex: {e}"));
    }
    if let Some(t) = args.get("text").and_then(Value::as_str) {
        return Ok(t.as_bytes().to_vec());
    }
    Err("error: give the input as `hex` or `text`".into())
}

/// `create_seed`: collects one fuzzer seed per call.
pub fn seed_tool(sink: Arc<Mutex<Vec<Vec<u8>>>>) -> Box<dyn Tool> {
    FnTool::new(
        "create_seed",
        "Add one starting input for the fuzzer, as hex or text.",
        json!({"type": "object", "properties": {"hex": {"type": "string"}, "text": {"type": "string"}}}),
        move |args| match blob_arg(args) {
            Ok(b) if b.len() > crate::fuzzing::MAX_BLOB => ToolOutput::error("error: seed too large"),
            Ok(b) => {
                let n = b.len();
                lock(&sink).push(b);
                ToolOutput::ok(format!("seed of {n} bytes added"))
            }
            Err(e) => ToolOutput::error(e),
        },
    )
    .boxed()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directions::AnalyzedSet;
    use crate::spstore::{JaccardJudge, Sanitizer};

    fn graph() -> Arc<CallGraph> {
        Arc::new(
            CallGraph::builder()
                .function("main", &["parse"])
                .function("parse", &[])
                .entry("fz", "main")
                .build()
                .unwrap(),
        )
    }

    #[test]
    fn query_tools_answer_and_report_errors() {
        let mut tools = query_tools(&graph(), "fz");
        assert_eq!(tools.len(), 7);
        let callers = tools.iter_mut().find(|t| t.schema().name == "get_callers").unwrap();
        let out = callers.call(&json!({"function": "parse"}));
        assert!(!out.is_error && out.text.contains("main"));
        assert!(callers.call(&json!({"function": "nope"})).is_error);
        assert!(callers.call(&json!({})).is_error);
    }

    #[test]
    fn direction_tool_rejects_sixth() {
        let s = Arc::new(Mutex::new(Scheduler::new("fz", graph(), AnalyzedSet::new())));
        let mut t = direction_tool(s.clone());
        for i in 0..5 {
            let out = t.call(&json!({"name": format!("d{i}"), "entry_functions": ["main"], "risk_level": "high"}));
            assert!(!out.is_error, "{}", out.text);
        }
        assert!(t.call(&json!({"name": "d5", "entry_functions": ["main"], "risk_level": "low"})).is_error);
        assert!(t.call(&json!({"name": "x", "risk_level": "extreme"})).is_error);
    }

    #[test]
    fn create_sp_validates_and_dedups() {
        let store = SharedSpStore::new();
        let accepted = Arc::new(Mutex::new(Vec::new()));
        let mut t = create_sp_tool(SpSink {
            store: store.clone(),
            graph: graph(),
            source: SpSource::new("fz", Sanitizer::Address),
            default_function: FunctionId::new("parse"),
            importance: 2,
            task_id: "fz-address".into(),
            judge: Arc::new(JaccardJudge::default()),
            accepted: accepted.clone(),
        });
        let args = json!({"description": "length field copied into a fixed buffer before the size check", "vuln_type": "stack-buffer-overflow", "score": 0.8});
        assert_eq!(t.call(&args).text, "created sp-000001");
        assert!(t.call(&args).text.starts_with("duplicate of sp-000001"));
        assert!(t.call(&json!({"description": "bug on line 12", "vuln_type": "stack-buffer-overflow", "score": 0.8})).is_error);
        assert!(t.call(&json!({"description": "weak", "vuln_type": "use-after-free", "score": 0.1})).is_error);
        assert_eq!(accepted.lock().unwrap().len(), 2);
        let sp = store.get(&SpId::new("sp-000001")).unwrap();
        assert_eq!((sp.importance, sp.origin_task.as_deref()), (2, Some("fz-address")));
    }

    #[test]
    fn update_tool_records_and_halts() {
        let slot = Arc::new(Mutex::new(None));
        let mut t = update_sp_tool(SpId::new("sp-000001"), slot.clone());
        assert!(t.call(&json!({"verdict": "maybe"})).is_error);
        let out = t.call(&json!({"verdict": "tp", "description": "the copy after the header check overflows", "poc_guidance": "large length"}));
        assert!(out.halt);
        let v = slot.lock().unwrap().clone().unwrap();
        assert_eq!(v.verdict, Some(Verdict::Tp));
        assert_eq!(v.poc_guidance.as_deref(), Some("large length"));
    }

    #[test]
    fn seed_tool_collects_blobs() {
        let sink = Arc::new(Mutex::new(Vec::new()));
        let mut t = seed_tool(sink.clone());
        t.call(&json!({"hex": "7f45"}));
        t.call(&json!({"text": "GIF89a"}));
        assert!(t.call(&json!({})).is_error);
        assert_eq!(*sink.lock().unwrap(), vec![vec![0x7f, 0x45], b"GIF89a".to_vec()]);
    }
}
