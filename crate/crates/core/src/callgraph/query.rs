use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde_json::Value;

use super::{CallGraph, FunctionId, FunctionRecord};

/// Code queries exposed to agents as tools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    FunctionSource { function: String },
    Callers { function: String },
    Callees { function: String },
    ReachableFunctions { fuzzer: String },
    UnreachedFunctions { fuzzer: String },
    SearchCode { pattern: String, regex: bool },
    FileContent { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryStatus {
    Ok,
    NotFound,
    InvalidArgs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    pub status: QueryStatus,
    pub text: String,
}

impl QueryResult {
    fn ok(text: String) -> Self {
        QueryResult { status: QueryStatus::Ok, text }
    }

    fn not_found(text: String) -> Self {
        QueryResult { status: QueryStatus::NotFound, text }
    }

    fn invalid(text: String) -> Self {
        QueryResult { status: QueryStatus::InvalidArgs, text }
    }

    pub fn is_ok(&self) -> bool {
        self.status == QueryStatus::Ok
    }
}

impl Query {
    pub const TOOL_NAMES: [&'static str; 7] = [
        "get_function_source",
        "get_callers",
        "get_callees",
        "get_reachable_functions",
        "get_unreached_functions",
        "search_code",
        "get_file_content",
    ];

    pub fn tool_name(&self) -> &'static str {
        match self {
            Query::FunctionSource { .. } => "get_function_source",
            Query::Callers { .. } => "get_callers",
            Query::Callees { .. } => "get_callees",
            Query::ReachableFunctions { .. } => "get_reachable_functions",
            Query::UnreachedFunctions { .. } => "get_unreached_functions",
            Query::SearchCode { .. } => "search_code",
            Query::FileContent { .. } => "get_file_content",
        }
    }

    /// Builds a query from a tool call. `default_fuzzer` fills in the fuzzer
    /// argument when the caller omits it.
    pub fn from_tool_call(name: &str, args: &Value, default_fuzzer: &str) -> Result<Query, String> {
        let s = |key: &str| -> Result<String, String> {
            args.get(key)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| format!("{name}: missing string argument `{key}`"))
        };
        let fuzzer = || {
            args.get("fuzzer")
                .and_then(Value::as_str)
                .unwrap_or(default_fuzzer)
                .to_string()
        };
        Ok(match name {
            "get_function_source" => Query::FunctionSource { function: s("function")? },
            "get_callers" => Query::Callers { function: s("function")? },
            "get_callees" => Query::Callees { function: s("function")? },
            "get_reachable_functions" => Query::ReachableFunctions { fuzzer: fuzzer() },
            "get_unreached_functions" => Query::UnreachedFunctions { fuzzer: fuzzer() },
            "search_code" => Query::SearchCode {
                pattern: s("pattern")?,
                regex: args.get("regex").and_then(Value::as_bool).unwrap_or(false),
            },
            "get_file_content" => Query::FileContent { path: s("path")? },
            other => return Err(format!("unknown code query `{other}`")),
        })
    }
}

fn lookup<'g>(graph: &'g CallGraph, key: &str) -> Result<&'g FunctionRecord, QueryResult> {
    graph.resolve(key).map_err(|candidates| {
        if candidates.is_empty() {
            QueryResult::not_found(format!("function `{key}` not found"))
        } else {
            let ids: Vec<&str> = candidates.iter().map(FunctionId::as_str).collect();
            QueryResult::not_found(format!(
                "function name `{key}` is ambiguous; use one of: {}",
                ids.join(", ")
            ))
        }
    })
}

fn describe(f: &FunctionRecord) -> String {
    if f.external {
        format!("{} [external]", f.id)
    } else {
        format!("{} ({})", f.id, f.file_path)
    }
}

pub(super) fn run(graph: &CallGraph, query: &Query) -> QueryResult {
    match query {
        Query::FunctionSource { function } => match lookup(graph, function) {
            Err(r) => r,
            Ok(f) if f.external => {
                QueryResult::ok(format!("// {} is external; source unavailable\n", f.id))
            }
            Ok(f) => QueryResult::ok(format!("// {} ({})\n{}\n", f.id, f.file_path, f.source_text)),
        },
        Query::Callers { function } => match lookup(graph, function) {
            Err(r) => r,
            Ok(f) => {
                let lines: Vec<String> = graph
                    .callers_of(&f.id)
                    .filter_map(|c| graph.function(c))
                    .map(describe)
                    .collect();
                QueryResult::ok(list_text(&format!("callers of {}", f.id), &lines))
            }
        },
        Query::Callees { function } => match lookup(graph, function) {
            Err(r) => r,
            Ok(f) => {
                let lines: Vec<String> = f
                    .callees
                    .iter()
                    .filter_map(|c| graph.function(c))
                    .map(describe)
                    .collect();
                QueryResult::ok(list_text(&format!("callees of {}", f.id), &lines))
            }
        },
        Query::ReachableFunctions { fuzzer } => {
            if !graph.has_fuzzer(fuzzer) {
                return QueryResult::not_found(format!("fuzzer `{fuzzer}` not found"));
            }
            let mut reach: Vec<(&FunctionRecord, Option<u32>)> = graph
                .functions()
                .filter(|f| f.reached_by_fuzzers.contains(fuzzer))
                .map(|f| (f, f.call_depth.get(fuzzer).copied()))
                .collect();
            reach.sort_by(|a, b| {
                a.1.unwrap_or(u32::MAX)
                    .cmp(&b.1.unwrap_or(u32::MAX))
                    .then_with(|| a.0.id.cmp(&b.0.id))
            });
            let lines: Vec<String> = reach
                .iter()
                .map(|(f, d)| match d {
                    Some(d) => format!("{} depth={d}", describe(f)),
                    None => format!("{} depth=?", describe(f)),
                })
                .collect();
            QueryResult::ok(list_text(&format!("functions reachable by {fuzzer}"), &lines))
        }
        Query::UnreachedFunctions { fuzzer } => {
            if !graph.has_fuzzer(fuzzer) {
                return QueryResult::not_found(format!("fuzzer `{fuzzer}` not found"));
            }
            let lines: Vec<String> = graph
                .functions()
                .filter(|f| !f.external && !f.reached_by_fuzzers.contains(fuzzer))
                .map(describe)
                .collect();
            QueryResult::ok(list_text(&format!("functions not reachable by {fuzzer}"), &lines))
        }
        Query::SearchCode { pattern, regex } => {
            let matcher: Box<dyn Fn(&str) -> bool> = if *regex {
                match regex::Regex::new(pattern) {
                    Ok(re) => Box::new(move |s: &str| re.is_match(s)),
                    Err(e) => return QueryResult::invalid(format!("invalid regex: {e}")),
                }
            } else {
                if pattern.is_empty() {
                    return QueryResult::invalid("empty search pattern".into());
                }
                let p = pattern.clone();
                Box::new(move |s: &str| s.contains(p.as_str()))
            };
            let hits: BTreeSet<String> = graph
                .functions()
                .filter(|f| !f.external && matcher(&f.source_text))
                .map(|f| format!("{}:{}", f.file_path, f.id))
                .collect();
            let lines: Vec<String> = hits.into_iter().collect();
            QueryResult::ok(list_text(&format!("matches for `{pattern}`"), &lines))
        }
        Query::FileContent { path } => {
            let in_file: Vec<&FunctionRecord> = graph
                .functions()
                .filter(|f| !f.external && (f.file_path == *path || f.file_path.ends_with(&format!("/{path}"))))
                .collect();
            if in_file.is_empty() {
                return QueryResult::not_found(format!("file `{path}` not found"));
            }
            let mut out = String::new();
            let _ = writeln!(out, "// file {path}");
            for f in in_file {
                let _ = write!(out, "\n{}\n", f.source_text);
            }
            QueryResult::ok(out)
        }
    }
}

fn list_text(header: &str, lines: &[String]) -> String {
    let mut out = format!("{header} ({}):\n", lines.len());
    for l in lines {
        out.push_str("  ");
        out.push_str(l);
        out.push('\n');
    }
    out
}
