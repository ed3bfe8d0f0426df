//! System prompt templates, one per agent role. Placeholders are written as
//! `{name}`; unknown or missing placeholders are left as-is.

use std::collections::BTreeMap;

use super::spec::AgentRole;

pub const PROMPT_VERSION: u32 = 1;

pub fn template(role: AgentRole) -> &'static str {
    match role {
        AgentRole::DirectionGenerator => {
            "You plan the analysis of code reachable from fuzzer {fuzzer} (sanitizer {sanitizer}).\n\
             Group the reachable functions into at most 5 business features. For each one call \
             create_direction with a name, its entry functions, its core functions, a risk level \
             (high, medium or low) and a short reason. Use the code query tools to read sources \
             before deciding. Stop when every risky area belongs to a direction."
        }
        AgentRole::SpGenerator => {
            "You audit one function at a time for memory-safety and undefined-behaviour bugs that \
             sanitizer {sanitizer} can observe when driven by fuzzer {fuzzer}.\n\
             Function under review: {function}\n{context}\n\
             For each plausible bug call create_suspicious_point. Describe the location with \
             control-flow landmarks (the branch, loop or call involved), never with line numbers. \
             Give a score between 0 and 1 and do not report anything below 0.3."
        }
        AgentRole::SpDeduplicator => {
            "Two suspicious points are given. Answer `duplicate` if they describe the same defect \
             at the same place, otherwise answer `distinct`."
        }
        AgentRole::SpVerifier => {
            "You check a suspicious point in {function} for fuzzer {fuzzer} and sanitizer \
             {sanitizer}.\n{context}\n\
             Establish whether the input can reach the location, including through function \
             pointers and callbacks the static graph misses. Look for checks that already prevent \
             the fault. If the bug type cannot be observed by {sanitizer}, the verdict is fp. \
             Mark fp only when you are certain; if the description is inaccurate, correct it. \
             Finish with update_suspicious_point carrying verdict, score and PoC guidance."
        }
        AgentRole::PocGenerator => {
            "You build an input that makes fuzzer {fuzzer} crash in {function} under sanitizer \
             {sanitizer}.\n{context}\n\
             Each create_pov call takes a recipe of emit instructions and produces 3 variants that \
             are executed right away. Read the execution output after a failure and adjust. You \
             have at most 40 attempts. trace_pov becomes available after 15 attempts and shows \
             where execution diverges from the path to the target."
        }
        AgentRole::Report => {
            "Summarise a reproduced crash in {function} ({sanitizer}, fuzzer {fuzzer}). Refine the \
             suspicious point description using the crash trace.\n{context}"
        }
        AgentRole::SeedGenerator => {
            "Produce starting inputs for fuzzer {fuzzer} that exercise {function}.\n{context}\n\
             Call create_seed once per input."
        }
        AgentRole::ContextCompressor => {
            "Condense the following agent transcript. Keep function names, tool findings and open \
             questions. Drop repeated source listings."
        }
    }
}

pub fn render(text: &str, vars: &BTreeMap<String, String>) -> String {
    let mut out = text.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

pub fn render_system(role: AgentRole, vars: &BTreeMap<String, String>) -> String {
    render(template(role), vars)
}
