//! The PoC loop's shared state and its three tools: `create_pov`,
//! `verify_pov` and `trace_pov`.

use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use crate::agentcore::{FnTool, Tool, ToolOutput};
use crate::callgraph::{CallGraph, FunctionId};
use crate::fuzzing::{
    crash_matches, sp_fuzzer_background, sp_fuzzer_verify, BlobStatus, CrashRecord, ExecutionResult, Fuzzer, PoV,
    SeedOrigin, TargetRunner,
};
use crate::spstore::SuspiciousPoint;

use super::recipe::{BlobRecipe, GeneratorHook};
use super::tools::lock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PocLimits {
    pub max_attempts: u32,
    pub variants: usize,
    /// `trace_pov` unlocks once this many attempts are done.
    pub trace_unlock: u32,
    /// Background SP fuzzer iterations after each failed attempt.
    pub background_slice: u64,
    pub quorum: u32,
}

impl Default for PocLimits {
    fn default() -> Self {
        PocLimits { max_attempts: 40, variants: 3, trace_unlock: 15, background_slice: 200, quorum: crate::fuzzing::QUORUM }
    }
}

/// One `create_pov` call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PovAttempt {
    /// 1-based.
    pub index: u32,
    pub recipe: Value,
    pub blobs: Vec<Vec<u8>>,
    pub results: Vec<BlobStatus>,
    pub hint: String,
}

/// A crash the loop reproduced, with where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopCrash {
    pub pov: PoV,
    /// Attempt after which it was found.
    pub attempt: u32,
    pub from_background: bool,
    /// Whether it is the crash the point describes.
    pub on_target: bool,
}

pub struct PocSession {
    pub sp: SuspiciousPoint,
    pub limits: PocLimits,
    runner: Arc<dyn TargetRunner>,
    graph: Arc<CallGraph>,
    hook: Option<Arc<dyn GeneratorHook>>,
    pub attempts: Vec<PovAttempt>,
    pub sp_fuzzer: Fuzzer,
    pub crashes: Vec<LoopCrash>,
    pub background_iterations: u64,
}

impl PocSession {
    pub fn new(
        sp: SuspiciousPoint,
        limits: PocLimits,
        runner: Arc<dyn TargetRunner>,
        graph: Arc<CallGraph>,
        hook: Option<Arc<dyn GeneratorHook>>,
        sp_fuzzer: Fuzzer,
    ) -> Self {
        PocSession {
            sp,
            limits,
            runner,
            graph,
            hook,
            attempts: Vec::new(),
            sp_fuzzer,
            crashes: Vec::new(),
            background_iterations: 0,
        }
    }

    pub fn attempt_count(&self) -> u32 {
        self.attempts.len() as u32
    }

    /// The crash on the point's own location, if one was reproduced.
    pub fn confirmed(&self) -> Option<&LoopCrash> {
        self.crashes.iter().find(|c| c.on_target)
    }

    /// Total blobs handed to the SP fuzzer by attempts.
    pub fn attempt_blobs(&self) -> usize {
        self.attempts.iter().map(|a| a.blobs.len()).sum()
    }

    fn note_crash(&mut self, blob: &[u8], attempt: u32, from_background: bool) -> Result<bool, String> {
        match PoV::confirm(blob, self.runner.as_ref(), self.limits.quorum) {
            Ok(pov) => {
                let on_target = crash_matches(&self.sp, &pov.key());
                if !self.crashes.iter().any(|c| c.pov.key() == pov.key()) {
                    self.crashes.push(LoopCrash { pov, attempt, from_background, on_target });
                }
                Ok(on_target)
            }
            Err(r) => Err(format!("crash did not reproduce: {r:?}")),
        }
    }

    fn background(&mut self, attempt: u32) -> Option<String> {
        let found: Vec<CrashRecord> =
            sp_fuzzer_background(&mut self.sp_fuzzer, self.runner.as_ref(), self.limits.background_slice);
        self.background_iterations += self.limits.background_slice;
        let mut hit = None;
        for rec in found {
            if let Ok(true) = self.note_crash(&rec.blob, attempt, true) {
                hit = Some(format!(
                    "background SP fuzzer reproduced {} ({} bytes)",
                    rec.key,
                    rec.blob.len()
                ));
            }
        }
        hit
    }

    /// Runs one attempt. Returns the tool output.
    pub fn create_pov(&mut self, args: &Value) -> ToolOutput {
        let index = self.attempt_count() + 1;
        if index > self.limits.max_attempts {
            return ToolOutput::error(format!(
                "error: attempt limit of {} reached; create_pov refused",
                self.limits.max_attempts
            ));
        }
        let raw = args.get("recipe").cloned().unwrap_or_else(|| args.clone());
        let blobs = BlobRecipe::from_value(&raw)
            .and_then(|r| r.evaluate(self.limits.variants, self.hook.as_deref()));
        let blobs = match blobs {
            Ok(b) => b,
            Err(e) => {
                let hint = format!("recipe error: {e}");
                self.attempts.push(PovAttempt { index, recipe: raw, blobs: Vec::new(), results: Vec::new(), hint: hint.clone() });
                let bg = self.background(index);
                let text = format!("attempt {index}/{}: {hint}", self.limits.max_attempts);
                return match bg {
                    Some(b) => ToolOutput::ok(format!("{text}\n{b}")).halting(),
                    None => ToolOutput::error(text),
                };
            }
        };
        let outcome = match sp_fuzzer_verify(&blobs, self.runner.as_ref(), Some(&self.sp.function)) {
            Ok(o) => o,
            Err(e) => return ToolOutput::error(format!("error: {e}")),
        };
        for b in &blobs {
            self.sp_fuzzer.queue_seed(b.clone(), SeedOrigin::PocAttempt);
        }
        let mut text = format!("attempt {index}/{}\n", self.limits.max_attempts);
        let mut hint = outcome.hint.clone();
        let mut halt = false;
        if let Some((variant, result)) = &outcome.crash {
            let key = result.crash().expect("crashed");
            match self.note_crash(&blobs[*variant], index, false) {
                Ok(true) => {
                    let _ = writeln!(text, "variant {} crashed: {key}; reproduced {} times", variant + 1, self.limits.quorum);
                    halt = true;
                }
                Ok(false) => {
                    let _ = writeln!(
                        text,
                        "variant {} crashed as {key}, which is not the target ({} in {}); recorded separately",
                        variant + 1,
                        self.sp.vuln_type,
                        self.sp.function
                    );
                }
                Err(why) => {
                    let _ = writeln!(text, "variant {} crashed as {key} but {why}", variant + 1);
                    hint = format!("{why}\n{hint}");
                }
            }
        }
        self.attempts.push(PovAttempt { index, recipe: raw, blobs, results: outcome.results, hint: hint.clone() });
        if halt {
            return ToolOutput::ok(text).halting();
        }
        if let Some(b) = self.background(index) {
            let _ = writeln!(text, "{b}");
            return ToolOutput::ok(text).halting();
        }
        text.push_str(&hint);
        ToolOutput::ok(text)
    }

    fn pick_blob(&self, args: &Value) -> Result<(u32, usize, Vec<u8>), String> {
        let last = self.attempts.iter().rev().find(|a| !a.blobs.is_empty()).map(|a| a.index);
        let attempt = args.get("attempt").and_then(Value::as_u64).map(|a| a as u32).or(last);
        let Some(attempt) = attempt else {
            return Err("error: no attempt with blobs yet".into());
        };
        let variant = args.get("variant").and_then(Value::as_u64).unwrap_or(1) as usize;
        let a = self
            .attempts
            .iter()
            .find(|a| a.index == attempt)
            .ok_or_else(|| format!("error: no attempt {attempt}"))?;
        let blob = a
            .blobs
            .get(variant.wrapping_sub(1))
            .ok_or_else(|| format!("error: attempt {attempt} has no variant {variant}"))?;
        Ok((attempt, variant, blob.clone()))
    }

    fn execute(&self, blob: &[u8]) -> Result<ExecutionResult, String> {
        self.runner.execute(blob).map_err(|e| format!("error: {e}"))
    }

    /// Re-executes a variant of an earlier attempt. Does not count as an
    /// attempt.
    pub fn verify_pov(&self, args: &Value) -> ToolOutput {
        let (attempt, variant, blob) = match self.pick_blob(args) {
            Ok(x) => x,
            Err(e) => return ToolOutput::error(e),
        };
        match self.execute(&blob) {
            Ok(r) => {
                let status = match r.crash() {
                    Some(k) => format!("crash: {k}"),
                    None => "no crash".to_string(),
                };
                ToolOutput::ok(format!(
                    "attempt {attempt} variant {variant} ({} bytes): {status}\n{}",
                    blob.len(),
                    r.output
                ))
            }
            Err(e) => ToolOutput::error(e),
        }
    }

    /// Executed-function sequence and where it leaves the static path to
    /// the point's function.
    pub fn trace_pov(&self, args: &Value) -> ToolOutput {
        let done = self.attempt_count();
        if done < self.limits.trace_unlock {
            return ToolOutput::error(format!(
                "error: trace_pov is locked until {} attempts are done ({done} so far)",
                self.limits.trace_unlock
            ));
        }
        let (attempt, variant, blob) = match self.pick_blob(args) {
            Ok(x) => x,
            Err(e) => return ToolOutput::error(e),
        };
        let r = match self.execute(&blob) {
            Ok(r) => r,
            Err(e) => return ToolOutput::error(e),
        };
        let path = self.graph.path_to(self.runner.fuzzer(), &self.sp.function);
        let mut text = format!("attempt {attempt} variant {variant}\nexecuted:");
        for f in &r.trace {
            let _ = write!(text, " {f}");
        }
        text.push('\n');
        match path {
            None => {
                let _ = writeln!(text, "no static call path from {} to {}", self.runner.fuzzer(), self.sp.function);
            }
            Some(p) => {
                let names: Vec<&str> = p.iter().map(FunctionId::as_str).collect();
                let _ = writeln!(text, "path to target: {}", names.join(" -> "));
                let _ = writeln!(text, "{}", divergence(&p, &r.trace));
            }
        }
        ToolOutput::ok(text)
    }
}

/// Describes the first function of `path` the execution never entered.
pub fn divergence(path: &[FunctionId], trace: &[FunctionId]) -> String {
    let mut pos = 0;
    for (i, f) in path.iter().enumerate() {
        match trace[pos..].iter().position(|t| t == f) {
            Some(j) => pos += j + 1,
            None if i == 0 => return format!("diverged at entry: {f} never ran"),
            None => return format!("diverged after {}: {f} was not entered", path[i - 1]),
        }
    }
    "target reached".to_string()
}

/// The three PoC tools over one shared session.
pub fn poc_tools(session: Arc<Mutex<PocSession>>) -> Vec<Box<dyn Tool>> {
    let (a, b, c) = (session.clone(), session.clone(), session);
    vec![
        FnTool::new(
            "create_pov",
            "Run one attempt: a recipe of emit instructions evaluated into 3 variants, each executed against the target.",
            json!({"type": "object", "properties": {"recipe": {"type": "object"}}, "required": ["recipe"]}),
            move |args| lock(&a).create_pov(args),
        )
        .boxed(),
        FnTool::new(
            "verify_pov",
            "Re-run a variant of an earlier attempt and show its output.",
            json!({"type": "object", "properties": {"attempt": {"type": "integer"}, "variant": {"type": "integer"}}}),
            move |args| lock(&b).verify_pov(args),
        )
        .boxed(),
        FnTool::new(
            "trace_pov",
            "Executed functions of a variant and where they leave the path to the target. Available after 15 attempts.",
            json!({"type": "object", "properties": {"attempt": {"type": "integer"}, "variant": {"type": "integer"}}}),
            move |args| lock(&c).trace_pov(args),
        )
        .boxed(),
    ]
}
