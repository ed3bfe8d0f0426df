//! Simulated targets and the runner contract.
//!
//! A target file is JSON:
//!
//! ```json
//! {
//!   "version": 1,
//!   "name": "png_sim",
//!   "fuzzer": "png_fuzzer",
//!   "sanitizer": "address",
//!   "entry": ["png_fuzz_entry"],
//!   "rules": [
//!     { "guard": { "op": "prefix", "bytes": "hex:89504e47" },
//!       "enter": ["png_read_info"] },
//!     { "guard": { "op": "and", "of": [
//!         { "op": "length", "cmp": ">", "value": 64 },
//!         { "op": "u32-le", "offset": 8, "cmp": ">=", "value": 4096 } ] },
//!       "requires": ["png_read_info"],
//!       "enter": ["png_read_row"],
//!       "crash": { "location": "png_read_row", "vuln_type": "heap-buffer-overflow",
//!                  "sanitizer": "address" } }
//!   ]
//! }
//! ```
//!
//! Byte patterns are plain text, or hex after a `hex:` prefix. Rules run in
//! order; a rule applies when its guard holds and every function in
//! `requires` is already on the trace. The first applying rule with a crash
//! the build's sanitizer can observe ends the run.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::callgraph::FunctionId;
use crate::spstore::{Sanitizer, VulnType};

pub const TARGET_VERSION: u32 = 1;
/// Default largest accepted input.
pub const MAX_BLOB: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Cmp {
    pub fn holds(&self, lhs: u64, rhs: u64) -> bool {
        match self {
            Cmp::Lt => lhs < rhs,
            Cmp::Le => lhs <= rhs,
            Cmp::Eq => lhs == rhs,
            Cmp::Ne => lhs != rhs,
            Cmp::Gt => lhs > rhs,
            Cmp::Ge => lhs >= rhs,
        }
    }
}

/// Byte string written as text or `hex:..`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern(pub Vec<u8>);

impl Pattern {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.strip_prefix("hex:") {
            Some(h) => hex::decode(h.replace([' ', '_'], "")).map(Pattern).map_err(|e| format!("bad hex `{h}`: {e}")),
            None => Ok(Pattern(s.as_bytes().to_vec())),
        }
    }
}

impl Serialize for Pattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(&self.0) {
            Ok(t) if !t.starts_with("hex:") && t.chars().all(|c| !c.is_control()) => s.serialize_str(t),
            _ => s.serialize_str(&format!("hex:{}", hex::encode(&self.0))),
        }
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Pattern::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Predicate {
    Always,
    OffsetEquals { offset: usize, bytes: Pattern },
    Prefix { bytes: Pattern },
    Contains { bytes: Pattern },
    Length { cmp: Cmp, value: u64 },
    /// Little-endian u32 at `offset`; false when the blob is too short.
    #[serde(rename = "u32-le")]
    U32Le { offset: usize, cmp: Cmp, value: u64 },
    And { of: Vec<Predicate> },
    Or { of: Vec<Predicate> },
    Not { of: Box<Predicate> },
}

impl Predicate {
    pub fn eval(&self, blob: &[u8]) -> bool {
        match self {
            Predicate::Always => true,
            Predicate::OffsetEquals { offset, bytes } => {
                blob.get(*offset..offset.saturating_add(bytes.0.len())) == Some(&bytes.0[..])
            }
            Predicate::Prefix { bytes } => blob.starts_with(&bytes.0),
            Predicate::Contains { bytes } => {
                bytes.0.is_empty() || blob.windows(bytes.0.len()).any(|w| w == &bytes.0[..])
            }
            Predicate::Length { cmp, value } => cmp.holds(blob.len() as u64, *value),
            Predicate::U32Le { offset, cmp, value } => match blob.get(*offset..offset.saturating_add(4)) {
                Some(b) => cmp.holds(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as u64, *value),
                None => false,
            },
            Predicate::And { of } => of.iter().all(|p| p.eval(blob)),
            Predicate::Or { of } => of.iter().any(|p| p.eval(blob)),
            Predicate::Not { of } => !of.eval(blob),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashSpec {
    pub location: FunctionId,
    pub vuln_type: VulnType,
    pub sanitizer: Sanitizer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub guard: Predicate,
    #[serde(default)]
    pub requires: Vec<FunctionId>,
    #[serde(default)]
    pub enter: Vec<FunctionId>,
    #[serde(default)]
    pub crash: Option<CrashSpec>,
    /// Line printed to the output when the rule applies.
    #[serde(default)]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTarget {
    pub version: u32,
    pub name: String,
    pub fuzzer: String,
    pub sanitizer: Sanitizer,
    pub entry: Vec<FunctionId>,
    pub rules: Vec<Rule>,
}

#[derive(Debug, thiserror::Error)]
pub enum TargetError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{0}: unsupported target version {1}")]
    Version(String, u32),
    #[error("{0}: {1}")]
    Schema(String, String),
}

impl SimTarget {
    pub fn from_json(text: &str) -> Result<Self, TargetError> {
        let t: SimTarget = serde_json::from_str(text)
            .map_err(|source| TargetError::Parse { path: PathBuf::from("<inline>"), source })?;
        t.check()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TargetError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| TargetError::Io { path: path.into(), source })?;
        let t: SimTarget =
            serde_json::from_str(&text).map_err(|source| TargetError::Parse { path: path.into(), source })?;
        t.check()?;
        Ok(t)
    }

    /// Every `*.json` file of a directory, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<SimTarget>, TargetError> {
        let dir = dir.as_ref();
        let rd = std::fs::read_dir(dir).map_err(|source| TargetError::Io { path: dir.into(), source })?;
        let mut paths: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(Self::load).collect()
    }

    /// Structural checks beyond what deserialization enforces.
    pub fn check(&self) -> Result<(), TargetError> {
        let err = |m: String| Err(TargetError::Schema(self.name.clone(), m));
        if self.version != TARGET_VERSION {
            return Err(TargetError::Version(self.name.clone(), self.version));
        }
        if self.name.trim().is_empty() {
            return err("name is empty".into());
        }
        if self.entry.is_empty() {
            return err("no entry functions".into());
        }
        for (i, r) in self.rules.iter().enumerate() {
            if r.enter.is_empty() && r.crash.is_none() && r.message.is_none() {
                return err(format!("rule {i} has no effect"));
            }
        }
        Ok(())
    }

    pub fn execute(&self, blob: &[u8], limits: &Limits) -> Result<ExecutionResult, ExecError> {
        if blob.len() > limits.max_blob {
            return Err(ExecError::Oversize { len: blob.len(), max: limits.max_blob });
        }
        let sanitizer = limits.sanitizer.unwrap_or(self.sanitizer);
        let mut trace: Vec<FunctionId> = Vec::new();
        let mut coverage = BTreeSet::new();
        let mut output = String::new();
        let visit = |f: &FunctionId, trace: &mut Vec<FunctionId>, cov: &mut BTreeSet<FunctionId>| {
            trace.push(f.clone());
            cov.insert(f.clone());
        };
        for e in &self.entry {
            visit(e, &mut trace, &mut coverage);
        }
        let mut outcome = Outcome::Ok;
        for rule in &self.rules {
            if !rule.requires.iter().all(|f| coverage.contains(f)) || !rule.guard.eval(blob) {
                continue;
            }
            for f in &rule.enter {
                visit(f, &mut trace, &mut coverage);
            }
            if let Some(m) = &rule.message {
                output.push_str(m);
                output.push('\n');
            }
            if let Some(c) = &rule.crash {
                if c.sanitizer != sanitizer {
                    continue;
                }
                if !coverage.contains(&c.location) {
                    visit(&c.location, &mut trace, &mut coverage);
                }
                output.push_str(&crash_banner(c, &trace));
                outcome = Outcome::Crash {
                    location: c.location.clone(),
                    vuln_type: c.vuln_type.clone(),
                    sanitizer: c.sanitizer,
                };
                break;
            }
        }
        if outcome == Outcome::Ok {
            output.push_str(&format!("executed {} bytes, {} functions\n", blob.len(), coverage.len()));
        }
        Ok(ExecutionResult { outcome, coverage, trace, output })
    }
}

fn crash_banner(c: &CrashSpec, trace: &[FunctionId]) -> String {
    let mut s = format!("==ERROR: {} sanitizer: {} in {}\n", c.sanitizer, c.vuln_type, c.location);
    for (i, f) in trace.iter().rev().enumerate() {
        s.push_str(&format!("    #{i} {f}\n"));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_blob: usize,
    /// Overrides the target's sanitizer build.
    pub sanitizer: Option<Sanitizer>,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_blob: MAX_BLOB, sanitizer: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Outcome {
    Ok,
    Crash { location: FunctionId, vuln_type: VulnType, sanitizer: Sanitizer },
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub outcome: Outcome,
    pub coverage: BTreeSet<FunctionId>,
    pub trace: Vec<FunctionId>,
    pub output: String,
}

impl ExecutionResult {
    pub fn crash(&self) -> Option<CrashKey> {
        match &self.outcome {
            Outcome::Crash { location, vuln_type, sanitizer } => Some(CrashKey {
                location: location.clone(),
                vuln_type: vuln_type.clone(),
                sanitizer: *sanitizer,
            }),
            _ => None,
        }
    }

    pub fn crashed(&self) -> bool {
        matches!(self.outcome, Outcome::Crash { .. })
    }
}

/// Identity of a crash for deduplication.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CrashKey {
    pub location: FunctionId,
    pub vuln_type: VulnType,
    pub sanitizer: Sanitizer,
}

impl fmt::Display for CrashKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} in {} ({})", self.vuln_type, self.location, self.sanitizer)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("input of {len} bytes exceeds the {max} byte limit")]
    Oversize { len: usize, max: usize },
    #[error("runner gave different results for the same input")]
    Nondeterministic,
    #[error("runner failed: {0}")]
    Runner(String),
}

/// Anything that executes one input and reports coverage and crashes.
pub trait TargetRunner: Send + Sync {
    fn name(&self) -> &str;
    fn fuzzer(&self) -> &str;
    fn sanitizer(&self) -> Sanitizer;
    fn execute(&self, blob: &[u8]) -> Result<ExecutionResult, ExecError>;
}

#[derive(Debug, Clone)]
pub struct SimRunner {
    pub target: SimTarget,
    pub limits: Limits,
}

impl SimRunner {
    pub fn new(target: SimTarget) -> Self {
        SimRunner { target, limits: Limits::default() }
    }

    pub fn with_sanitizer(mut self, sanitizer: Sanitizer) -> Self {
        self.limits.sanitizer = Some(sanitizer);
        self
    }
}

impl TargetRunner for SimRunner {
    fn name(&self) -> &str {
        &self.target.name
    }

    fn fuzzer(&self) -> &str {
        &self.target.fuzzer
    }

    fn sanitizer(&self) -> Sanitizer {
        self.limits.sanitizer.unwrap_or(self.target.sanitizer)
    }

    fn execute(&self, blob: &[u8]) -> Result<ExecutionResult, ExecError> {
        self.target.execute(blob, &self.limits)
    }
}

/// Runs an external harness with the input on stdin.
///
/// The harness prints one `ENTER <function>` line per executed function and,
/// on a crash, one `CRASH <location> <vuln-type> <sanitizer>` line. Other
/// lines are kept as output. With `double_check` set every input runs twice
/// and differing results are reported as [`ExecError::Nondeterministic`].
#[derive(Debug, Clone)]
pub struct CommandRunner {
    pub name: String,
    pub fuzzer: String,
    pub sanitizer: Sanitizer,
    pub program: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
    pub max_blob: usize,
    pub double_check: bool,
}

impl CommandRunner {
    fn run_once(&self, blob: &[u8]) -> Result<ExecutionResult, ExecError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| ExecError::Runner(format!("{}: {e}", self.program.display())))?;
        {
            let mut stdin = child.stdin.take().expect("piped");
            // a harness may exit before reading everything
            let _ = stdin.write_all(blob);
        }
        let mut stdout = child.stdout.take().expect("piped");
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let start = Instant::now();
        let timed_out = loop {
            match child.try_wait().map_err(|e| ExecError::Runner(e.to_string()))? {
                Some(_) => break false,
                None if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break true;
                }
                None => std::thread::sleep(Duration::from_millis(2)),
            }
        };
        let text = reader.join().unwrap_or_default();
        Ok(parse_harness_output(&text, timed_out))
    }
}

pub fn parse_harness_output(text: &str, timed_out: bool) -> ExecutionResult {
    let mut trace = Vec::new();
    let mut coverage = BTreeSet::new();
    let mut outcome = if timed_out { Outcome::Timeout } else { Outcome::Ok };
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("ENTER") => {
                if let Some(f) = parts.next() {
                    trace.push(FunctionId::new(f));
                    coverage.insert(FunctionId::new(f));
                }
            }
            Some("CRASH") if !timed_out => {
                let (Some(loc), Some(vt), Some(san)) = (parts.next(), parts.next(), parts.next()) else {
                    continue;
                };
                let location = FunctionId::new(loc);
                if coverage.insert(location.clone()) {
                    trace.push(location.clone());
                }
                outcome = Outcome::Crash {
                    location,
                    vuln_type: vt.parse().unwrap_or_else(|_| VulnType::Other(vt.into())),
                    sanitizer: san.parse().unwrap_or(Sanitizer::Address),
                };
            }
            _ => {}
        }
    }
    ExecutionResult { outcome, coverage, trace, output: text.to_string() }
}

impl TargetRunner for CommandRunner {
    fn name(&self) -> &str {
        &self.name
    }

    fn fuzzer(&self) -> &str {
        &self.fuzzer
    }

    fn sanitizer(&self) -> Sanitizer {
        self.sanitizer
    }

    fn execute(&self, blob: &[u8]) -> Result<ExecutionResult, ExecError> {
        if blob.len() > self.max_blob {
            return Err(ExecError::Oversize { len: blob.len(), max: self.max_blob });
        }
        let first = self.run_once(blob)?;
        if self.double_check {
            let second = self.run_once(blob)?;
            if second.outcome != first.outcome || second.coverage != first.coverage {
                return Err(ExecError::Nondeterministic);
            }
        }
        Ok(first)
    }
}
