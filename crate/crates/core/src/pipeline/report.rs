use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::callgraph::{CallGraph, FunctionId};
use crate::fuzzing::{CrashKey, PoV, QUORUM};
use crate::spstore::{Sanitizer, SpId, SuspiciousPoint, VulnType};

/// Which fuzzer layer produced the crashing input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DiscoveryMethod {
    /// Background Global Fuzzer.
    #[serde(rename = "G")]
    Global,
    /// The per-point PoC loop, including its background SP fuzzer.
    #[serde(rename = "S")]
    SpFuzzer,
}

impl DiscoveryMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            DiscoveryMethod::Global => "G",
            DiscoveryMethod::SpFuzzer => "S",
        }
    }
}

impl fmt::Display for DiscoveryMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Logical stage stamps copied from the point, plus the report's own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTimestamps {
    pub created: u64,
    pub verified: Option<u64>,
    pub poc: Option<u64>,
    pub reported: u64,
}

/// The structured record. Field names are part of the output format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub sp_id: SpId,
    pub function: FunctionId,
    pub file: String,
    pub vuln_type: VulnType,
    pub sanitizer: Sanitizer,
    pub fuzzer: String,
    pub discovery_method: DiscoveryMethod,
    pub description: String,
    pub poc_blob_path: String,
    pub reproduced_count: u32,
    pub attempts: u32,
    pub timestamps: ReportTimestamps,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnReport {
    pub id: String,
    pub pov_id: String,
    #[serde(flatten)]
    pub record: ReportRecord,
    /// Sanitizer banner and frames, innermost first.
    pub crash_trace: Vec<String>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("PoV {pov} reproduced {runs} times; {QUORUM} required")]
    Unreproduced { pov: String, runs: u32 },
    #[error("PoV {pov} crashes in {location}, not in {function}")]
    LocationMismatch { pov: String, location: FunctionId, function: FunctionId },
}

pub fn report_id(key: &CrashKey) -> String {
    let digest = Sha256::digest(key.to_string().as_bytes());
    format!("vr-{}", &hex::encode(digest)[..12])
}

pub fn pov_blob_path(pov: &PoV) -> String {
    format!("povs/{}.bin", pov.id)
}

/// Everything [`make_report`] needs besides the point and PoV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportInput {
    pub method: DiscoveryMethod,
    pub attempts: u32,
    pub description: String,
    pub crash_output: String,
    pub reported_stage: u64,
}

/// Builds a report for a reproduced PoV. Refuses PoVs below quorum.
pub fn make_report(
    sp: &SuspiciousPoint,
    pov: &PoV,
    graph: &CallGraph,
    input: ReportInput,
) -> Result<VulnReport, ReportError> {
    if pov.reproduced_count < QUORUM {
        return Err(ReportError::Unreproduced { pov: pov.id.clone(), runs: pov.reproduced_count });
    }
    if pov.location != sp.function {
        return Err(ReportError::LocationMismatch {
            pov: pov.id.clone(),
            location: pov.location.clone(),
            function: sp.function.clone(),
        });
    }
    let file = graph.function(&sp.function).map(|f| f.file_path.clone()).unwrap_or_default();
    let crash_trace = input
        .crash_output
        .lines()
        .skip_while(|l| !l.starts_with("==ERROR"))
        .map(|l| l.trim_end().to_string())
        .collect();
    Ok(VulnReport {
        id: report_id(&pov.key()),
        pov_id: pov.id.clone(),
        record: ReportRecord {
            sp_id: sp.id.clone(),
            function: sp.function.clone(),
            file,
            vuln_type: pov.vuln_type.clone(),
            sanitizer: pov.sanitizer,
            fuzzer: pov.fuzzer.clone(),
            discovery_method: input.method,
            description: input.description,
            poc_blob_path: pov_blob_path(pov),
            reproduced_count: pov.reproduced_count,
            attempts: input.attempts,
            timestamps: ReportTimestamps {
                created: sp.created_stage,
                verified: sp.verified_stage,
                poc: sp.poc_stage,
                reported: input.reported_stage,
            },
        },
        crash_trace,
    })
}

impl VulnReport {
    pub fn key(&self) -> CrashKey {
        CrashKey {
            location: self.record.function.clone(),
            vuln_type: self.record.vuln_type.clone(),
            sanitizer: self.record.sanitizer,
        }
    }

    pub fn title(&self) -> String {
        format!("{} in {}", self.record.vuln_type, self.record.function)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Issue-tracker text: title, summary, crash trace, reproduction steps.
    pub fn to_markdown(&self) -> String {
        let r = &self.record;
        let found_by = match r.discovery_method {
            DiscoveryMethod::Global => "global fuzzer (G)",
            DiscoveryMethod::SpFuzzer => "suspicious-point PoC loop (S)",
        };
        let file = if r.file.is_empty() { "unknown file".to_string() } else { format!("`{}`", r.file) };
        let mut s = String::new();
        let _ = writeln!(s, "# {}\n", self.title());
        let _ = writeln!(s, "## Summary\n\n{}\n", r.description.trim());
        let _ = writeln!(s, "| | |\n|---|---|");
        let _ = writeln!(s, "| Function | `{}` in {file} |", r.function);
        let _ = writeln!(s, "| Bug type | {} |", r.vuln_type);
        let _ = writeln!(s, "| Sanitizer | {} |", r.sanitizer);
        let _ = writeln!(s, "| Fuzzer | `{}` |", r.fuzzer);
        let _ = writeln!(s, "| Found by | {found_by} |");
        let _ = writeln!(s, "| Suspicious point | {} |", r.sp_id);
        let _ = writeln!(s, "| PoC attempts | {} |\n", r.attempts);
        let _ = writeln!(s, "## Crash trace\n\n```");
        for line in &self.crash_trace {
            let _ = writeln!(s, "{line}");
        }
        let _ = writeln!(s, "```\n");
        let _ = writeln!(s, "## Reproduction\n");
        let _ = writeln!(s, "1. Build `{}` with the {} sanitizer.", r.fuzzer, r.sanitizer);
        let _ = writeln!(s, "2. Run it on `{}` ({}).", r.poc_blob_path, self.pov_id);
        let _ = writeln!(
            s,
            "3. The sanitizer reports {} in `{}`. The input crashed identically in {} of {} runs.",
            r.vuln_type, r.function, r.reproduced_count, r.reproduced_count
        );
        s
    }
}

/// Reports deduplicated by crash identity, with the PoVs behind them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportBook {
    reports: BTreeMap<String, VulnReport>,
    povs: BTreeMap<String, PoV>,
    /// Later sightings of an already reported crash, by report id.
    repeats: BTreeMap<String, u64>,
    order: Vec<String>,
}

impl ReportBook {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a report, or counts a repeat when its crash is already reported.
    /// Returns true when the report is new.
    pub fn insert(&mut self, report: VulnReport, pov: PoV) -> bool {
        if self.note_repeat(&report.id) {
            return false;
        }
        self.order.push(report.id.clone());
        self.povs.insert(pov.id.clone(), pov);
        self.reports.insert(report.id.clone(), report);
        true
    }

    /// Counts another sighting of report `id`. False when `id` is unknown.
    pub fn note_repeat(&mut self, id: &str) -> bool {
        if !self.reports.contains_key(id) {
            return false;
        }
        *self.repeats.entry(id.to_string()).or_default() += 1;
        true
    }

    pub fn contains_key(&self, key: &CrashKey) -> bool {
        self.reports.contains_key(&report_id(key))
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    /// Reports in insertion order.
    pub fn reports(&self) -> impl Iterator<Item = &VulnReport> {
        self.order.iter().map(|id| &self.reports[id])
    }

    pub fn get(&self, id: &str) -> Option<&VulnReport> {
        self.reports.get(id)
    }

    pub fn pov(&self, id: &str) -> Option<&PoV> {
        self.povs.get(id)
    }

    pub fn repeats(&self, id: &str) -> u64 {
        self.repeats.get(id).copied().unwrap_or(0)
    }
}
