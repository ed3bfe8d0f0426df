//! Suspicious points: the triage record handed from the generator to the
//! verifier to the PoC stage, and the store that owns their lifecycle.
//!
//! Fields fill in stage by stage. Creation sets `function`, `sources`,
//! `description`, `vuln_type` and `score`; verification sets `is_verified`,
//! the verdict and `poc_guidance`; PoC generation sets `poc_attempted_by`,
//! `poc_ids` and `is_real`. The store never deletes a point: false positives
//! stay around because they feed seed generation.

mod similarity;
mod vuln;

pub use similarity::{jaccard, jaccard_fraction, token_set, Threshold};
pub use vuln::{Sanitizer, UnknownSanitizer, VulnType};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::callgraph::{CallGraph, FunctionId};

/// Generator confidence below which a candidate is dropped.
pub const SKIP_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpId(String);

impl SpId {
    pub fn new(s: impl Into<String>) -> Self {
        SpId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The (fuzzer, sanitizer) pair that produced a point.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpSource {
    pub fuzzer: String,
    pub sanitizer: Sanitizer,
}

impl SpSource {
    pub fn new(fuzzer: impl Into<String>, sanitizer: Sanitizer) -> Self {
        SpSource { fuzzer: fuzzer.into(), sanitizer }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Unknown,
    Tp,
    Fp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspiciousPoint {
    pub id: SpId,
    pub function: FunctionId,
    pub sources: BTreeSet<SpSource>,
    pub description: String,
    pub vuln_type: VulnType,
    pub score: f64,
    pub is_verified: bool,
    pub verdict: Verdict,
    pub poc_guidance: Option<String>,
    pub is_real: bool,
    pub poc_attempted_by: BTreeSet<String>,
    pub poc_ids: Vec<String>,
    /// PoC results may attach without a tp verdict (fuzzer-found crashes).
    pub bypass: bool,
    /// Ordering key for the PoC queue; higher runs first.
    pub importance: u8,
    pub origin_task: Option<String>,
    pub created_stage: u64,
    pub verified_stage: Option<u64>,
    pub poc_stage: Option<u64>,
}

impl SuspiciousPoint {
    pub fn poc_eligible(&self) -> bool {
        self.verdict == Verdict::Tp || self.bypass
    }

    pub fn fuzzers(&self) -> impl Iterator<Item = &str> {
        self.sources.iter().map(|s| s.fuzzer.as_str())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SpError {
    #[error("score {0} below skip threshold {SKIP_THRESHOLD}")]
    BelowSkipThreshold(f64),
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("description is empty")]
    EmptyDescription,
    #[error("description locates the issue only by line number; describe the control flow instead")]
    LineNumberLocator,
    #[error("unknown function `{0}`")]
    UnknownFunction(FunctionId),
    #[error("unknown suspicious point `{0}`")]
    NotFound(SpId),
    #[error("suspicious point `{0}` is already verified")]
    AlreadyVerified(SpId),
    #[error("a verification must record a tp or fp verdict")]
    MissingVerdict,
    #[error("suspicious point `{0}` is not eligible for PoC results")]
    NotPocEligible(SpId),
    #[error("a crashing PoC result needs a PoV id")]
    CrashWithoutPov,
    #[error("a PoV id was given for a non-crashing attempt")]
    PovWithoutCrash,
}

fn line_locator() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\blines?\s*#?\s*\d+").unwrap())
}

fn control_flow_landmark() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)\b(if|else|branch|loop|for|while|switch|case|call|calls|calling|after|before|when|return|check|condition|memcpy|function)\b",
        )
        .unwrap()
    })
}

/// Rejects empty descriptions and ones whose only locator is a line number.
pub fn validate_description(description: &str) -> Result<(), SpError> {
    let trimmed = description.trim();
    if trimmed.is_empty() {
        return Err(SpError::EmptyDescription);
    }
    if line_locator().is_match(trimmed) {
        let without = line_locator().replace_all(trimmed, "");
        if !control_flow_landmark().is_match(&without) {
            return Err(SpError::LineNumberLocator);
        }
    }
    Ok(())
}

/// A generator finding that has passed field validation but is not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SpCandidate {
    pub function: FunctionId,
    pub source: SpSource,
    pub description: String,
    pub vuln_type: VulnType,
    pub score: f64,
    pub importance: u8,
    pub origin_task: Option<String>,
}

impl SpCandidate {
    pub fn new(
        function: FunctionId,
        source: SpSource,
        description: impl Into<String>,
        vuln_type: VulnType,
        score: f64,
    ) -> Result<Self, SpError> {
        if !(0.0..=1.0).contains(&score) || score.is_nan() {
            return Err(SpError::ScoreOutOfRange(score));
        }
        if score < SKIP_THRESHOLD {
            return Err(SpError::BelowSkipThreshold(score));
        }
        let description = description.into();
        validate_description(&description)?;
        Ok(SpCandidate {
            function,
            source,
            description,
            vuln_type,
            score,
            importance: 0,
            origin_task: None,
        })
    }

    pub fn with_importance(mut self, importance: u8) -> Self {
        self.importance = importance;
        self
    }

    pub fn with_origin(mut self, task: impl Into<String>) -> Self {
        self.origin_task = Some(task.into());
        self
    }
}

/// Decides whether a candidate repeats an existing point. Only consulted for
/// pairs that already share function and vulnerability type.
pub trait DuplicateJudge {
    fn is_duplicate(&self, existing: &SuspiciousPoint, candidate: &SpCandidate) -> bool;
}

/// Token-set Jaccard similarity of the descriptions against a threshold.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardJudge {
    pub threshold: Threshold,
}

impl DuplicateJudge for JaccardJudge {
    fn is_duplicate(&self, existing: &SuspiciousPoint, candidate: &SpCandidate) -> bool {
        self.threshold.admits(&existing.description, &candidate.description)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DedupOutcome {
    MergedInto(SpId),
    Inserted(SpId),
}

impl DedupOutcome {
    pub fn id(&self) -> &SpId {
        match self {
            DedupOutcome::MergedInto(id) | DedupOutcome::Inserted(id) => id,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Verification {
    pub verdict: Option<Verdict>,
    pub corrected_description: Option<String>,
    pub new_score: Option<f64>,
    pub poc_guidance: Option<String>,
}

impl Verification {
    pub fn tp() -> Self {
        Verification { verdict: Some(Verdict::Tp), ..Default::default() }
    }

    pub fn fp() -> Self {
        Verification { verdict: Some(Verdict::Fp), ..Default::default() }
    }

    pub fn guidance(mut self, text: impl Into<String>) -> Self {
        self.poc_guidance = Some(text.into());
        self
    }

    pub fn corrected(mut self, description: impl Into<String>) -> Self {
        self.corrected_description = Some(description.into());
        self
    }

    pub fn score(mut self, score: f64) -> Self {
        self.new_score = Some(score);
        self
    }
}

/// In-process store of suspicious points.
///
/// Ids are allocated sequentially (`sp-000001`, ...) and stage timestamps
/// come from a logical clock that advances on every mutation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpStore {
    points: BTreeMap<SpId, SuspiciousPoint>,
    next_id: u64,
    clock: u64,
    submitted: u64,
}

impl SpStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn allocate_id(&mut self) -> SpId {
        self.next_id += 1;
        SpId(format!("sp-{:06}", self.next_id))
    }

    fn insert(&mut self, c: SpCandidate) -> SpId {
        let id = self.allocate_id();
        let stage = self.tick();
        let sp = SuspiciousPoint {
            id: id.clone(),
            function: c.function,
            sources: BTreeSet::from([c.source]),
            description: c.description,
            vuln_type: c.vuln_type,
            score: c.score,
            is_verified: false,
            verdict: Verdict::Unknown,
            poc_guidance: None,
            is_real: false,
            poc_attempted_by: BTreeSet::new(),
            poc_ids: Vec::new(),
            bypass: false,
            importance: c.importance,
            origin_task: c.origin_task,
            created_stage: stage,
            verified_stage: None,
            poc_stage: None,
        };
        self.points.insert(id.clone(), sp);
        id
    }

    /// Checks that the candidate's function exists (and has a body) in
    /// `graph`.
    pub fn check_function(graph: &CallGraph, candidate: &SpCandidate) -> Result<(), SpError> {
        match graph.function(&candidate.function) {
            Some(f) if !f.external => Ok(()),
            _ => Err(SpError::UnknownFunction(candidate.function.clone())),
        }
    }

    /// Stores a validated candidate without duplicate detection.
    pub fn create_sp(&mut self, graph: &CallGraph, candidate: SpCandidate) -> Result<SpId, SpError> {
        Self::check_function(graph, &candidate)?;
        self.submitted += 1;
        Ok(self.insert(candidate))
    }

    /// Finds the first existing point (in id order) the candidate duplicates.
    pub fn find_duplicate(&self, candidate: &SpCandidate, judge: &dyn DuplicateJudge) -> Option<SpId> {
        self.points
            .values()
            .filter(|sp| sp.function == candidate.function && sp.vuln_type == candidate.vuln_type)
            .find(|sp| judge.is_duplicate(sp, candidate))
            .map(|sp| sp.id.clone())
    }

    /// Merges the candidate into a duplicate (sources unioned, score raised
    /// to the maximum, existing id kept) or inserts it as a new point.
    pub fn deduplicate(&mut self, candidate: SpCandidate, judge: &dyn DuplicateJudge) -> DedupOutcome {
        self.submitted += 1;
        match self.find_duplicate(&candidate, judge) {
            Some(id) => {
                self.tick();
                let sp = self.points.get_mut(&id).expect("duplicate exists");
                sp.sources.insert(candidate.source);
                if candidate.score > sp.score {
                    sp.score = candidate.score;
                }
                sp.importance = sp.importance.max(candidate.importance);
                DedupOutcome::MergedInto(id)
            }
            None => DedupOutcome::Inserted(self.insert(candidate)),
        }
    }

    /// Validation plus deduplication: the normal path for generator output.
    pub fn submit(
        &mut self,
        graph: &CallGraph,
        candidate: SpCandidate,
        judge: &dyn DuplicateJudge,
    ) -> Result<DedupOutcome, SpError> {
        Self::check_function(graph, &candidate)?;
        Ok(self.deduplicate(candidate, judge))
    }

    /// Records the verifier's verdict. A false positive keeps its record so
    /// it can seed the fuzzers later.
    pub fn apply_verification(&mut self, id: &SpId, v: Verification) -> Result<&SuspiciousPoint, SpError> {
        let verdict = match v.verdict {
            Some(Verdict::Unknown) | None => return Err(SpError::MissingVerdict),
            Some(verdict) => verdict,
        };
        {
            let sp = self.points.get(id).ok_or_else(|| SpError::NotFound(id.clone()))?;
            if sp.is_verified {
                return Err(SpError::AlreadyVerified(id.clone()));
            }
        }
        if let Some(d) = &v.corrected_description {
            validate_description(d)?;
        }
        if let Some(s) = v.new_score {
            if !(0.0..=1.0).contains(&s) || s.is_nan() {
                return Err(SpError::ScoreOutOfRange(s));
            }
        }
        let stage = self.tick();
        let sp = self.points.get_mut(id).expect("checked");
        sp.is_verified = true;
        sp.verdict = verdict;
        sp.verified_stage = Some(stage);
        if let Some(d) = v.corrected_description {
            sp.description = d;
        }
        if let Some(s) = v.new_score {
            sp.score = s;
        }
        if v.poc_guidance.is_some() {
            sp.poc_guidance = v.poc_guidance;
        }
        Ok(sp)
    }

    /// Lets PoC results attach without a tp verdict. Used when a fuzzer
    /// crash lands on a point the verifier rejected or never saw.
    pub fn flag_bypass(&mut self, id: &SpId) -> Result<&SuspiciousPoint, SpError> {
        let sp = self.points.get_mut(id).ok_or_else(|| SpError::NotFound(id.clone()))?;
        sp.bypass = true;
        Ok(sp)
    }

    /// Creates a point for a crash that matched no existing point.
    pub fn create_synthetic(
        &mut self,
        function: FunctionId,
        source: SpSource,
        vuln_type: VulnType,
        description: impl Into<String>,
    ) -> SpId {
        let mut description = description.into();
        if validate_description(&description).is_err() {
            description = format!("Crash observed when fuzzer input reaches function {function}");
        }
        let candidate = SpCandidate {
            function,
            source,
            description,
            vuln_type,
            score: 1.0,
            importance: 0,
            origin_task: None,
        };
        let id = self.insert(candidate);
        self.points.get_mut(&id).expect("inserted").bypass = true;
        id
    }

    pub fn record_poc_result(
        &mut self,
        id: &SpId,
        fuzzer: &str,
        pov_id: Option<String>,
        crashed: bool,
    ) -> Result<&SuspiciousPoint, SpError> {
        match (crashed, &pov_id) {
            (true, None) => return Err(SpError::CrashWithoutPov),
            (false, Some(_)) => return Err(SpError::PovWithoutCrash),
            _ => {}
        }
        {
            let sp = self.points.get(id).ok_or_else(|| SpError::NotFound(id.clone()))?;
            if !sp.poc_eligible() {
                return Err(SpError::NotPocEligible(id.clone()));
            }
        }
        let stage = self.tick();
        let sp = self.points.get_mut(id).expect("checked");
        sp.poc_attempted_by.insert(fuzzer.to_string());
        if sp.poc_stage.is_none() {
            sp.poc_stage = Some(stage);
        }
        if let Some(pov) = pov_id {
            if !sp.poc_ids.contains(&pov) {
                sp.poc_ids.push(pov);
            }
            sp.is_real = true;
        }
        Ok(sp)
    }

    pub fn get(&self, id: &SpId) -> Option<&SuspiciousPoint> {
        self.points.get(id)
    }

    pub fn points(&self) -> impl Iterator<Item = &SuspiciousPoint> {
        self.points.values()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of candidates ever submitted, merged ones included.
    pub fn submitted(&self) -> u64 {
        self.submitted
    }

    /// Verified-tp points ordered for PoC generation: importance descending,
    /// score descending, creation ascending.
    pub fn poc_queue(&self) -> Vec<SpId> {
        let mut tps: Vec<&SuspiciousPoint> = self
            .points
            .values()
            .filter(|sp| sp.is_verified && sp.verdict == Verdict::Tp)
            .collect();
        tps.sort_by(|a, b| poc_order(a, b));
        tps.into_iter().map(|sp| sp.id.clone()).collect()
    }
}

pub fn poc_order(a: &SuspiciousPoint, b: &SuspiciousPoint) -> std::cmp::Ordering {
    b.importance
        .cmp(&a.importance)
        .then(b.score.total_cmp(&a.score))
        .then(a.created_stage.cmp(&b.created_stage))
}

/// Cloneable handle on a store shared by concurrent workers. Every
/// operation takes the lock once, so each is atomic for the point it
/// touches.
#[derive(Debug, Clone, Default)]
pub struct SharedSpStore {
    inner: Arc<Mutex<SpStore>>,
}

impl SharedSpStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lock(&self) -> MutexGuard<'_, SpStore> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot(&self) -> SpStore {
        self.lock().clone()
    }

    pub fn get(&self, id: &SpId) -> Option<SuspiciousPoint> {
        self.lock().get(id).cloned()
    }
}
