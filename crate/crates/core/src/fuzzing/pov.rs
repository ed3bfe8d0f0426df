use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::callgraph::FunctionId;
use crate::spstore::{Sanitizer, SpId, SpSource, SpStore, SuspiciousPoint, VulnType};

use super::target::{CrashKey, TargetRunner};

/// Runs a candidate must crash identically before it counts as a PoV.
pub const QUORUM: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reproduction {
    Confirmed { key: CrashKey, runs: u32 },
    /// `run` is the 1-based run that disagreed (or failed to crash).
    Flaky { run: u32, reason: String },
}

impl Reproduction {
    pub fn is_confirmed(&self) -> bool {
        matches!(self, Reproduction::Confirmed { .. })
    }
}

/// Executes `blob` `runs` times; confirmed when every run crashes at the
/// same location with the same bug type.
pub fn reproduce(blob: &[u8], runner: &dyn TargetRunner, runs: u32) -> Reproduction {
    let runs = runs.max(1);
    let mut reference: Option<CrashKey> = None;
    for run in 1..=runs {
        let key = match runner.execute(blob) {
            Ok(r) => match r.crash() {
                Some(k) => k,
                None => return Reproduction::Flaky { run, reason: format!("no crash ({:?})", r.outcome) },
            },
            Err(e) => return Reproduction::Flaky { run, reason: e.to_string() },
        };
        match &reference {
            None => reference = Some(key),
            Some(r) if r.location != key.location || r.vuln_type != key.vuln_type => {
                return Reproduction::Flaky { run, reason: format!("crashed as {key}, expected {r}") };
            }
            Some(_) => {}
        }
    }
    Reproduction::Confirmed { key: reference.expect("runs >= 1"), runs }
}

/// A reproduced crashing input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoV {
    pub id: String,
    #[serde(with = "hex_bytes")]
    pub blob: Vec<u8>,
    pub fuzzer: String,
    pub sanitizer: Sanitizer,
    pub location: FunctionId,
    pub vuln_type: VulnType,
    pub reproduced_count: u32,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

pub fn pov_id(fuzzer: &str, sanitizer: Sanitizer, blob: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(fuzzer.as_bytes());
    h.update([0]);
    h.update(sanitizer.as_str().as_bytes());
    h.update([0]);
    h.update(blob);
    format!("pov-{}", &hex::encode(h.finalize())[..12])
}

impl PoV {
    /// Reproduces `blob` at `quorum` and packages it on success.
    pub fn confirm(blob: &[u8], runner: &dyn TargetRunner, quorum: u32) -> Result<PoV, Reproduction> {
        match reproduce(blob, runner, quorum) {
            Reproduction::Confirmed { key, runs } => Ok(PoV {
                id: pov_id(runner.fuzzer(), runner.sanitizer(), blob),
                blob: blob.to_vec(),
                fuzzer: runner.fuzzer().to_string(),
                sanitizer: key.sanitizer,
                location: key.location,
                vuln_type: key.vuln_type,
                reproduced_count: runs,
            }),
            flaky => Err(flaky),
        }
    }

    pub fn key(&self) -> CrashKey {
        CrashKey { location: self.location.clone(), vuln_type: self.vuln_type.clone(), sanitizer: self.sanitizer }
    }
}

/// Whether a crash belongs to an existing point: same function, and the
/// point's bug type is one the crash's sanitizer can observe.
pub fn crash_matches(sp: &SuspiciousPoint, key: &CrashKey) -> bool {
    sp.function == key.location && key.sanitizer.detects(&sp.vuln_type)
}

/// Finds the point a crash belongs to (best in PoC order), or creates a
/// synthetic one. Either way the point may then take PoC results. Returns
/// the id and whether it was created.
pub fn attach_crash(store: &mut SpStore, fuzzer: &str, key: &CrashKey) -> (SpId, bool) {
    let mut matching: Vec<&SuspiciousPoint> = store.points().filter(|sp| crash_matches(sp, key)).collect();
    matching.sort_by(|a, b| crate::spstore::poc_order(a, b));
    if let Some(sp) = matching.first() {
        let id = sp.id.clone();
        if !sp.poc_eligible() {
            store.flag_bypass(&id).expect("point exists");
        }
        return (id, false);
    }
    let description = format!(
        "Fuzzer input reaching {} triggers a {} report from the {} sanitizer",
        key.location, key.vuln_type, key.sanitizer
    );
    let id = store.create_synthetic(
        key.location.clone(),
        SpSource::new(fuzzer, key.sanitizer),
        key.vuln_type.clone(),
        description,
    );
    (id, true)
}
