use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::callgraph::FunctionId;

/// Where a corpus entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedOrigin {
    Initial,
    Direction,
    FpSp,
    Mutation,
    PocAttempt,
    Agent,
}

/// Hex SHA-256 over the sorted executed-function set.
pub fn fingerprint(coverage: &BTreeSet<FunctionId>) -> String {
    let mut h = Sha256::new();
    for f in coverage {
        h.update(f.as_str().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub blob: Vec<u8>,
    pub fingerprint: String,
    pub origin: SeedOrigin,
}

/// Inputs kept for coverage novelty: at most one per fingerprint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    seeds: Vec<Seed>,
    index: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    fingerprint: String,
    file: String,
    origin: SeedOrigin,
    len: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus index: {0}")]
    Index(#[from] serde_json::Error),
    #[error("corpus index lists {0} twice")]
    DuplicateFingerprint(String),
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the blob if its coverage fingerprint is new. Returns whether it
    /// was added.
    pub fn add(&mut self, blob: Vec<u8>, coverage: &BTreeSet<FunctionId>, origin: SeedOrigin) -> bool {
        let fp = fingerprint(coverage);
        if self.index.contains_key(&fp) {
            return false;
        }
        self.index.insert(fp.clone(), self.seeds.len());
        self.seeds.push(Seed { blob, fingerprint: fp, origin });
        true
    }

    pub fn contains_fingerprint(&self, fp: &str) -> bool {
        self.index.contains_key(fp)
    }

    pub fn seeds(&self) -> &[Seed] {
        &self.seeds
    }

    pub fn get(&self, i: usize) -> Option<&Seed> {
        self.seeds.get(i)
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn fingerprints(&self) -> impl Iterator<Item = &str> {
        self.seeds.iter().map(|s| s.fingerprint.as_str())
    }

    /// Fingerprints are pairwise distinct.
    pub fn is_consistent(&self) -> bool {
        let set: BTreeSet<&str> = self.fingerprints().collect();
        set.len() == self.seeds.len() && self.index.len() == self.seeds.len()
    }

    /// Writes one `<fingerprint>.bin` per seed plus `index.json`. Files are
    /// written to a temporary name first and renamed into place.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut index = Vec::new();
        for s in &self.seeds {
            let file = format!("{}.bin", s.fingerprint);
            write_atomic(&dir.join(&file), &s.blob)?;
            index.push(IndexEntry { fingerprint: s.fingerprint.clone(), file, origin: s.origin, len: s.blob.len() });
        }
        write_atomic(&dir.join("index.json"), serde_json::to_string_pretty(&index)?.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
        let dir = dir.as_ref();
        let index: Vec<IndexEntry> = serde_json::from_slice(&std::fs::read(dir.join("index.json"))?)?;
        let mut c = Corpus::new();
        for e in index {
            if c.index.contains_key(&e.fingerprint) {
                return Err(CorpusError::DuplicateFingerprint(e.fingerprint));
            }
            let blob = std::fs::read(dir.join(&e.file))?;
            c.index.insert(e.fingerprint.clone(), c.seeds.len());
            c.seeds.push(Seed { blob, fingerprint: e.fingerprint, origin: e.origin });
        }
        Ok(c)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cov(fs: &[&str]) -> BTreeSet<FunctionId> {
        fs.iter().map(|f| FunctionId::new(*f)).collect()
    }

    #[test]
    fn novelty_by_fingerprint() {
        let mut c = Corpus::new();
        assert!(c.add(b"a".to_vec(), &cov(&["e"]), SeedOrigin::Initial));
        assert!(!c.add(b"b".to_vec(), &cov(&["e"]), SeedOrigin::Mutation));
        assert!(c.add(b"c".to_vec(), &cov(&["e", "f"]), SeedOrigin::Mutation));
        assert_eq!(c.len(), 2);
        assert!(c.is_consistent());
    }

    #[test]
    fn fingerprint_separates_names() {
        assert_ne!(fingerprint(&cov(&["ab", "c"])), fingerprint(&cov(&["a", "bc"])));
    }

    #[test]
    fn persist_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Corpus::new();
        c.add(vec![0, 1, 2], &cov(&["e"]), SeedOrigin::Direction);
        c.add(vec![], &cov(&["e", "x"]), SeedOrigin::FpSp);
        c.persist(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    }
}
