//! Persistence for scan artifacts.
//!
//! Records are JSON values grouped into fixed collections and addressed by
//! string keys. [`MemoryStore`] keeps them in a map; [`FileStore`] writes one
//! file per record and replaces files by rename, so a crash mid-write leaves
//! either the old or the new record on disk.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Collection {
    Tasks,
    Sps,
    Povs,
    Reports,
    Metrics,
}

impl Collection {
    pub const ALL: [Collection; 5] =
        [Collection::Tasks, Collection::Sps, Collection::Povs, Collection::Reports, Collection::Metrics];

    pub fn name(&self) -> &'static str {
        match self {
            Collection::Tasks => "tasks",
            Collection::Sps => "sps",
            Collection::Povs => "povs",
            Collection::Reports => "reports",
            Collection::Metrics => "metrics",
        }
    }
}

impl fmt::Display for Collection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rewrites the current value (or `None`) into the new one; returning
/// `None` deletes the record.
pub type Updater<'a> = &'a mut dyn FnMut(Option<Value>) -> Option<Value>;

pub trait StoreBackend: Send + Sync {
    fn put(&self, collection: Collection, key: &str, value: &Value) -> Result<()>;
    fn get(&self, collection: Collection, key: &str) -> Result<Option<Value>>;
    /// Every record of the collection, ordered by key.
    fn list(&self, collection: Collection) -> Result<Vec<(String, Value)>>;
    /// Read-modify-write with no other update on the same store in between.
    /// Returns the value left in the store.
    fn update(&self, collection: Collection, key: &str, f: Updater<'_>) -> Result<Option<Value>>;
}

fn check_key(key: &str) -> Result<()> {
    let ok = !key.is_empty()
        && !key.starts_with('.')
        && key.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if !ok {
        bail!("invalid store key `{key}`");
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    records: Mutex<BTreeMap<Collection, BTreeMap<String, Value>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn records(&self) -> std::sync::MutexGuard<'_, BTreeMap<Collection, BTreeMap<String, Value>>> {
        self.records.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl StoreBackend for MemoryStore {
    fn put(&self, collection: Collection, key: &str, value: &Value) -> Result<()> {
        check_key(key)?;
        self.records().entry(collection).or_default().insert(key.to_string(), value.clone());
        Ok(())
    }

    fn get(&self, collection: Collection, key: &str) -> Result<Option<Value>> {
        Ok(self.records().get(&collection).and_then(|c| c.get(key)).cloned())
    }

    fn list(&self, collection: Collection) -> Result<Vec<(String, Value)>> {
        Ok(self
            .records()
            .get(&collection)
            .map(|c| c.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default())
    }

    fn update(&self, collection: Collection, key: &str, f: Updater<'_>) -> Result<Option<Value>> {
        check_key(key)?;
        let mut records = self.records();
        let coll = records.entry(collection).or_default();
        match f(coll.remove(key)) {
            Some(v) => {
                coll.insert(key.to_string(), v.clone());
                Ok(Some(v))
            }
            None => Ok(None),
        }
    }
}

/// One pretty-printed JSON file per record under `root/<collection>/`.
///
/// Updates are serialized within the process; separate processes writing the
/// same store are not coordinated.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    writer: Mutex<()>,
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for c in Collection::ALL {
            let dir = root.join(c.name());
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(FileStore { root, writer: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, collection: Collection, key: &str) -> PathBuf {
        self.root.join(collection.name()).join(format!("{key}.json"))
    }

    fn read(&self, collection: Collection, key: &str) -> Result<Option<Value>> {
        let path = self.path(collection, key);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
        }
    }

    fn write(&self, collection: Collection, key: &str, value: &Value) -> Result<()> {
        let path = self.path(collection, key);
        let tmp = path.with_extension("json.tmp");
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        let mut file = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        file.write_all(text.as_bytes())?;
        file.sync_all()?;
        fs::rename(&tmp, &path).with_context(|| format!("replacing {}", path.display()))
    }
}

impl StoreBackend for FileStore {
    fn put(&self, collection: Collection, key: &str, value: &Value) -> Result<()> {
        check_key(key)?;
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        self.write(collection, key, value)
    }

    fn get(&self, collection: Collection, key: &str) -> Result<Option<Value>> {
        check_key(key)?;
        self.read(collection, key)
    }

    fn list(&self, collection: Collection) -> Result<Vec<(String, Value)>> {
        let dir = self.root.join(collection.name());
        let mut keys: Vec<String> = match fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_string))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e).with_context(|| format!("listing {}", dir.display())),
        };
        keys.sort();
        let mut out = Vec::with_capacity(keys.len());
        for k in keys {
            if let Some(v) = self.read(collection, &k)? {
                out.push((k, v));
            }
        }
        Ok(out)
    }

    fn update(&self, collection: Collection, key: &str, f: Updater<'_>) -> Result<Option<Value>> {
        check_key(key)?;
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        match f(self.read(collection, key)?) {
            Some(v) => {
                self.write(collection, key, &v)?;
                Ok(Some(v))
            }
            None => {
                let path = self.path(collection, key);
                if path.exists() {
                    fs::remove_file(&path).with_context(|| format!("removing {}", path.display()))?;
                }
                Ok(None)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::sync::Arc;

    fn roundtrip(store: &dyn StoreBackend) {
        for c in Collection::ALL {
            let v = json!({"collection": c.name(), "n": 1, "nested": {"xs": [1, 2, 3]}});
            store.put(c, "rec-1", &v).unwrap();
            assert_eq!(store.get(c, "rec-1").unwrap(), Some(v));
            assert_eq!(store.get(c, "missing").unwrap(), None);
        }
        store.put(Collection::Sps, "sp-000002", &json!(2)).unwrap();
        let keys: Vec<String> = store.list(Collection::Sps).unwrap().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, ["rec-1", "sp-000002"]);
        assert!(store.put(Collection::Sps, "../escape", &json!(0)).is_err());
    }

    fn concurrent_counter(store: Arc<dyn StoreBackend>) {
        std::thread::scope(|s| {
            for _ in 0..8 {
                let store = store.clone();
                s.spawn(move || {
                    for _ in 0..25 {
                        store
                            .update(Collection::Metrics, "counter", &mut |v| {
                                Some(json!(v.and_then(|v| v.as_u64()).unwrap_or(0) + 1))
                            })
                            .unwrap();
                    }
                });
            }
        });
        assert_eq!(store.get(Collection::Metrics, "counter").unwrap(), Some(json!(200)));
    }

    #[test]
    fn memory_store_roundtrips() {
        roundtrip(&MemoryStore::new());
        concurrent_counter(Arc::new(MemoryStore::new()));
    }

    #[test]
    fn file_store_roundtrips_and_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        roundtrip(&store);
        let reopened = FileStore::open(dir.path()).unwrap();
        assert_eq!(reopened.get(Collection::Sps, "sp-000002").unwrap(), Some(json!(2)));
        concurrent_counter(Arc::new(FileStore::open(dir.path()).unwrap()));
        let leftovers = fs::read_dir(dir.path().join("metrics"))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp"))
            .count();
        assert_eq!(leftovers, 0);
    }

    #[test]
    fn update_can_delete() {
        let store = MemoryStore::new();
        store.put(Collection::Tasks, "t", &json!(1)).unwrap();
        assert_eq!(store.update(Collection::Tasks, "t", &mut |_| None).unwrap(), None);
        assert!(store.list(Collection::Tasks).unwrap().is_empty());
    }
}
