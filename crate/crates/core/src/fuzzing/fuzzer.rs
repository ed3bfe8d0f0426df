use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, SeedOrigin};
use super::mutate::{mutate, MutationContext};
use super::target::{CrashKey, ExecError, TargetRunner};

/// Energy given to a seed whose execution just added coverage.
pub const FRESH_ENERGY: u32 = 4;
/// Default cap on mutated input size.
pub const DEFAULT_MAX_LEN: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzerConfig {
    pub rng_seed: u64,
    pub dictionary: Vec<Vec<u8>>,
    pub max_len: usize,
}

impl FuzzerConfig {
    pub fn new(rng_seed: u64) -> Self {
        FuzzerConfig { rng_seed, dictionary: Vec::new(), max_len: DEFAULT_MAX_LEN }
    }

    pub fn with_dictionary(mut self, dictionary: Vec<Vec<u8>>) -> Self {
        self.dictionary = dictionary;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub key: CrashKey,
    /// First input that produced this crash.
    pub blob: Vec<u8>,
    /// Fuzzer iteration (1-based, counted over the fuzzer's lifetime) of the
    /// first occurrence; 0 when a seed crashed on insertion.
    pub iteration: u64,
    pub count: u64,
    /// Origin of the non-mutation ancestor of the crashing input.
    pub lineage: SeedOrigin,
}

/// Coverage-guided mutation loop over one target. Used both as the
/// project-wide Global Fuzzer and, scoped to one suspicious point's
/// inputs, as the SP Fuzzer.
///
/// Seed choice is random, weighted by energy: a seed starts at
/// [`FRESH_ENERGY`], halves (down to 1) each time it is picked, and is
/// reset to [`FRESH_ENERGY`] when one of its mutants adds coverage.
#[derive(Debug, Clone)]
pub struct Fuzzer {
    corpus: Corpus,
    lineage: Vec<SeedOrigin>,
    energy: Vec<u32>,
    rng: ChaCha8Rng,
    dictionary: Vec<Vec<u8>>,
    max_len: usize,
    pending: Vec<(Vec<u8>, SeedOrigin)>,
    crashes: BTreeMap<CrashKey, CrashRecord>,
    crash_order: Vec<CrashKey>,
    iterations: u64,
    executions: u64,
}

impl Fuzzer {
    /// A fuzzer that starts from the empty input when given nothing else.
    pub fn global(config: FuzzerConfig) -> Self {
        let mut f = Self::scoped(config, Vec::new());
        f.pending.push((Vec::new(), SeedOrigin::Initial));
        f
    }

    /// A fuzzer that only ever explores from `blobs` and later additions.
    pub fn scoped(config: FuzzerConfig, blobs: Vec<Vec<u8>>) -> Self {
        Fuzzer {
            corpus: Corpus::new(),
            lineage: Vec::new(),
            energy: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            dictionary: config.dictionary,
            max_len: config.max_len,
            pending: blobs.into_iter().map(|b| (b, SeedOrigin::PocAttempt)).collect(),
            crashes: BTreeMap::new(),
            crash_order: Vec::new(),
            iterations: 0,
            executions: 0,
        }
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn executions(&self) -> u64 {
        self.executions
    }

    /// Distinct crashes in order of discovery.
    pub fn crashes(&self) -> Vec<&CrashRecord> {
        self.crash_order.iter().map(|k| &self.crashes[k]).collect()
    }

    pub fn crash(&self, key: &CrashKey) -> Option<&CrashRecord> {
        self.crashes.get(key)
    }

    pub fn extend_dictionary(&mut self, tokens: impl IntoIterator<Item = Vec<u8>>) {
        for t in tokens {
            if !t.is_empty() && !self.dictionary.contains(&t) {
                self.dictionary.push(t);
            }
        }
    }

    /// Queues an input to be executed at the start of the next run.
    pub fn queue_seed(&mut self, blob: Vec<u8>, origin: SeedOrigin) {
        self.pending.push((blob, origin));
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    fn record_crash(&mut self, key: CrashKey, blob: &[u8], lineage: SeedOrigin) -> Option<CrashRecord> {
        match self.crashes.get_mut(&key) {
            Some(r) => {
                r.count += 1;
                None
            }
            None => {
                let rec = CrashRecord { key: key.clone(), blob: blob.to_vec(), iteration: self.iterations, count: 1, lineage };
                self.crashes.insert(key.clone(), rec.clone());
                self.crash_order.push(key);
                Some(rec)
            }
        }
    }

    fn insert_seed(&mut self, runner: &dyn TargetRunner, blob: Vec<u8>, origin: SeedOrigin) -> Option<CrashRecord> {
        self.executions += 1;
        let result = match runner.execute(&blob) {
            Ok(r) => r,
            Err(ExecError::Oversize { .. }) | Err(_) => return None,
        };
        if let Some(key) = result.crash() {
            return self.record_crash(key, &blob, origin);
        }
        if self.corpus.add(blob, &result.coverage, origin) {
            self.lineage.push(origin);
            self.energy.push(FRESH_ENERGY);
        }
        None
    }

    fn pick(&mut self) -> usize {
        let total: u64 = self.energy.iter().map(|&e| e as u64).sum();
        let mut ticket = self.rng.gen_range(0..total);
        let mut idx = 0;
        for (i, &e) in self.energy.iter().enumerate() {
            if ticket < e as u64 {
                idx = i;
                break;
            }
            ticket -= e as u64;
        }
        self.energy[idx] = (self.energy[idx] / 2).max(1);
        idx
    }

    /// Runs `iterations` mutate-and-execute steps, after first executing
    /// any queued seeds. Returns crashes seen for the first time.
    pub fn run(&mut self, runner: &dyn TargetRunner, iterations: u64) -> Vec<CrashRecord> {
        let mut found = Vec::new();
        if iterations == 0 {
            return found;
        }
        for (blob, origin) in std::mem::take(&mut self.pending) {
            found.extend(self.insert_seed(runner, blob, origin));
        }
        if self.corpus.is_empty() {
            return found;
        }
        for _ in 0..iterations {
            self.iterations += 1;
            let parent = self.pick();
            let child = {
                let pool: Vec<&[u8]> = self.corpus.seeds().iter().map(|s| s.blob.as_slice()).collect();
                let ctx = MutationContext { dictionary: &self.dictionary, splice_pool: &pool, max_len: self.max_len };
                mutate(&self.corpus.seeds()[parent].blob, &mut self.rng, &ctx)
            };
            self.executions += 1;
            let Ok(result) = runner.execute(&child) else {
                continue;
            };
            let lineage = self.lineage[parent];
            if let Some(key) = result.crash() {
                found.extend(self.record_crash(key, &child, lineage));
            } else if self.corpus.add(child, &result.coverage, SeedOrigin::Mutation) {
                self.lineage.push(lineage);
                self.energy.push(FRESH_ENERGY);
                self.energy[parent] = FRESH_ENERGY;
            }
        }
        found
    }
}

/// A fuzzer running on its own thread in slices until its budget is spent
/// or it is stopped.
pub struct BackgroundFuzzer {
    stop: Arc<AtomicBool>,
    found: Arc<Mutex<Vec<CrashRecord>>>,
    handle: JoinHandle<Fuzzer>,
}

impl BackgroundFuzzer {
    pub const SLICE: u64 = 256;

    pub fn spawn(mut fuzzer: Fuzzer, runner: Arc<dyn TargetRunner>, budget: u64) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let found = Arc::new(Mutex::new(Vec::new()));
        let (s, f) = (stop.clone(), found.clone());
        let handle = std::thread::spawn(move || {
            let mut left = budget;
            while left > 0 && !s.load(Ordering::Relaxed) {
                let n = left.min(Self::SLICE);
                let new = fuzzer.run(runner.as_ref(), n);
                f.lock().unwrap_or_else(|e| e.into_inner()).extend(new);
                left -= n;
            }
            fuzzer
        });
        BackgroundFuzzer { stop, found, handle }
    }

    /// Crashes found so far; safe to call while running.
    pub fn crashes(&self) -> Vec<CrashRecord> {
        self.found.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn is_finished(&self) -> bool {
        self.handle.is_finished()
    }

    /// Stops after the current slice and hands back the fuzzer state.
    pub fn stop(self) -> Fuzzer {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.join().expect("fuzzer thread panicked")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzzing::target::{SimRunner, SimTarget};

    pub(crate) fn magic_target() -> SimRunner {
        SimRunner::new(
            SimTarget::from_json(
                r#"{"version":1,"name":"magic","fuzzer":"magic_fuzzer","sanitizer":"address",
                "entry":["magic_entry"],
                "rules":[{"guard":{"op":"offset-equals","offset":0,"bytes":"hex:7f"},
                  "enter":["magic_parse"],
                  "crash":{"location":"magic_parse","vuln_type":"stack-buffer-overflow","sanitizer":"address"}}]}"#,
            )
            .unwrap(),
        )
    }

    #[test]
    fn zero_budget_changes_nothing() {
        let mut f = Fuzzer::global(FuzzerConfig::new(42));
        assert!(f.run(&magic_target(), 0).is_empty());
        assert!(f.corpus().is_empty());
        assert_eq!(f.iterations(), 0);
    }

    #[test]
    fn same_seed_same_run() {
        let run = |seed| {
            let mut f = Fuzzer::global(FuzzerConfig::new(seed));
            let c = f.run(&magic_target(), 500);
            (c, f.corpus().clone())
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn repeated_crashes_are_counted_once() {
        let mut f = Fuzzer::global(FuzzerConfig::new(42));
        f.run(&magic_target(), 5_000);
        assert_eq!(f.crashes().len(), 1);
        assert!(f.crashes()[0].count >= 1);
        assert!(f.corpus().is_consistent());
    }

    #[test]
    fn scoped_fuzzer_without_inputs_does_nothing() {
        let mut f = Fuzzer::scoped(FuzzerConfig::new(1), Vec::new());
        assert!(f.run(&magic_target(), 100).is_empty());
        assert_eq!(f.iterations(), 0);
    }

    #[test]
    fn background_thread_stops_cleanly() {
        let bg = BackgroundFuzzer::spawn(Fuzzer::global(FuzzerConfig::new(42)), Arc::new(magic_target()), 2_000);
        let f = bg.stop();
        assert!(f.iterations() <= 2_000);
        assert!(f.corpus().is_consistent());
    }
}
