//! Shared fixtures and independent oracles for the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spscan::agentcore::{Scenario, ScriptedProvider};
use spscan::callgraph::{load_call_graph, CallGraph, FunctionId};
use spscan::directions::{AnalyzedSet, Direction, Pick, Priority, RiskLevel, Scheduler};
use spscan::fuzzing::{reproduce, Reproduction, QUORUM};
use spscan::pipeline::{
    plan_workers, Agents, DeltaSpec, Engine, Project, ScanConfig, ScanMode, SimTargets, TaskBudgets, WorkerFilter,
    WorkerOutcome, WorkerTask,
};
use spscan::spstore::{
    token_set, DedupOutcome, JaccardJudge, Sanitizer, SharedSpStore, SpCandidate, SpSource, SpStore, Verification,
    VulnType,
};

// ---------------------------------------------------------------------------
// Pipeline fixtures

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub const FUZZERS: [&str; 3] = ["json_fuzzer", "png_fuzzer", "tar_fuzzer"];

pub fn engine_at(dir: &Path, scenario: Scenario, seed: u64) -> (Engine, Arc<ScriptedProvider>) {
    let graph = load_call_graph(dir.join("export.jsonl")).unwrap();
    let targets = SimTargets::load_dir(dir.join("targets")).unwrap();
    let provider = Arc::new(ScriptedProvider::new(scenario));
    let project = Project::new(graph, Arc::new(targets));
    let config = ScanConfig { rng_seed: seed, ..ScanConfig::default() };
    (Engine::new(project, Agents::new(provider.clone()), config), provider)
}

pub fn fixture_scenario() -> Scenario {
    Scenario::load(fixtures().join("scenario.json")).unwrap()
}

pub fn full_tasks(e: &Engine, budgets: TaskBudgets) -> Vec<WorkerTask> {
    let fuzzers: Vec<String> = FUZZERS.map(String::from).to_vec();
    plan_workers(&e.project.graph, &fuzzers, &[Sanitizer::Address], &WorkerFilter::none(), ScanMode::Full, budgets)
        .unwrap()
}

pub fn full_scan_with(
    scenario: Scenario,
    seed: u64,
    parallel: bool,
    budgets: TaskBudgets,
) -> (Engine, Vec<WorkerOutcome>) {
    let (e, _) = engine_at(&fixtures(), scenario, seed);
    let t = full_tasks(&e, budgets);
    let out = e.run_tasks(t, None, parallel);
    (e, out)
}

pub fn full_scan(seed: u64, parallel: bool) -> (Engine, Vec<WorkerOutcome>) {
    full_scan_with(fixture_scenario(), seed, parallel, TaskBudgets::unlimited())
}

/// Reported function -> discovery tag.
pub fn tags(e: &Engine) -> BTreeMap<String, String> {
    let book = e.project.reports.lock().unwrap();
    book.reports().map(|r| (r.record.function.to_string(), r.record.discovery_method.tag().to_string())).collect()
}

pub fn expected_tags() -> BTreeMap<String, String> {
    [
        ("json_parse_escape", "G"),
        ("json_parse_number", "S"),
        ("png_handle_text", "G"),
        ("png_read_row", "S"),
        ("tar_read_longname", "G"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

/// Re-runs every report's PoV at quorum; returns the ids that failed.
pub fn irreproducible(e: &Engine) -> Vec<String> {
    let book = e.project.reports.lock().unwrap();
    let mut bad = Vec::new();
    for r in book.reports() {
        let Some(pov) = book.pov(&r.pov_id) else {
            bad.push(r.id.clone());
            continue;
        };
        let ok = e.project.targets.runner(&pov.fuzzer, pov.sanitizer).is_some_and(|runner| {
            matches!(reproduce(&pov.blob, runner.as_ref(), QUORUM),
                Reproduction::Confirmed { key, runs } if runs == QUORUM && key == r.key())
        });
        if !ok {
            bad.push(r.id.clone());
        }
    }
    bad
}

pub const DELTA_MESSAGE: &str = "png: accept palettes that arrive before IHDR\n\nSome encoders emit PLTE first. Drop the early return and let the palette\nlookup fall back when no header has been seen. Also skip the chunk type in\nthe checksum and avoid an empty write.";

pub fn delta_engine() -> (Engine, Arc<ScriptedProvider>, DeltaSpec) {
    let dir = fixtures().join("delta");
    let (e, p) = engine_at(&dir, Scenario::load(dir.join("scenario.json")).unwrap(), 5);
    let diff = std::fs::read_to_string(dir.join("change.diff")).unwrap();
    let spec = DeltaSpec::resolve(&diff, None, &e.project.graph).unwrap();
    (e, p, spec)
}

pub fn delta_tasks(e: &Engine) -> Vec<WorkerTask> {
    plan_workers(
        &e.project.graph,
        &["png_fuzzer".to_string()],
        &[Sanitizer::Address],
        &WorkerFilter::none(),
        ScanMode::Delta,
        TaskBudgets::unlimited(),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Call depth oracle

/// A random call graph: `n` nodes, edge list, entry nodes for `fz`.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub entries: Vec<usize>,
}

pub fn node(i: usize) -> String {
    format!("f{i:03}")
}

impl RandomGraph {
    pub fn generate(rng: &mut impl Rng, max_nodes: usize, max_entries: usize) -> Self {
        let n = rng.gen_range(1..=max_nodes);
        let m = rng.gen_range(0..=n * 3);
        let edges = (0..m).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
        let k = rng.gen_range(1..=max_entries.min(n));
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        RandomGraph { n, edges, entries: all[..k].to_vec() }
    }

    pub fn build(&self) -> CallGraph {
        let mut callees: Vec<Vec<String>> = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            callees[a].push(node(b));
        }
        let mut builder = CallGraph::builder();
        for (i, c) in callees.iter().enumerate() {
            let refs: Vec<&str> = c.iter().map(String::as_str).collect();
            builder = builder.function(&node(i), &refs);
        }
        for &e in &self.entries {
            builder = builder.entry("fz", &node(e));
        }
        builder.build().unwrap()
    }

    /// Unit-weight Bellman-Ford relaxation from the entries.
    pub fn oracle_depths(&self) -> BTreeMap<FunctionId, u32> {
        let mut dist: Vec<Option<u32>> = vec![None; self.n];
        for &e in &self.entries {
            dist[e] = Some(1);
        }
        loop {
            let mut changed = false;
            for &(a, b) in &self.edges {
                if let Some(da) = dist[a] {
                    if dist[b].is_none_or(|db| da + 1 < db) {
                        dist[b] = Some(da + 1);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        dist.iter().enumerate().filter_map(|(i, d)| d.map(|d| (FunctionId::new(node(i)), d))).collect()
    }
}

/// Checks `count` random graphs; returns the first mismatch description.
pub fn depth_oracle_mismatch(seed: u64, count: usize) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..count {
        let g = RandomGraph::generate(&mut rng, 200, 4);
        let got = g.build().compute_depths("fz").unwrap();
        if got != g.oracle_depths() {
            return Some(format!("case {case}: n={} entries={:?}", g.n, g.entries));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Scheduling oracle

pub const SCHED_FUNCTIONS: [&str; 10] = ["e", "a", "b", "c", "d", "f", "g", "h", "i", "j"];
const SCHED_EDGES: [(&str, &[&str]); 10] = [
    ("e", &["a", "b"]),
    ("a", &["c", "d"]),
    ("b", &["d", "f"]),
    ("c", &["g"]),
    ("d", &["h"]),
    ("f", &["i"]),
    ("g", &["j"]),
    ("h", &["i"]),
    ("i", &[]),
    ("j", &[]),
];

pub fn sched_graph() -> Arc<CallGraph> {
    let mut b = CallGraph::builder();
    for (f, callees) in SCHED_EDGES {
        b = b.function(f, callees);
    }
    Arc::new(b.entry("fz", "e").build().unwrap())
}

pub fn sched_directions() -> [Direction; 2] {
    let d = |name: &str, entry: &[&str], core: &[&str], risk| Direction {
        name: name.into(),
        entry_functions: entry.iter().map(|s| s.to_string()).collect(),
        core_functions: core.iter().map(|s| s.to_string()).collect(),
        risk_level: risk,
        risk_reason: String::new(),
    };
    [d("left", &["a"], &["c"], RiskLevel::High), d("right", &["b"], &["h"], RiskLevel::Medium)]
}

fn oracle_closure(from: &str) -> BTreeSet<String> {
    let adj: BTreeMap<&str, &[&str]> = SCHED_EDGES.into_iter().collect();
    let mut seen = BTreeSet::new();
    let mut q = VecDeque::from([from.to_string()]);
    while let Some(x) = q.pop_front() {
        if seen.insert(x.clone()) {
            q.extend(adj[x.as_str()].iter().map(|s| s.to_string()));
        }
    }
    seen
}

fn oracle_depth(f: &str) -> u32 {
    let adj: BTreeMap<&str, &[&str]> = SCHED_EDGES.into_iter().collect();
    let mut dist = BTreeMap::from([("e", 1u32)]);
    let mut q = VecDeque::from(["e"]);
    while let Some(x) = q.pop_front() {
        for &c in adj[x] {
            if !dist.contains_key(c) {
                dist.insert(c, dist[x] + 1);
                q.push_back(c);
            }
        }
    }
    dist[f]
}

/// Reference model of the pick order over the two directions.
struct SchedModel {
    core: Vec<BTreeSet<String>>,
    general: Vec<BTreeSet<String>>,
    analyzed: BTreeSet<String>,
    picked_by: BTreeMap<String, BTreeSet<usize>>,
    revisits: BTreeMap<String, u32>,
    max_revisits: u32,
}

impl SchedModel {
    fn candidates(&self) -> Vec<(u8, u32, String, usize)> {
        let mut out = Vec::new();
        for slot in 0..self.core.len() {
            for (f, core) in self.core[slot].iter().map(|f| (f, true)).chain(self.general[slot].iter().map(|f| (f, false))) {
                if self.picked_by.get(f).is_some_and(|s| s.contains(&slot)) {
                    continue;
                }
                let analyzed = self.analyzed.contains(f);
                if analyzed && self.revisits.get(f).copied().unwrap_or(0) >= self.max_revisits {
                    continue;
                }
                let prio = if core { 1 } else { 3 } + u8::from(analyzed);
                out.push((prio, oracle_depth(f), f.clone(), slot));
            }
        }
        out
    }

    fn pick(&mut self) -> Option<(u8, u32, String, usize)> {
        let best = self.candidates().into_iter().min()?;
        if self.analyzed.contains(&best.2) {
            *self.revisits.entry(best.2.clone()).or_default() += 1;
        } else {
            self.analyzed.insert(best.2.clone());
        }
        self.picked_by.entry(best.2.clone()).or_default().insert(best.3);
        Some(best)
    }
}

/// Runs the scheduler against the model for one configuration; returns the
/// number of picks or a description of the first disagreement.
pub fn check_schedule(pre_analyzed: u16, max_revisits: u32, reversed: bool) -> Result<usize, String> {
    let graph = sched_graph();
    let analyzed = AnalyzedSet::new();
    let mut pre = BTreeSet::new();
    for (i, f) in SCHED_FUNCTIONS.iter().enumerate() {
        if pre_analyzed & (1 << i) != 0 {
            analyzed.test_and_set(&FunctionId::new(*f));
            pre.insert(f.to_string());
        }
    }
    let mut dirs = sched_directions().to_vec();
    if reversed {
        dirs.reverse();
    }
    let mut s = Scheduler::new("fz", graph, analyzed).with_max_revisits(max_revisits);
    let mut model = SchedModel {
        core: Vec::new(),
        general: Vec::new(),
        analyzed: pre,
        picked_by: BTreeMap::new(),
        revisits: BTreeMap::new(),
        max_revisits,
    };
    for d in &dirs {
        s.register_direction(d.clone());
        let core: BTreeSet<String> = d.entry_functions.iter().chain(&d.core_functions).cloned().collect();
        let general: BTreeSet<String> = d
            .entry_functions
            .iter()
            .flat_map(|e| oracle_closure(e))
            .filter(|f| !core.contains(f))
            .collect();
        model.core.push(core);
        model.general.push(general);
    }
    let mut picks = 0;
    loop {
        let before = model.candidates();
        let expected = model.pick();
        let got: Option<Pick> = s.next_function();
        match (expected, got) {
            (None, None) => return Ok(picks),
            (Some(exp), Some(p)) => {
                let want_dir = dirs[exp.3].name.clone();
                if p.function.as_str() != exp.2
                    || p.priority.number() != exp.0
                    || p.depth != Some(exp.1)
                    || p.direction.as_deref() != Some(want_dir.as_str())
                {
                    return Err(format!("pick {picks}: expected {exp:?}, got {p:?}"));
                }
                if p.priority == Priority::GeneralUnanalyzed && before.iter().any(|c| c.0 == 1) {
                    return Err(format!("pick {picks}: priority 3 while a priority 1 candidate exists"));
                }
                picks += 1;
            }
            (e, g) => return Err(format!("pick {picks}: expected {e:?}, got {g:?}")),
        }
    }
}

/// Every pre-analyzed subset, revisit cap 0..=2, both registration orders.
pub fn exhaustive_schedule_check() -> Result<usize, String> {
    let mut total = 0;
    for mask in 0..(1u16 << SCHED_FUNCTIONS.len()) {
        for max_revisits in 0..=2 {
            for reversed in [false, true] {
                total += check_schedule(mask, max_revisits, reversed)
                    .map_err(|e| format!("mask {mask:#05x} revisits {max_revisits} reversed {reversed}: {e}"))?;
            }
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Dedup algebra

/// One generated candidate plus the cluster it was drawn from.
#[derive(Debug, Clone)]
pub struct ClusterCandidate {
    pub cluster: (usize, usize, usize),
    pub candidate: SpCandidate,
}

const DEDUP_FUNCTIONS: [&str; 5] = ["parse_header", "read_chunk", "copy_row", "decode_name", "store_text"];
const DEDUP_TYPES: [&str; 3] = ["heap-buffer-overflow", "use-after-free", "integer-overflow"];

pub fn dedup_graph() -> CallGraph {
    let mut b = CallGraph::builder().function("main", &DEDUP_FUNCTIONS);
    for f in DEDUP_FUNCTIONS {
        b = b.function(f, &[]);
    }
    b.entry("fz", "main").build().unwrap()
}

/// Descriptions in one cluster share ten tokens and add at most one of
/// their own (pairwise Jaccard >= 10/12); clusters share none.
pub fn cluster_candidates(seed: u64, count: usize) -> Vec<ClusterCandidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fuzzers = ["fa", "fb", "fc"];
    (0..count)
        .map(|_| {
            let fi = rng.gen_range(0..DEDUP_FUNCTIONS.len());
            let ti = rng.gen_range(0..DEDUP_TYPES.len());
            let ci = rng.gen_range(0..3);
            let mut words: Vec<String> = (0..10).map(|w| format!("k{fi}t{ti}c{ci}w{w}")).collect();
            let variant = rng.gen_range(0..6);
            if variant > 0 {
                words.push(format!("extra{variant}"));
            }
            let description = format!("when the loop {}", words.join(" "));
            let source = SpSource::new(fuzzers[rng.gen_range(0..3)], Sanitizer::ALL[rng.gen_range(0..3)]);
            let score = f64::from(rng.gen_range(30..=100)) / 100.0;
            let candidate = SpCandidate::new(
                FunctionId::new(DEDUP_FUNCTIONS[fi]),
                source,
                description,
                DEDUP_TYPES[ti].parse::<VulnType>().unwrap(),
                score,
            )
            .unwrap()
            .with_importance(rng.gen_range(0..4));
            ClusterCandidate { cluster: (fi, ti, ci), candidate }
        })
        .collect()
}

/// Order-free view of a store: per point, its key, shared cluster tokens,
/// sources, score and importance.
pub type Canonical = BTreeSet<(String, String, BTreeSet<String>, BTreeSet<SpSource>, u64, u8)>;

pub fn canonical(store: &SpStore) -> Canonical {
    store
        .points()
        .map(|p| {
            let shared: BTreeSet<String> =
                token_set(&p.description).into_iter().filter(|t| t.starts_with('k')).collect();
            (
                p.function.to_string(),
                p.vuln_type.to_string(),
                shared,
                p.sources.clone(),
                (p.score * 100.0).round() as u64,
                p.importance,
            )
        })
        .collect()
}

/// Expected view, computed by grouping candidates by cluster.
pub fn expected_canonical(cands: &[ClusterCandidate]) -> Canonical {
    let mut groups: BTreeMap<(usize, usize, usize), (SpCandidate, BTreeSet<SpSource>, u64, u8)> = BTreeMap::new();
    for c in cands {
        let s = (c.candidate.score * 100.0).round() as u64;
        let e = groups
            .entry(c.cluster)
            .or_insert_with(|| (c.candidate.clone(), BTreeSet::new(), 0, 0));
        e.1.insert(c.candidate.source.clone());
        e.2 = e.2.max(s);
        e.3 = e.3.max(c.candidate.importance);
    }
    groups
        .into_values()
        .map(|(c, sources, score, imp)| {
            let shared = token_set(&c.description).into_iter().filter(|t| t.starts_with('k')).collect();
            (c.function.to_string(), c.vuln_type.to_string(), shared, sources, score, imp)
        })
        .collect()
}

pub fn insert_all(graph: &CallGraph, cands: &[ClusterCandidate]) -> SpStore {
    let mut store = SpStore::new();
    let judge = JaccardJudge::default();
    for c in cands {
        store.submit(graph, c.candidate.clone(), &judge).unwrap();
    }
    store
}

/// Inserts `count` candidates in `orders` shuffled orders; returns a
/// description of the first order whose store differs from the grouping.
pub fn dedup_order_mismatch(seed: u64, count: usize, orders: usize) -> Option<String> {
    let graph = dedup_graph();
    let cands = cluster_candidates(seed, count);
    let want = expected_canonical(&cands);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for o in 0..orders {
        let mut shuffled = cands.clone();
        shuffled.shuffle(&mut rng);
        let store = insert_all(&graph, &shuffled);
        if store.submitted() != count as u64 {
            return Some(format!("order {o}: submitted {} of {count}", store.submitted()));
        }
        let got = canonical(&store);
        if got != want {
            return Some(format!("order {o}: {} points, expected {}", got.len(), want.len()));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Shared store stress

#[derive(Debug, Default)]
pub struct StressResult {
    pub submits: u64,
    pub verify_ok: u64,
    pub problems: Vec<String>,
}

/// `threads` workers interleave `ops` operations (submits and verification
/// attempts) on one shared store, then the store is checked for lost
/// updates.
pub fn store_stress(seed: u64, threads: usize, ops: usize) -> StressResult {
    let graph = Arc::new(dedup_graph());
    let store = SharedSpStore::new();
    let cands = cluster_candidates(seed, ops);
    let per = ops.div_ceil(threads);
    let results: Vec<(u64, u64, Vec<(ClusterCandidate, DedupOutcome)>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = cands
            .chunks(per)
            .enumerate()
            .map(|(t, chunk)| {
                let store = store.clone();
                let graph = graph.clone();
                scope.spawn(move || {
                    let judge = JaccardJudge::default();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
                    let (mut submits, mut verified) = (0, 0);
                    let mut seen: Vec<(ClusterCandidate, DedupOutcome)> = Vec::new();
                    for c in chunk {
                        if !seen.is_empty() && rng.gen_bool(0.25) {
                            let id = seen[rng.gen_range(0..seen.len())].1.id().clone();
                            if store.lock().apply_verification(&id, Verification::tp()).is_ok() {
                                verified += 1;
                            }
                            std::thread::yield_now();
                        }
                        let outcome = store.lock().submit(&graph, c.candidate.clone(), &judge).unwrap();
                        submits += 1;
                        seen.push((c.clone(), outcome));
                    }
                    (submits, verified, seen)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let snap = store.snapshot();
    let mut r = StressResult::default();
    let mut cluster_ids: BTreeMap<(usize, usize, usize), BTreeSet<String>> = BTreeMap::new();
    for (s, v, seen) in &results {
        r.submits += s;
        r.verify_ok += v;
        for (c, outcome) in seen {
            cluster_ids.entry(c.cluster).or_default().insert(outcome.id().to_string());
            match snap.get(outcome.id()) {
                Some(p) => {
                    if !p.sources.contains(&c.candidate.source) {
                        r.problems.push(format!("{}: lost source {:?}", outcome.id(), c.candidate.source));
                    }
                    if p.score < c.candidate.score {
                        r.problems.push(format!("{}: score {} below merged {}", outcome.id(), p.score, c.candidate.score));
                    }
                }
                None => r.problems.push(format!("{} missing", outcome.id())),
            }
        }
    }
    if snap.submitted() != r.submits {
        r.problems.push(format!("store counted {} submits, workers made {}", snap.submitted(), r.submits));
    }
    let verified = snap.points().filter(|p| p.is_verified).count() as u64;
    if verified != r.verify_ok {
        r.problems.push(format!("{verified} verified points but {} successful verifications", r.verify_ok));
    }
    for (cluster, ids) in &cluster_ids {
        if ids.len() != 1 {
            r.problems.push(format!("cluster {cluster:?} split over {ids:?}"));
        }
    }
    if snap.len() != cluster_ids.len() {
        r.problems.push(format!("{} points for {} clusters", snap.len(), cluster_ids.len()));
    }
    let want: Vec<String> = (1..=snap.len()).map(|i| format!("sp-{i:06}")).collect();
    let got: Vec<String> = snap.points().map(|p| p.id.to_string()).collect();
    if got != want {
        r.problems.push("point ids are not contiguous".into());
    }
    r
}
