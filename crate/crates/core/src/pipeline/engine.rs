//! Per-task worker loops for full and delta scans.
//!
//! A worker owns its scheduler, Global fuzzer and PoC sessions. It shares
//! the SP store, the analyzed set and the report book with other workers.
//! Fuzzing runs in cooperative slices between agent steps so a run with a
//! scripted provider and a fixed seed is reproducible.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agentcore::{
    prompts, run_agent, AgentBudgets, AgentOutcome, AgentRole, AgentSeed, AgentSpec, AgentSummarizer, BudgetKind,
    ModelChain, PriceTable, Provider, ProviderRequest, Message, Summarizer, Termination, Tier, ToolRegistry,
    call_with_fallback,
};
use crate::callgraph::{CallGraph, FunctionId};
use crate::directions::{AnalyzedSet, Scheduler};
use crate::fuzzing::{
    attach_crash, literal_tokens, seeds, CrashRecord, Corpus, Fuzzer, FuzzerConfig, PoV, SeedOrigin, SimRunner,
    SimTarget, TargetError, TargetRunner,
};
use crate::spstore::{
    DedupOutcome, DuplicateJudge, JaccardJudge, Sanitizer, SharedSpStore, SpCandidate, SpId, SpSource,
    SuspiciousPoint, Verdict, Verification,
};

use super::diff::DeltaSpec;
use super::plan::{ScanMode, TaskMetrics, TaskState, WorkerTask};
use super::poc::{poc_tools, PocLimits, PocSession};
use super::recipe::GeneratorHook;
use super::report::{make_report, DiscoveryMethod, ReportBook, ReportInput};
use super::tools::{create_sp_tool, direction_tool, lock, query_tools, seed_tool, update_sp_tool, SpSink};

/// Supplies the executable target for a (fuzzer, sanitizer) pair.
pub trait TargetSource: Send + Sync {
    fn runner(&self, fuzzer: &str, sanitizer: Sanitizer) -> Option<Arc<dyn TargetRunner>>;
}

/// Simulated targets keyed by fuzzer name.
#[derive(Debug, Clone, Default)]
pub struct SimTargets {
    targets: BTreeMap<String, SimTarget>,
}

impl SimTargets {
    pub fn new(targets: impl IntoIterator<Item = SimTarget>) -> Self {
        SimTargets { targets: targets.into_iter().map(|t| (t.fuzzer.clone(), t)).collect() }
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TargetError> {
        Ok(Self::new(SimTarget::load_dir(dir)?))
    }

    pub fn fuzzers(&self) -> impl Iterator<Item = &str> {
        self.targets.keys().map(String::as_str)
    }
}

impl TargetSource for SimTargets {
    fn runner(&self, fuzzer: &str, sanitizer: Sanitizer) -> Option<Arc<dyn TargetRunner>> {
        let t = self.targets.get(fuzzer)?.clone();
        Some(Arc::new(SimRunner::new(t).with_sanitizer(sanitizer)))
    }
}

/// Provider and model chains for every tier.
#[derive(Clone)]
pub struct Agents {
    pub provider: Arc<dyn Provider>,
    pub chains: BTreeMap<Tier, ModelChain>,
    /// Ask a seed-generator agent for Global fuzzer seeds in addition to the
    /// literal seeds.
    pub use_seed_agent: bool,
    /// Let a utility-tier agent decide duplicates instead of the Jaccard
    /// rule.
    pub use_dedup_agent: bool,
    /// Compress agent conversations past this many estimated tokens.
    pub context_limit: Option<usize>,
}

pub fn default_chains() -> BTreeMap<Tier, ModelChain> {
    let chain = |tier, models: &[&str]| {
        ModelChain::new(tier, models.iter().map(|m| m.to_string()).collect()).expect("non-empty chain")
    };
    BTreeMap::from([
        (Tier::T1, chain(Tier::T1, &["reasoning-primary", "reasoning-fallback"])),
        (Tier::T2, chain(Tier::T2, &["main-primary", "main-fallback"])),
        (Tier::T3, chain(Tier::T3, &["utility-primary"])),
    ])
}

impl Agents {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Agents { provider, chains: default_chains(), use_seed_agent: true, use_dedup_agent: false, context_limit: None }
    }

    pub fn chain(&self, tier: Tier) -> Option<&ModelChain> {
        self.chains.get(&tier)
    }

    pub fn models(&self) -> impl Iterator<Item = &str> {
        self.chains.values().flat_map(|c| c.models().iter().map(String::as_str))
    }
}

/// Duplicate decisions from a utility-tier model; falls back to the
/// Jaccard rule when the model gives no usable answer.
pub struct AgentJudge {
    provider: Arc<dyn Provider>,
    chain: ModelChain,
    fallback: JaccardJudge,
    tokens: std::sync::atomic::AtomicU64,
}

impl AgentJudge {
    pub fn new(provider: Arc<dyn Provider>, chain: ModelChain) -> Self {
        AgentJudge { provider, chain, fallback: JaccardJudge::default(), tokens: Default::default() }
    }

    pub fn tokens(&self) -> u64 {
        self.tokens.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl DuplicateJudge for AgentJudge {
    fn is_duplicate(&self, existing: &SuspiciousPoint, candidate: &SpCandidate) -> bool {
        let system = prompts::render_system(AgentRole::SpDeduplicator, &BTreeMap::new());
        let user = format!(
            "A ({}, {} in {}): {}\nB ({}, {} in {}): {}",
            existing.id,
            existing.vuln_type,
            existing.function,
            existing.description,
            "candidate",
            candidate.vuln_type,
            candidate.function,
            candidate.description
        );
        let req = ProviderRequest::new(
            AgentRole::SpDeduplicator,
            format!("{}/{}", existing.id, candidate.function),
            vec![Message::system(system), Message::user(user)],
            Vec::new(),
        );
        match call_with_fallback(self.provider.as_ref(), &self.chain, &req) {
            Ok((resp, _)) => {
                let used = resp.usage.map(|u| u.total()).unwrap_or(0);
                self.tokens.fetch_add(used, std::sync::atomic::Ordering::Relaxed);
                let answer = resp.text.to_ascii_lowercase();
                if answer.contains("distinct") {
                    false
                } else if answer.contains("duplicate") {
                    true
                } else {
                    self.fallback.is_duplicate(existing, candidate)
                }
            }
            Err(_) => self.fallback.is_duplicate(existing, candidate),
        }
    }
}

#[derive(Clone)]
pub struct ScanConfig {
    pub rng_seed: u64,
    pub poc: PocLimits,
    /// Global fuzzer iterations per task.
    pub global_iterations: u64,
    /// Global fuzzer iterations run between two scheduler steps.
    pub global_slice: u64,
    pub max_revisits: u32,
    /// Times a verification whose provider failed is queued again.
    pub verify_retries: u32,
    /// Total tool calls allowed per agent run, by role.
    pub tool_call_caps: BTreeMap<AgentRole, u32>,
    pub prices: PriceTable,
    pub generator_hook: Option<Arc<dyn GeneratorHook>>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            rng_seed: 0,
            poc: PocLimits::default(),
            global_iterations: 20_000,
            global_slice: 500,
            max_revisits: 1,
            verify_retries: 1,
            tool_call_caps: BTreeMap::from([
                (AgentRole::DirectionGenerator, 60),
                (AgentRole::SpGenerator, 40),
                (AgentRole::SpVerifier, 40),
                (AgentRole::PocGenerator, 160),
                (AgentRole::Report, 10),
                (AgentRole::SeedGenerator, 20),
            ]),
            prices: PriceTable::new(),
            generator_hook: None,
        }
    }
}

/// State shared by every worker of one scan.
#[derive(Clone)]
pub struct Project {
    pub graph: Arc<CallGraph>,
    pub targets: Arc<dyn TargetSource>,
    pub store: SharedSpStore,
    pub analyzed: AnalyzedSet,
    pub reports: Arc<Mutex<ReportBook>>,
}

impl Project {
    pub fn new(graph: CallGraph, targets: Arc<dyn TargetSource>) -> Self {
        Project {
            graph: Arc::new(graph),
            targets,
            store: SharedSpStore::new(),
            analyzed: AnalyzedSet::new(),
            reports: Arc::new(Mutex::new(ReportBook::new())),
        }
    }
}

/// One agent run, as counted in the task metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRunRecord {
    pub role: AgentRole,
    pub session: String,
    pub tokens: u64,
    pub tool_calls: u64,
    pub termination: Termination,
}

#[derive(Debug, Clone)]
pub struct WorkerOutcome {
    pub task: WorkerTask,
    /// Ids of reports this worker published, in order.
    pub reports: Vec<String>,
    /// Function handed to each SP-generator run, in order.
    pub sp_generator_log: Vec<FunctionId>,
    pub agent_runs: Vec<AgentRunRecord>,
    pub events: Vec<String>,
    pub global_corpus: Corpus,
}

pub struct Engine {
    pub project: Project,
    pub agents: Agents,
    pub config: ScanConfig,
}

impl Engine {
    pub fn new(project: Project, agents: Agents, config: ScanConfig) -> Self {
        Engine { project, agents, config }
    }

    pub fn run_full_scan(&self, task: WorkerTask) -> WorkerOutcome {
        self.run_task(task, None)
    }

    pub fn run_delta_scan(&self, task: WorkerTask, delta: &DeltaSpec) -> WorkerOutcome {
        self.run_task(task, Some(delta))
    }

    /// Runs a task in the mode it was planned for. Delta tasks need `delta`.
    pub fn run_task(&self, mut task: WorkerTask, delta: Option<&DeltaSpec>) -> WorkerOutcome {
        let started = Instant::now();
        task.state = TaskState::Running;
        let runner = self.project.targets.runner(&task.fuzzer, task.sanitizer);
        let mut worker = Worker::new(self, task, runner.clone(), started);
        match (runner, worker.task.mode, delta) {
            _ if worker.task.degenerate => {
                worker.task.state = TaskState::Done;
                worker.event("fuzzer reaches no functions; nothing to scan");
            }
            (None, _, _) => worker.fail(format!("no target for fuzzer `{}`", worker.task.fuzzer)),
            (Some(_), ScanMode::Delta, None) => worker.fail("delta task run without a diff".into()),
            (Some(_), ScanMode::Full, _) => worker.full_scan(),
            (Some(_), ScanMode::Delta, Some(d)) => worker.delta_scan(d),
        }
        worker.finish()
    }

    /// Runs tasks one after another, or on one thread each.
    pub fn run_tasks(&self, tasks: Vec<WorkerTask>, delta: Option<&DeltaSpec>, parallel: bool) -> Vec<WorkerOutcome> {
        if !parallel {
            return tasks.into_iter().map(|t| self.run_task(t, delta)).collect();
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = tasks.into_iter().map(|t| s.spawn(move || self.run_task(t, delta))).collect();
            handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
        })
    }
}

/// Why a worker stopped early.
enum Stop {
    Budget(String),
    Error(String),
}

struct Worker<'e> {
    engine: &'e Engine,
    task: WorkerTask,
    graph: Arc<CallGraph>,
    subgraph: Arc<CallGraph>,
    runner: Option<Arc<dyn TargetRunner>>,
    judge: Arc<dyn DuplicateJudge + Send + Sync>,
    global: Fuzzer,
    global_left: u64,
    started: Instant,
    tokens: u64,
    tool_calls: u64,
    poc_attempts: u64,
    povs: u64,
    sp_fuzz_iterations: u64,
    submissions: u64,
    sp_log: Vec<FunctionId>,
    runs: Vec<AgentRunRecord>,
    events: Vec<String>,
    report_ids: Vec<String>,
    verify_queue: VecDeque<(SpId, u32)>,
    poc_done: BTreeSet<SpId>,
    stop: Option<Stop>,
}

fn mix_seed(base: u64, label: &str) -> u64 {
    let d = Sha256::digest(label.as_bytes());
    base ^ u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl<'e> Worker<'e> {
    fn new(engine: &'e Engine, task: WorkerTask, runner: Option<Arc<dyn TargetRunner>>, started: Instant) -> Self {
        let graph = engine.project.graph.clone();
        let subgraph = Arc::new(graph.reachable_subgraph(&task.fuzzer).unwrap_or_else(|_| (*graph).clone()));
        let judge: Arc<dyn DuplicateJudge + Send + Sync> = match (engine.agents.use_dedup_agent, engine.agents.chain(Tier::T3)) {
            (true, Some(c)) => Arc::new(AgentJudge::new(engine.agents.provider.clone(), c.clone())),
            _ => Arc::new(JaccardJudge::default()),
        };
        let global = Fuzzer::global(FuzzerConfig::new(mix_seed(engine.config.rng_seed, &task.id)));
        Worker {
            engine,
            global_left: engine.config.global_iterations,
            task,
            graph,
            subgraph,
            runner,
            judge,
            global,
            started,
            tokens: 0,
            tool_calls: 0,
            poc_attempts: 0,
            povs: 0,
            sp_fuzz_iterations: 0,
            submissions: 0,
            sp_log: Vec::new(),
            runs: Vec::new(),
            events: Vec::new(),
            report_ids: Vec::new(),
            verify_queue: VecDeque::new(),
            poc_done: BTreeSet::new(),
            stop: None,
        }
    }

    fn event(&mut self, text: impl Into<String>) {
        self.events.push(text.into());
    }

    fn fail(&mut self, why: String) {
        self.event(format!("error: {why}"));
        self.stop = Some(Stop::Error(why));
    }

    fn runner(&self) -> &Arc<dyn TargetRunner> {
        self.runner.as_ref().expect("scan flows run only with a target")
    }

    fn stopped(&self) -> bool {
        self.stop.is_some()
    }

    fn tokens_left(&self) -> Option<u64> {
        self.task.budgets.tokens.map(|c| c.saturating_sub(self.tokens))
    }

    fn wall_left(&self) -> Option<Duration> {
        self.task.budgets.wall_clock().map(|b| b.saturating_sub(self.started.elapsed()))
    }

    /// Records a budget stop when any task budget is spent.
    fn check_budget(&mut self) -> bool {
        if self.stopped() {
            return false;
        }
        if self.tokens_left() == Some(0) {
            self.stop = Some(Stop::Budget("token budget spent".into()));
        } else if self.wall_left() == Some(Duration::ZERO) {
            self.stop = Some(Stop::Budget("wall-clock budget spent".into()));
        }
        !self.stopped()
    }

    fn vars(&self, function: &str, context: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("fuzzer".to_string(), self.task.fuzzer.clone()),
            ("sanitizer".to_string(), self.task.sanitizer.to_string()),
            ("function".to_string(), function.to_string()),
            ("context".to_string(), context.to_string()),
        ])
    }

    fn pair(&self) -> String {
        format!("{}/{}", self.task.fuzzer, self.task.sanitizer)
    }

    /// Runs one agent under the remaining task budget. Returns `None` when
    /// the budget was already spent.
    fn agent(
        &mut self,
        role: AgentRole,
        session: String,
        function: &str,
        context: &str,
        user: String,
        registry: &mut ToolRegistry,
        tool_limits: BTreeMap<String, u32>,
    ) -> Option<AgentOutcome> {
        if !self.check_budget() {
            return None;
        }
        let Some(chain) = self.engine.agents.chain(role.default_tier()).cloned() else {
            self.fail(format!("no model chain for tier {}", role.default_tier()));
            return None;
        };
        let spec = match AgentSpec::new(role, chain) {
            Ok(s) => s.with_tools(registry.names()).with_budgets(AgentBudgets {
                max_tool_calls: self.engine.config.tool_call_caps.get(&role).copied(),
                max_total_tokens: self.tokens_left(),
                max_wall_clock: self.wall_left(),
                tool_limits,
                context_limit: self.engine.agents.context_limit,
            }),
            Err(e) => {
                self.fail(e.to_string());
                return None;
            }
        };
        let seed = AgentSeed {
            system: prompts::render_system(role, &self.vars(function, context)),
            user,
            session: session.clone(),
        };
        let provider = self.engine.agents.provider.as_ref();
        let summarizer = self.engine.agents.chain(Tier::T3).cloned().map(|chain| AgentSummarizer { provider, chain });
        let outcome = match run_agent(&spec, &seed, registry, provider, summarizer.as_ref().map(|s| s as &dyn Summarizer)) {
            Ok(o) => o,
            Err(e) => {
                self.fail(e.to_string());
                return None;
            }
        };
        let tokens = outcome.usage.total();
        self.tokens += tokens;
        self.tool_calls += outcome.log.len() as u64;
        self.runs.push(AgentRunRecord {
            role,
            session,
            tokens,
            tool_calls: outcome.log.len() as u64,
            termination: outcome.termination.clone(),
        });
        match &outcome.termination {
            Termination::BudgetExhausted(BudgetKind::Tokens) => {
                self.stop = Some(Stop::Budget("token budget spent".into()));
            }
            Termination::BudgetExhausted(BudgetKind::WallClock) => {
                self.stop = Some(Stop::Budget("wall-clock budget spent".into()));
            }
            _ => {}
        }
        Some(outcome)
    }

    fn query_registry(&self) -> ToolRegistry {
        let mut r = ToolRegistry::empty();
        for t in query_tools(&self.graph, &self.task.fuzzer) {
            r.insert(t);
        }
        r
    }

    // ---- Global fuzzer ----

    fn fuzz_global(&mut self, iterations: u64) {
        let n = iterations.min(self.global_left);
        if n == 0 {
            return;
        }
        self.global_left -= n;
        let runner = self.runner().clone();
        let found = self.global.run(runner.as_ref(), n);
        self.handle_global_crashes(found);
    }

    fn handle_global_crashes(&mut self, found: Vec<CrashRecord>) {
        for rec in found {
            let runner = self.runner().clone();
            let pov = match PoV::confirm(&rec.blob, runner.as_ref(), self.engine.config.poc.quorum) {
                Ok(p) => p,
                Err(r) => {
                    self.event(format!("global crash {} did not reproduce: {r:?}", rec.key));
                    continue;
                }
            };
            let sp = {
                let mut store = self.engine.project.store.lock();
                let (id, created) = attach_crash(&mut store, &self.task.fuzzer, &rec.key);
                if created {
                    self.events.push(format!("global crash {} filed as synthetic {id}", rec.key));
                }
                match store.record_poc_result(&id, &self.task.fuzzer, Some(pov.id.clone()), true) {
                    Ok(sp) => sp.clone(),
                    Err(e) => {
                        self.events.push(format!("error: recording PoV for {id}: {e}"));
                        continue;
                    }
                }
            };
            self.event(format!("global fuzzer crash {} at iteration {} ({:?} lineage)", rec.key, rec.iteration, rec.lineage));
            self.publish(&sp, &pov, DiscoveryMethod::Global, 0);
        }
    }

    fn seed_global(&mut self, blobs: Vec<Vec<u8>>, tokens: Vec<Vec<u8>>, origin: SeedOrigin) {
        self.global.extend_dictionary(tokens);
        for b in blobs {
            self.global.queue_seed(b, origin);
        }
    }

    /// Seeds from the seed-generator agent, if enabled.
    fn agent_seeds(&mut self, session: String, function: &str, context: &str) -> Vec<Vec<u8>> {
        if !self.engine.agents.use_seed_agent {
            return Vec::new();
        }
        let sink = Arc::new(Mutex::new(Vec::new()));
        let mut reg = self.query_registry();
        reg.insert(seed_tool(sink.clone()));
        let user = format!("Write seeds that reach {function}.");
        self.agent(AgentRole::SeedGenerator, session, function, context, user, &mut reg, BTreeMap::new());
        let seeds = std::mem::take(&mut *lock(&sink));
        seeds
    }

    // ---- stages ----

    fn function_context(&self, id: &FunctionId) -> String {
        let mut ctx = String::new();
        let Some(f) = self.graph.function(id) else {
            return ctx;
        };
        let callers: Vec<&str> = self.graph.callers_of(id).map(FunctionId::as_str).collect();
        let callees: Vec<&str> = self.graph.callees_of(id).iter().map(FunctionId::as_str).collect();
        let _ = writeln!(ctx, "File: {}", f.file_path);
        if let Some(d) = self.graph.depth(id, &self.task.fuzzer) {
            let _ = writeln!(ctx, "Call depth from {}: {d}", self.task.fuzzer);
        }
        let _ = writeln!(ctx, "Callers: {}", if callers.is_empty() { "(none)".into() } else { callers.join(", ") });
        let _ = writeln!(ctx, "Callees: {}", if callees.is_empty() { "(none)".into() } else { callees.join(", ") });
        let _ = write!(ctx, "Source:\n```\n{}\n```", f.source_text);
        ctx
    }

    fn generate_directions(&mut self) -> Arc<Mutex<Scheduler>> {
        let scheduler = Arc::new(Mutex::new(
            Scheduler::new(self.task.fuzzer.clone(), self.subgraph.clone(), self.engine.project.analyzed.clone())
                .with_max_revisits(self.engine.config.max_revisits),
        ));
        let mut reg = self.query_registry();
        reg.insert(direction_tool(scheduler.clone()));
        let ctx = format!("{} functions are reachable.", self.subgraph.len());
        let user = format!("Plan directions for fuzzer {}.", self.task.fuzzer);
        self.agent(AgentRole::DirectionGenerator, self.pair(), "", &ctx, user, &mut reg, BTreeMap::new());
        let directions: Vec<_> = lock(&scheduler).directions().cloned().collect();
        if directions.is_empty() {
            lock(&scheduler).use_whole_subgraph();
            self.event("no directions; scheduling from the whole reachable subgraph");
        }
        for d in &directions {
            self.event(format!("direction `{}` ({})", d.name, d.risk_level));
            let mut blobs = seeds::seed_from_direction(d, &self.subgraph);
            let tokens = seeds::direction_tokens(d, &self.subgraph);
            if !self.stopped() {
                let ctx = format!("Direction `{}`: {}\nEntry functions: {}", d.name, d.risk_reason, d.entry_functions.join(", "));
                let session = format!("{}/{}", self.pair(), d.name);
                let entry = d.entry_functions.first().cloned().unwrap_or_default();
                blobs.extend(self.agent_seeds(session, &entry, &ctx));
            }
            self.seed_global(blobs, tokens, SeedOrigin::Direction);
        }
        scheduler
    }

    fn sink(&self, function: &FunctionId, importance: u8, accepted: Arc<Mutex<Vec<DedupOutcome>>>) -> SpSink {
        SpSink {
            store: self.engine.project.store.clone(),
            graph: self.graph.clone(),
            source: SpSource::new(self.task.fuzzer.clone(), self.task.sanitizer),
            default_function: function.clone(),
            importance,
            task_id: self.task.id.clone(),
            judge: self.judge.clone(),
            accepted,
        }
    }

    /// One SP-generator run on exactly one function.
    fn generate_sps(&mut self, function: &FunctionId, importance: u8, extra_context: &str) {
        let accepted = Arc::new(Mutex::new(Vec::new()));
        let mut reg = self.query_registry();
        reg.insert(create_sp_tool(self.sink(function, importance, accepted.clone())));
        let mut ctx = self.function_context(function);
        if !extra_context.is_empty() {
            ctx = format!("{extra_context}\n\n{ctx}");
        }
        let session = format!("{}/{function}", self.pair());
        let user = format!("Analyze {function}.");
        self.sp_log.push(function.clone());
        self.agent(AgentRole::SpGenerator, session, function.as_str(), &ctx, user, &mut reg, BTreeMap::new());
        let outcomes = std::mem::take(&mut *lock(&accepted));
        self.submissions += outcomes.len() as u64;
        for o in outcomes {
            match o {
                DedupOutcome::Inserted(id) => {
                    self.event(format!("{id} created in {function}"));
                    self.verify_queue.push_back((id, 0));
                }
                DedupOutcome::MergedInto(id) => self.event(format!("candidate in {function} merged into {id}")),
            }
        }
    }

    fn session_for(&self, sp: &SuspiciousPoint) -> String {
        format!("{}/{}/{}", self.pair(), sp.function, sp.vuln_type)
    }

    fn sp_context(&self, sp: &SuspiciousPoint) -> String {
        let mut ctx = format!(
            "Suspicious point {} in {}: {} (score {:.2})\nDescription: {}\n",
            sp.id, sp.function, sp.vuln_type, sp.score, sp.description
        );
        if let Some(g) = &sp.poc_guidance {
            let _ = writeln!(ctx, "PoC guidance: {g}");
        }
        match self.graph.path_to(&self.task.fuzzer, &sp.function) {
            Some(p) => {
                let names: Vec<&str> = p.iter().map(FunctionId::as_str).collect();
                let _ = writeln!(ctx, "Static call path: {}", names.join(" -> "));
            }
            None => {
                let _ = writeln!(ctx, "No static call path from {}; check indirect calls.", self.task.fuzzer);
            }
        }
        ctx.push_str(&self.function_context(&sp.function));
        ctx
    }

    /// Verifies one point this worker created.
    fn verify_sp(&mut self, id: SpId, retries: u32) {
        let Some(sp) = self.engine.project.store.get(&id) else {
            return;
        };
        if sp.is_verified {
            return;
        }
        if !self.task.sanitizer.detects(&sp.vuln_type) {
            let v = Verification::fp().guidance(format!("{} cannot be observed by the {} sanitizer", sp.vuln_type, self.task.sanitizer));
            self.apply(&id, v);
            return;
        }
        let slot = Arc::new(Mutex::new(None));
        let mut reg = self.query_registry();
        reg.insert(update_sp_tool(id.clone(), slot.clone()));
        let ctx = self.sp_context(&sp);
        let user = format!("Verify {id}.");
        let Some(outcome) =
            self.agent(AgentRole::SpVerifier, self.session_for(&sp), sp.function.as_str(), &ctx, user, &mut reg, BTreeMap::new())
        else {
            return;
        };
        let recorded = lock(&slot).take();
        let v = match (recorded, &outcome.termination) {
            (Some(v), _) => v,
            (None, Termination::ProviderFailed(why)) => {
                if retries < self.engine.config.verify_retries {
                    self.event(format!("verifier for {id} failed ({why}); queued again"));
                    self.verify_queue.push_back((id, retries + 1));
                } else {
                    self.event(format!("verifier for {id} failed ({why}); left unverified"));
                }
                return;
            }
            (None, Termination::BudgetExhausted(_)) => return,
            (None, _) => Verification::tp(),
        };
        self.apply(&id, v);
    }

    fn apply(&mut self, id: &SpId, v: Verification) {
        let sp = match self.engine.project.store.lock().apply_verification(id, v) {
            Ok(sp) => sp.clone(),
            Err(e) => {
                self.event(format!("error: verifying {id}: {e}"));
                return;
            }
        };
        self.event(format!("{id} verified {}", if sp.verdict == Verdict::Tp { "tp" } else { "fp" }));
        if sp.verdict == Verdict::Fp {
            self.seed_from_fp(&sp);
        }
    }

    fn seed_from_fp(&mut self, sp: &SuspiciousPoint) {
        let mut blobs = seeds::seed_from_fp(sp, &self.graph).unwrap_or_default();
        let tokens = self.graph.function(&sp.function).map(|f| literal_tokens(&f.source_text)).unwrap_or_default();
        if !self.stopped() {
            let session = format!("{}/fp/{}", self.pair(), sp.function);
            let ctx = self.sp_context(sp);
            blobs.extend(self.agent_seeds(session, sp.function.as_str(), &ctx));
        }
        self.seed_global(blobs, tokens, SeedOrigin::FpSp);
    }

    fn poc_candidates(&self) -> Vec<SpId> {
        let store = self.engine.project.store.lock();
        let source = SpSource::new(self.task.fuzzer.clone(), self.task.sanitizer);
        store
            .poc_queue()
            .into_iter()
            .filter(|id| !self.poc_done.contains(id))
            .filter(|id| store.get(id).is_some_and(|sp| sp.sources.contains(&source) && !sp.is_real))
            .collect()
    }

    fn generate_poc(&mut self, id: SpId) {
        self.poc_done.insert(id.clone());
        let Some(sp) = self.engine.project.store.get(&id) else {
            return;
        };
        if !self.check_budget() {
            return;
        }
        let cfg = &self.engine.config;
        let mut tokens = self.graph.function(&sp.function).map(|f| literal_tokens(&f.source_text)).unwrap_or_default();
        tokens.retain(|t| !t.is_empty());
        let fuzzer = Fuzzer::scoped(FuzzerConfig::new(mix_seed(cfg.rng_seed, id.as_str())).with_dictionary(tokens), Vec::new());
        let session = Arc::new(Mutex::new(PocSession::new(
            sp.clone(),
            cfg.poc,
            self.runner().clone(),
            self.graph.clone(),
            cfg.generator_hook.clone(),
            fuzzer,
        )));
        let mut reg = self.query_registry();
        for t in poc_tools(session.clone()) {
            reg.insert(t);
        }
        let limits = BTreeMap::from([("create_pov".to_string(), cfg.poc.max_attempts)]);
        let ctx = self.sp_context(&sp);
        let user = format!("Build a PoV for {id}.");
        self.agent(AgentRole::PocGenerator, self.session_for(&sp), sp.function.as_str(), &ctx, user, &mut reg, limits);
        drop(reg);
        let s = Arc::try_unwrap(session).map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()));
        let Ok(s) = s else {
            self.event(format!("error: PoC session for {id} still shared"));
            return;
        };
        self.poc_attempts += u64::from(s.attempt_count());
        self.sp_fuzz_iterations += s.background_iterations;
        let mut hit = false;
        for c in &s.crashes {
            let target = {
                let mut store = self.engine.project.store.lock();
                let target = if c.on_target { id.clone() } else { attach_crash(&mut store, &self.task.fuzzer, &c.pov.key()).0 };
                match store.record_poc_result(&target, &self.task.fuzzer, Some(c.pov.id.clone()), true) {
                    Ok(sp) => sp.clone(),
                    Err(e) => {
                        drop(store);
                        self.event(format!("error: recording PoV for {target}: {e}"));
                        continue;
                    }
                }
            };
            hit |= c.on_target;
            self.event(format!(
                "PoC loop for {id}: {} after attempt {}{}",
                c.pov.key(),
                c.attempt,
                if c.from_background { " (background SP fuzzer)" } else { "" }
            ));
            self.publish(&target, &c.pov, DiscoveryMethod::SpFuzzer, c.attempt);
        }
        if !hit {
            if let Err(e) = self.engine.project.store.lock().record_poc_result(&id, &self.task.fuzzer, None, false) {
                self.events.push(format!("error: recording attempt on {id}: {e}"));
            }
            self.event(format!("PoC loop for {id} exhausted after {} attempts", s.attempt_count()));
        }
    }

    /// Refines the description and files the report.
    fn publish(&mut self, sp: &SuspiciousPoint, pov: &PoV, method: DiscoveryMethod, attempts: u32) {
        let key = pov.key();
        let id = super::report::report_id(&key);
        self.povs += 1;
        if lock(&self.engine.project.reports).note_repeat(&id) {
            self.event(format!("{key} already reported as {id}"));
            return;
        }
        let runner = self.runner().clone();
        let crash_output = runner.execute(&pov.blob).map(|r| r.output).unwrap_or_default();
        let mut description = sp.description.clone();
        if !self.stopped() {
            let ctx = format!("{}\nCrash output:\n{crash_output}", self.sp_context(sp));
            let mut reg = ToolRegistry::empty();
            let user = format!("Write the report for {key}.");
            if let Some(o) = self.agent(AgentRole::Report, self.session_for(sp), key.location.as_str(), &ctx, user, &mut reg, BTreeMap::new()) {
                let text = o.final_text.trim();
                if !text.is_empty() {
                    let vars = BTreeMap::from([
                        ("function".to_string(), sp.function.to_string()),
                        ("vuln_type".to_string(), key.vuln_type.to_string()),
                        ("sanitizer".to_string(), key.sanitizer.to_string()),
                        ("fuzzer".to_string(), self.task.fuzzer.clone()),
                        ("description".to_string(), sp.description.clone()),
                        ("sp_id".to_string(), sp.id.to_string()),
                    ]);
                    description = prompts::render(text, &vars);
                }
            }
        }
        let stage = sp.poc_stage.unwrap_or(sp.created_stage);
        let input = ReportInput { method, attempts, description, crash_output, reported_stage: stage };
        match make_report(sp, pov, &self.graph, input) {
            Ok(r) => {
                let id = r.id.clone();
                if lock(&self.engine.project.reports).insert(r, pov.clone()) {
                    self.event(format!("report {id} ({}) for {key}", method.tag()));
                    self.report_ids.push(id);
                }
            }
            Err(e) => self.event(format!("report for {key} refused: {e}")),
        }
    }

    fn drain_verification(&mut self) {
        while let Some((id, retries)) = self.verify_queue.pop_front() {
            if !self.check_budget() {
                return;
            }
            self.verify_sp(id, retries);
        }
    }

    fn drain_poc(&mut self) {
        loop {
            if !self.check_budget() {
                return;
            }
            let Some(id) = self.poc_candidates().into_iter().next() else {
                return;
            };
            self.generate_poc(id);
        }
    }

    fn full_scan(&mut self) {
        if !self.check_budget() {
            return;
        }
        let scheduler = self.generate_directions();
        let slice = self.engine.config.global_slice;
        while self.check_budget() {
            self.fuzz_global(slice);
            let pick = lock(&scheduler).next_function();
            let Some(pick) = pick else {
                break;
            };
            let importance = pick
                .direction
                .as_deref()
                .and_then(|d| lock(&scheduler).direction(d).map(|d| d.risk_level.rank()))
                .unwrap_or(0);
            self.generate_sps(&pick.function, importance, "");
            self.drain_verification();
            self.drain_poc();
        }
        self.wrap_up();
    }

    fn delta_scan(&mut self, delta: &DeltaSpec) {
        for u in &delta.unresolved {
            self.events.push(format!("unresolved hunk: {u}"));
        }
        let targets = delta.reachable(&self.graph, &self.task.fuzzer);
        if targets.is_empty() {
            let w = "no changed function is reachable from this fuzzer".to_string();
            self.task.warnings.push(w.clone());
            self.event(w);
            return;
        }
        let slice = self.engine.config.global_slice;
        for f in targets {
            if !self.check_budget() {
                break;
            }
            self.fuzz_global(slice);
            self.engine.project.analyzed.test_and_set(&f);
            let mut ctx = format!("Commit message:\n{}\n", delta.commit_message);
            if let Some(h) = delta.hunks_by_function.get(&f) {
                let _ = write!(ctx, "\nChange to this function:\n```diff\n{h}```\n");
            }
            self.generate_sps(&f, 0, &ctx);
            self.drain_verification();
            self.drain_poc();
        }
        self.wrap_up();
    }

    fn wrap_up(&mut self) {
        self.drain_verification();
        self.drain_poc();
        if !self.stopped() {
            let left = self.global_left;
            self.fuzz_global(left);
        }
    }

    fn metrics(&self) -> TaskMetrics {
        let store = self.engine.project.store.lock();
        let mut m = TaskMetrics {
            tokens: self.tokens,
            tool_calls: self.tool_calls,
            agent_runs: self.runs.len() as u64,
            sp_total: self.submissions,
            poc_attempts: self.poc_attempts,
            povs: self.povs,
            reports: self.report_ids.len() as u64,
            fuzz_iterations: self.global.iterations() + self.sp_fuzz_iterations,
            ..TaskMetrics::default()
        };
        for sp in store.points().filter(|sp| sp.origin_task.as_deref() == Some(self.task.id.as_str())) {
            m.sp_dedup += 1;
            match (sp.is_verified, sp.verdict) {
                (true, Verdict::Tp) => m.tp += 1,
                (true, _) => m.fp += 1,
                (false, _) => m.unverified += 1,
            }
        }
        m
    }

    fn finish(mut self) -> WorkerOutcome {
        self.task.metrics = self.metrics();
        self.task.wall_ms = self.started.elapsed().as_millis() as u64;
        match self.stop.take() {
            None => self.task.state = TaskState::Done,
            Some(Stop::Budget(why)) => {
                self.task.state = TaskState::Timeout;
                self.task.warnings.push(why);
            }
            Some(Stop::Error(why)) => {
                self.task.state = TaskState::Failed;
                self.task.error = Some(why);
            }
        }
        WorkerOutcome {
            task: self.task,
            reports: self.report_ids,
            sp_generator_log: self.sp_log,
            agent_runs: self.runs,
            events: self.events,
            global_corpus: self.global.corpus().clone(),
        }
    }
}
