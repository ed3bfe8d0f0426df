//! `spscan scan`: plan workers, run them and persist what they produced.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use serde_json::json;
use spscan::agentcore::http::{HttpProvider, API_KEY_ENV};
use spscan::agentcore::{ModelChain, Provider, Scenario, ScriptedProvider, Tier};
use spscan::callgraph::load_call_graph;
use spscan::fuzzing::SimTarget;
use spscan::pipeline::{
    plan_workers, Agents, DeltaSpec, Engine, Project, ScanConfig, SimTargets, TaskBudgets, TaskState, WorkerFilter,
    WorkerOutcome, WorkerTask,
};
use spscan::spstore::Sanitizer;

use crate::config::{Config, UsageError, DEFAULT_TIMEOUT_SECS};
use crate::report::render_report;
use crate::store::{Collection, StoreBackend};

#[derive(Debug, Clone)]
pub struct ScanSummary {
    pub tasks: Vec<WorkerTask>,
    /// Report ids in publication order.
    pub reports: Vec<String>,
}

impl ScanSummary {
    pub fn failed(&self) -> usize {
        self.tasks.iter().filter(|t| t.state == TaskState::Failed).count()
    }
}

fn provider(cfg: &Config) -> Result<Arc<dyn Provider>> {
    if let Some(path) = &cfg.scenario {
        let scenario = Scenario::load(path).with_context(|| format!("loading scenario {}", path.display()))?;
        return Ok(Arc::new(ScriptedProvider::new(scenario)));
    }
    let base = cfg
        .provider
        .base_url
        .clone()
        .ok_or_else(|| UsageError("no provider configured: set [provider] base_url or pass --scenario".into()))?;
    let timeout = Duration::from_secs(cfg.provider.timeout_secs.unwrap_or(DEFAULT_TIMEOUT_SECS));
    Ok(Arc::new(HttpProvider::new(base, std::env::var(API_KEY_ENV).ok(), timeout)?))
}

fn agents(cfg: &Config, provider: Arc<dyn Provider>) -> Result<Agents> {
    let mut agents = Agents::new(provider);
    for (tier, models) in
        [(Tier::T1, &cfg.models.reasoning), (Tier::T2, &cfg.models.main), (Tier::T3, &cfg.models.utility)]
    {
        if let Some(models) = models {
            agents.chains.insert(tier, ModelChain::new(tier, models.clone())?);
        }
    }
    if let Some(v) = cfg.engine.seed_agent {
        agents.use_seed_agent = v;
    }
    if let Some(v) = cfg.engine.dedup_agent {
        agents.use_dedup_agent = v;
    }
    Ok(agents)
}

fn engine_config(cfg: &Config) -> ScanConfig {
    let d = ScanConfig::default();
    let e = &cfg.engine;
    ScanConfig {
        rng_seed: cfg.seed,
        global_iterations: e.global_iterations.unwrap_or(d.global_iterations),
        global_slice: e.global_slice.unwrap_or(d.global_slice),
        max_revisits: e.max_revisits.unwrap_or(d.max_revisits),
        verify_retries: e.verify_retries.unwrap_or(d.verify_retries),
        prices: cfg.prices.clone(),
        ..d
    }
}

/// Builds the engine and the task list without running anything.
pub fn prepare(cfg: &Config) -> Result<(Engine, Vec<WorkerTask>, Option<DeltaSpec>)> {
    let graph = load_call_graph(&cfg.export)
        .with_context(|| format!("loading call-graph export {}", cfg.export.display()))?;
    let targets = SimTarget::load_dir(&cfg.targets)
        .with_context(|| format!("loading targets from {}", cfg.targets.display()))?;
    let declared: BTreeSet<Sanitizer> = targets.iter().map(|t| t.sanitizer).collect();

    let agents = agents(cfg, provider(cfg)?)?;
    let budgets = TaskBudgets::from_scan_budget(cfg.budget, &cfg.prices, agents.models())?;
    let delta = match &cfg.diff {
        Some(path) if cfg.mode == spscan::pipeline::ScanMode::Delta => {
            let text = fs::read_to_string(path).with_context(|| format!("reading diff {}", path.display()))?;
            Some(DeltaSpec::resolve(&text, None, &graph).with_context(|| format!("parsing diff {}", path.display()))?)
        }
        _ => None,
    };

    let fuzzers: Vec<String> = graph.fuzzers().map(str::to_string).collect();
    let sanitizers: Vec<Sanitizer> =
        if cfg.sanitizers.is_empty() { declared.into_iter().collect() } else { cfg.sanitizers.clone() };
    let filter = WorkerFilter {
        fuzzers: cfg.fuzzers.iter().cloned().collect(),
        sanitizers: cfg.sanitizers.iter().copied().collect(),
    };
    for f in &filter.fuzzers {
        if !graph.has_fuzzer(f) {
            return Err(UsageError(format!("unknown fuzzer `{f}`")).into());
        }
    }
    let tasks = plan_workers(&graph, &fuzzers, &sanitizers, &filter, cfg.mode, budgets)
        .map_err(|e| UsageError(e.to_string()))?;

    let project = Project::new(graph, Arc::new(SimTargets::new(targets)));
    Ok((Engine::new(project, agents, engine_config(cfg)), tasks, delta))
}

/// Runs a scan end to end, writing records to `store` and files under
/// `cfg.out`.
pub fn run_scan(cfg: &Config, store: &dyn StoreBackend) -> Result<ScanSummary> {
    let (engine, tasks, delta) = prepare(cfg)?;
    for t in &tasks {
        store.put(Collection::Tasks, &t.id, &serde_json::to_value(t)?)?;
    }
    let outcomes = engine.run_tasks(tasks, delta.as_ref(), cfg.parallel);
    persist(cfg, &engine, &outcomes, store)?;
    let reports = outcomes.iter().flat_map(|o| o.reports.iter().cloned()).collect();
    Ok(ScanSummary { tasks: outcomes.into_iter().map(|o| o.task).collect(), reports })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn persist(cfg: &Config, engine: &Engine, outcomes: &[WorkerOutcome], store: &dyn StoreBackend) -> Result<()> {
    for o in outcomes {
        let t = &o.task;
        store.put(Collection::Tasks, &t.id, &serde_json::to_value(t)?)?;
        store.put(
            Collection::Metrics,
            &t.id,
            &json!({
                "task": t.id,
                "metrics": t.metrics,
                "wall_ms": t.wall_ms,
                "agent_runs": o.agent_runs,
            }),
        )?;
        let mut log = o.events.join("\n");
        log.push('\n');
        write_file(&cfg.out.join("logs").join(format!("{}.log", t.id)), log.as_bytes())?;
        if let Some(dir) = &cfg.corpus_dir {
            let dir = dir.join(&t.id);
            o.global_corpus.persist(&dir).with_context(|| format!("writing corpus {}", dir.display()))?;
        }
    }

    for sp in engine.project.store.snapshot().points() {
        store.put(Collection::Sps, sp.id.as_str(), &serde_json::to_value(sp)?)?;
    }

    let book = engine.project.reports.lock().map_err(|_| anyhow!("report book poisoned"))?.clone();
    for r in book.reports() {
        let pov = book.pov(&r.pov_id).ok_or_else(|| anyhow!("report {} lost its PoV {}", r.id, r.pov_id))?;
        store.put(Collection::Povs, &pov.id, &serde_json::to_value(pov)?)?;
        write_file(&cfg.out.join(&r.record.poc_blob_path), &pov.blob)?;
        store.put(Collection::Reports, &r.id, &serde_json::to_value(r)?)?;
        render_report(store, &r.id, &reports_dir(&cfg.out))?;
    }
    Ok(())
}

pub fn reports_dir(out: &Path) -> PathBuf {
    out.join("reports")
}

pub fn store_dir(out: &Path) -> PathBuf {
    out.join("store")
}
