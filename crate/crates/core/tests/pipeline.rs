mod support;

use std::collections::{BTreeMap, BTreeSet};

use spscan::agentcore::scripted::FailureKind;
use spscan::agentcore::AgentRole;
use spscan::callgraph::FunctionId;
use spscan::pipeline::{TaskBudgets, TaskState};

use support::*;

fn assert_reproducible(e: &spscan::pipeline::Engine) {
    assert_eq!(irreproducible(e), Vec::<String>::new());
}

#[test]
fn full_fixture_suite_yields_five_tagged_reports() {
    let (e, out) = full_scan(7, false);
    assert!(out.iter().all(|o| o.task.state == TaskState::Done), "{:?}", out.iter().map(|o| &o.task).collect::<Vec<_>>());
    assert_eq!(tags(&e), expected_tags());
    assert_eq!(out.iter().map(|o| o.reports.len()).sum::<usize>(), 5);
    assert_reproducible(&e);
}

#[test]
fn fixed_seed_runs_are_identical() {
    let (a, oa) = full_scan(11, false);
    let (b, ob) = full_scan(11, false);
    let dump = |e: &spscan::pipeline::Engine| -> Vec<(String, Vec<u8>, String)> {
        let book = e.project.reports.lock().unwrap();
        book.reports().map(|r| (r.id.clone(), book.pov(&r.pov_id).unwrap().blob.clone(), r.to_json())).collect()
    };
    assert_eq!(dump(&a), dump(&b));
    for (x, y) in oa.iter().zip(&ob) {
        assert_eq!(x.task.metrics, y.task.metrics);
        assert_eq!(x.events, y.events);
        assert_eq!(x.global_corpus.fingerprints().collect::<Vec<_>>(), y.global_corpus.fingerprints().collect::<Vec<_>>());
    }
    assert_eq!(a.project.store.snapshot(), b.project.store.snapshot());
}

#[test]
fn report_set_holds_across_seeds() {
    for seed in [0, 1, 42, 1234] {
        let (e, _) = full_scan(seed, false);
        assert_eq!(tags(&e), expected_tags(), "seed {seed}");
        assert_reproducible(&e);
    }
}

#[test]
fn parallel_workers_share_one_store_and_keep_corpora_apart() {
    let (e, out) = full_scan(7, true);
    assert_eq!(tags(&e), expected_tags());
    assert_reproducible(&e);
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for o in &out {
        assert!(o.global_corpus.is_consistent());
        for fp in o.global_corpus.fingerprints() {
            assert!(seen.insert(fp.to_string()), "fingerprint {fp} shared between workers");
        }
    }
    let snap = e.project.store.snapshot();
    let ids: BTreeSet<_> = snap.points().map(|p| p.id.clone()).collect();
    assert_eq!(ids.len(), snap.points().count());
    let total: u64 = out.iter().map(|o| o.task.metrics.sp_dedup).sum();
    assert_eq!(total as usize, snap.points().filter(|p| p.origin_task.is_some()).count());
}

#[test]
fn metrics_identities_hold_for_every_worker() {
    for parallel in [false, true] {
        let (_, out) = full_scan(3, parallel);
        for o in &out {
            let m = &o.task.metrics;
            assert!(m.identities_hold(), "{m:?}");
            assert!(m.sp_total >= m.sp_dedup);
            assert_eq!(m.sp_dedup, m.tp + m.fp + m.unverified);
            assert_eq!(m.reports as usize, o.reports.len());
            assert_eq!(m.agent_runs as usize, o.agent_runs.len());
        }
    }
}

#[test]
fn duplicate_candidate_merges_into_the_first_point() {
    let (e, out) = full_scan(7, false);
    let png = out.iter().find(|o| o.task.fuzzer == "png_fuzzer").unwrap();
    assert_eq!(png.task.metrics.sp_total, 2);
    assert_eq!(png.task.metrics.sp_dedup, 1);
    let snap = e.project.store.snapshot();
    let row = snap.points().find(|p| p.function.as_str() == "png_read_row" && p.origin_task.is_some()).unwrap();
    assert!(row.is_real);
    assert_eq!(row.score, 0.9);
}

#[test]
fn zero_token_budget_times_out_without_reports() {
    let budgets = TaskBudgets { tokens: Some(0), ..TaskBudgets::unlimited() };
    let (e, out) = full_scan_with(fixture_scenario(), 7, false, budgets);
    for o in &out {
        assert_eq!(o.task.state, TaskState::Timeout, "{}", o.task.id);
        assert_eq!(o.task.metrics.tokens, 0);
        assert!(o.agent_runs.is_empty());
    }
    assert!(e.project.reports.lock().unwrap().is_empty());
}

#[test]
fn small_token_budget_trips_within_one_turn() {
    let budgets = TaskBudgets { tokens: Some(1_500), ..TaskBudgets::unlimited() };
    let (_, out) = full_scan_with(fixture_scenario(), 7, false, budgets);
    for o in &out {
        assert_eq!(o.task.state, TaskState::Timeout, "{}", o.task.id);
        let last_turn = o.agent_runs.iter().map(|r| r.tokens).max().unwrap_or(0);
        assert!(o.task.metrics.tokens <= 1_500 + last_turn, "{:?}", o.task.metrics);
    }
}

#[test]
fn missing_directions_fall_back_to_the_whole_subgraph() {
    let mut sc = fixture_scenario();
    sc.scripts.retain(|s| s.role != AgentRole::DirectionGenerator);
    let (e, out) = full_scan_with(sc, 7, false, TaskBudgets::unlimited());
    for o in &out {
        assert_eq!(o.task.state, TaskState::Done);
        assert!(o.events.iter().any(|ev| ev.contains("whole reachable subgraph")), "{:?}", o.events);
    }
    let t = tags(&e);
    assert_eq!(t.get("png_read_row").map(String::as_str), Some("S"));
    assert_eq!(t.get("json_parse_number").map(String::as_str), Some("S"));
    assert_reproducible(&e);
}

#[test]
fn verifier_outage_requeues_once_then_leaves_points_unverified() {
    let mut sc = fixture_scenario();
    for m in ["reasoning-primary", "reasoning-fallback"] {
        sc.failures.insert(m.to_string(), FailureKind::Unavailable);
    }
    let (e, out) = full_scan_with(sc, 7, false, TaskBudgets::unlimited());
    let verifier_runs: usize =
        out.iter().flat_map(|o| &o.agent_runs).filter(|r| r.role == AgentRole::SpVerifier).count();
    let candidates: u64 = out.iter().map(|o| o.task.metrics.sp_dedup).sum();
    let auto_fp: u64 = out.iter().map(|o| o.task.metrics.fp).sum();
    assert_eq!(verifier_runs as u64, 2 * (candidates - auto_fp));
    for o in &out {
        assert!(o.task.metrics.identities_hold());
        assert_eq!(o.task.metrics.tp, 0);
    }
    let book = e.project.reports.lock().unwrap();
    assert!(book.reports().all(|r| r.record.discovery_method.tag() == "G"));
}

#[test]
fn delta_diff_resolves_three_functions_two_reachable() {
    let (e, _, spec) = delta_engine();
    let ids = |xs: &[&str]| xs.iter().map(|s| FunctionId::new(*s)).collect::<Vec<_>>();
    assert_eq!(spec.changed, ids(&["png_crc", "png_handle_plte", "png_write_chunk"]));
    assert_eq!(spec.reachable(&e.project.graph, "png_fuzzer"), ids(&["png_crc", "png_handle_plte"]));
    assert_eq!(spec.unresolved.len(), 1);
    assert!(spec.unresolved[0].starts_with("CHANGES"));
    assert_eq!(spec.commit_message, DELTA_MESSAGE);
}

#[test]
fn delta_scan_analyzes_only_reachable_changes() {
    let (e, provider, spec) = delta_engine();
    let t = delta_tasks(&e);
    let out = e.run_tasks(t, Some(&spec), false);
    assert_eq!(out.len(), 1);
    let o = &out[0];
    assert_eq!(o.task.state, TaskState::Done);
    assert_eq!(o.sp_generator_log, vec![FunctionId::new("png_crc"), FunctionId::new("png_handle_plte")]);
    assert!(provider.served().iter().all(|r| r.role != AgentRole::DirectionGenerator));
    let sp_requests: Vec<_> = provider.served().into_iter().filter(|r| r.role == AgentRole::SpGenerator).collect();
    assert!(!sp_requests.is_empty());
    for r in &sp_requests {
        assert!(r.request.messages.iter().any(|m| m.content.contains(DELTA_MESSAGE)), "{}", r.session);
    }
    assert!(sp_requests.iter().all(|r| !r.session.ends_with("png_write_chunk")));
    assert_eq!(tags(&e), BTreeMap::from([("png_handle_plte".to_string(), "S".to_string())]));
    assert_reproducible(&e);
    assert!(o.events.iter().any(|ev| ev.contains("CHANGES")), "{:?}", o.events);
}

#[test]
fn delta_task_without_diff_fails() {
    let (e, _, _) = delta_engine();
    let t = delta_tasks(&e);
    let out = e.run_tasks(t, None, false);
    assert_eq!(out[0].task.state, TaskState::Failed);
}
