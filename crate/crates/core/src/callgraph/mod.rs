//! Static-analysis facts: function metadata, the global call graph, fuzzer
//! reachability and call depths.
//!
//! The graph is built once from an analysis export (one JSON object per line)
//! and is immutable afterwards, so workers and agents share it through an
//! `Arc` without locking.

mod query;

pub use query::{Query, QueryResult, QueryStatus};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Stable identifier of a function in the analysis export.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FunctionId(String);

impl FunctionId {
    pub fn new(id: impl Into<String>) -> Self {
        FunctionId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FunctionId {
    fn from(s: &str) -> Self {
        FunctionId(s.to_string())
    }
}

impl From<String> for FunctionId {
    fn from(s: String) -> Self {
        FunctionId(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate function id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("unknown fuzzer `{0}`")]
    UnknownFuzzer(String),
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Metadata for one function.
///
/// `call_depth` holds an entry for a fuzzer exactly when the function is
/// reachable from that fuzzer's entry functions along call edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub id: FunctionId,
    pub name: String,
    pub file_path: String,
    pub source_text: String,
    pub callees: Vec<FunctionId>,
    pub reached_by_fuzzers: BTreeSet<String>,
    pub call_depth: BTreeMap<String, u32>,
    /// Callee stub with no body in the export.
    pub external: bool,
}

impl FunctionRecord {
    fn stub(id: FunctionId) -> Self {
        FunctionRecord {
            name: id.as_str().to_string(),
            id,
            file_path: String::new(),
            source_text: String::new(),
            callees: Vec::new(),
            reached_by_fuzzers: BTreeSet::new(),
            call_depth: BTreeMap::new(),
            external: true,
        }
    }
}

/// One line of the analysis export.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRecord {
    pub id: String,
    pub name: String,
    pub file: String,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub callees: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reached_by_fuzzers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub is_entry_for: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallGraph {
    functions: BTreeMap<FunctionId, FunctionRecord>,
    fuzzer_entries: BTreeMap<String, Vec<FunctionId>>,
    callers: BTreeMap<FunctionId, BTreeSet<FunctionId>>,
    warnings: BTreeSet<String>,
}

/// Reads an export file from disk.
pub fn load_call_graph(path: impl AsRef<Path>) -> Result<CallGraph, GraphError> {
    let file = std::fs::File::open(path)?;
    CallGraph::from_export(std::io::BufReader::new(file))
}

impl CallGraph {
    /// Parses a line-delimited export. Blank lines are ignored; line numbers
    /// in errors are 1-based.
    pub fn from_export(reader: impl BufRead) -> Result<CallGraph, GraphError> {
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ExportRecord =
                serde_json::from_str(&line).map_err(|e| GraphError::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            records.push((idx + 1, record));
        }
        Self::from_records(records)
    }

    pub fn from_export_str(text: &str) -> Result<CallGraph, GraphError> {
        Self::from_export(text.as_bytes())
    }

    fn from_records(records: Vec<(usize, ExportRecord)>) -> Result<CallGraph, GraphError> {
        let mut functions = BTreeMap::new();
        let mut fuzzer_entries: BTreeMap<String, Vec<FunctionId>> = BTreeMap::new();
        let mut annotated: BTreeMap<FunctionId, Vec<String>> = BTreeMap::new();

        for (line, rec) in records {
            let id = FunctionId::new(rec.id.clone());
            if rec.id.is_empty() {
                return Err(GraphError::Parse {
                    line,
                    message: "empty function id".into(),
                });
            }
            if functions.contains_key(&id) {
                return Err(GraphError::DuplicateId { line, id: rec.id });
            }
            for fuzzer in &rec.is_entry_for {
                fuzzer_entries
                    .entry(fuzzer.clone())
                    .or_default()
                    .push(id.clone());
            }
            if let Some(fuzzers) = rec.reached_by_fuzzers {
                annotated.insert(id.clone(), fuzzers);
            }
            functions.insert(
                id.clone(),
                FunctionRecord {
                    id,
                    name: rec.name,
                    file_path: rec.file,
                    source_text: rec.source,
                    callees: rec.callees.into_iter().map(FunctionId::new).collect(),
                    reached_by_fuzzers: BTreeSet::new(),
                    call_depth: BTreeMap::new(),
                    external: false,
                },
            );
        }

        // Annotation-only fuzzers are known fuzzers with no entry functions.
        for fuzzers in annotated.values() {
            for f in fuzzers {
                fuzzer_entries.entry(f.clone()).or_default();
            }
        }

        let mut graph = CallGraph {
            functions,
            fuzzer_entries,
            callers: BTreeMap::new(),
            warnings: BTreeSet::new(),
        };
        graph.add_external_stubs();
        graph.rebuild_callers();

        for (id, fuzzers) in annotated {
            if let Some(rec) = graph.functions.get_mut(&id) {
                rec.reached_by_fuzzers.extend(fuzzers);
            }
        }
        graph.annotate_reachability();
        Ok(graph)
    }

    /// Starts a graph assembled in code rather than parsed from an export.
    pub fn builder() -> GraphBuilder {
        GraphBuilder::default()
    }

    fn add_external_stubs(&mut self) {
        let dangling: BTreeSet<FunctionId> = self
            .functions
            .values()
            .flat_map(|f| f.callees.iter())
            .filter(|c| !self.functions.contains_key(*c))
            .cloned()
            .collect();
        for id in dangling {
            self.functions.insert(id.clone(), FunctionRecord::stub(id));
        }
        let missing_entries: Vec<FunctionId> = self
            .fuzzer_entries
            .values()
            .flatten()
            .filter(|id| !self.functions.contains_key(*id))
            .cloned()
            .collect();
        for id in missing_entries {
            self.functions.insert(id.clone(), FunctionRecord::stub(id));
        }
    }

    fn rebuild_callers(&mut self) {
        let mut callers: BTreeMap<FunctionId, BTreeSet<FunctionId>> = BTreeMap::new();
        for f in self.functions.values() {
            for c in &f.callees {
                callers.entry(c.clone()).or_default().insert(f.id.clone());
            }
        }
        self.callers = callers;
    }

    /// Fills `reached_by_fuzzers` (closure plus any export annotation) and
    /// `call_depth` for every known fuzzer.
    fn annotate_reachability(&mut self) {
        let fuzzers: Vec<String> = self.fuzzer_entries.keys().cloned().collect();
        for fuzzer in fuzzers {
            let depths = self.bfs_depths(&fuzzer);
            for (id, depth) in depths {
                if let Some(rec) = self.functions.get_mut(&id) {
                    rec.reached_by_fuzzers.insert(fuzzer.clone());
                    rec.call_depth.insert(fuzzer.clone(), depth);
                }
            }
        }
    }

    fn bfs_depths(&self, fuzzer: &str) -> BTreeMap<FunctionId, u32> {
        let mut depths = BTreeMap::new();
        let mut queue = VecDeque::new();
        if let Some(entries) = self.fuzzer_entries.get(fuzzer) {
            for e in entries {
                if self.functions.contains_key(e) && !depths.contains_key(e) {
                    depths.insert(e.clone(), 1);
                    queue.push_back(e.clone());
                }
            }
        }
        while let Some(id) = queue.pop_front() {
            let d = depths[&id];
            if let Some(f) = self.functions.get(&id) {
                for c in &f.callees {
                    if self.functions.contains_key(c) && !depths.contains_key(c) {
                        depths.insert(c.clone(), d + 1);
                        queue.push_back(c.clone());
                    }
                }
            }
        }
        depths
    }

    /// Shortest 1-based call depth from any entry of `fuzzer`. Entries have
    /// depth 1; functions not reachable along call edges are absent.
    pub fn compute_depths(&self, fuzzer: &str) -> Result<BTreeMap<FunctionId, u32>, GraphError> {
        if !self.fuzzer_entries.contains_key(fuzzer) {
            return Err(GraphError::UnknownFuzzer(fuzzer.to_string()));
        }
        Ok(self.bfs_depths(fuzzer))
    }

    /// The part of the graph reachable by `fuzzer`, with edges restricted to
    /// the retained functions. Applying it twice yields the same graph.
    pub fn reachable_subgraph(&self, fuzzer: &str) -> Result<CallGraph, GraphError> {
        let entries = self
            .fuzzer_entries
            .get(fuzzer)
            .ok_or_else(|| GraphError::UnknownFuzzer(fuzzer.to_string()))?;

        let mut warnings = self.warnings.clone();
        if entries.is_empty() {
            warnings.insert(format!("fuzzer `{fuzzer}` has no entry functions; subgraph is empty"));
        }
        let keep: BTreeSet<&FunctionId> = if entries.is_empty() {
            BTreeSet::new()
        } else {
            self.functions
                .values()
                .filter(|f| f.reached_by_fuzzers.contains(fuzzer))
                .map(|f| &f.id)
                .collect()
        };
        let functions: BTreeMap<FunctionId, FunctionRecord> = keep
            .iter()
            .map(|id| {
                let mut rec = self.functions[*id].clone();
                rec.callees.retain(|c| keep.contains(c));
                ((*id).clone(), rec)
            })
            .collect();
        let mut fuzzer_entries = BTreeMap::new();
        fuzzer_entries.insert(
            fuzzer.to_string(),
            entries.iter().filter(|e| keep.contains(e)).cloned().collect(),
        );
        let mut sub = CallGraph {
            functions,
            fuzzer_entries,
            callers: BTreeMap::new(),
            warnings,
        };
        sub.rebuild_callers();
        Ok(sub)
    }

    pub fn function(&self, id: &FunctionId) -> Option<&FunctionRecord> {
        self.functions.get(id)
    }

    /// Looks a function up by id, falling back to a unique name match.
    pub fn resolve(&self, key: &str) -> Result<&FunctionRecord, Vec<FunctionId>> {
        if let Some(f) = self.functions.get(&FunctionId::new(key)) {
            return Ok(f);
        }
        let matches: Vec<&FunctionRecord> =
            self.functions.values().filter(|f| f.name == key).collect();
        match matches.as_slice() {
            [only] => Ok(only),
            _ => Err(matches.iter().map(|f| f.id.clone()).collect()),
        }
    }

    pub fn contains(&self, id: &FunctionId) -> bool {
        self.functions.contains_key(id)
    }

    pub fn functions(&self) -> impl Iterator<Item = &FunctionRecord> {
        self.functions.values()
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.functions.values().map(|f| f.callees.len()).sum()
    }

    pub fn fuzzers(&self) -> impl Iterator<Item = &str> {
        self.fuzzer_entries.keys().map(String::as_str)
    }

    pub fn has_fuzzer(&self, fuzzer: &str) -> bool {
        self.fuzzer_entries.contains_key(fuzzer)
    }

    pub fn entries(&self, fuzzer: &str) -> Option<&[FunctionId]> {
        self.fuzzer_entries.get(fuzzer).map(Vec::as_slice)
    }

    pub fn callers_of(&self, id: &FunctionId) -> impl Iterator<Item = &FunctionId> {
        self.callers.get(id).into_iter().flatten()
    }

    pub fn callees_of(&self, id: &FunctionId) -> &[FunctionId] {
        self.functions
            .get(id)
            .map(|f| f.callees.as_slice())
            .unwrap_or(&[])
    }

    pub fn depth(&self, id: &FunctionId, fuzzer: &str) -> Option<u32> {
        self.functions.get(id)?.call_depth.get(fuzzer).copied()
    }

    pub fn warnings(&self) -> impl Iterator<Item = &str> {
        self.warnings.iter().map(String::as_str)
    }

    /// Functions transitively called from `roots` (roots included), in id
    /// order.
    pub fn closure_from<'a>(
        &self,
        roots: impl IntoIterator<Item = &'a FunctionId>,
    ) -> BTreeSet<FunctionId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<FunctionId> = roots
            .into_iter()
            .filter(|r| self.functions.contains_key(*r))
            .cloned()
            .collect();
        while let Some(id) = stack.pop() {
            if !seen.insert(id.clone()) {
                continue;
            }
            for c in self.callees_of(&id) {
                if !seen.contains(c) {
                    stack.push(c.clone());
                }
            }
        }
        seen
    }

    /// A shortest call path from any entry of `fuzzer` to `target`, entry
    /// first. Ties resolve to the lexicographically smallest predecessor.
    pub fn path_to(&self, fuzzer: &str, target: &FunctionId) -> Option<Vec<FunctionId>> {
        let entries = self.fuzzer_entries.get(fuzzer)?;
        let mut prev: BTreeMap<FunctionId, Option<FunctionId>> = BTreeMap::new();
        let mut queue = VecDeque::new();
        let mut sorted: Vec<&FunctionId> = entries.iter().collect();
        sorted.sort();
        for e in sorted {
            if self.functions.contains_key(e) && !prev.contains_key(e) {
                prev.insert(e.clone(), None);
                queue.push_back(e.clone());
            }
        }
        while let Some(id) = queue.pop_front() {
            if &id == target {
                let mut path = vec![id.clone()];
                let mut cur = id;
                while let Some(Some(p)) = prev.get(&cur) {
                    path.push(p.clone());
                    cur = p.clone();
                }
                path.reverse();
                return Some(path);
            }
            let mut next: Vec<&FunctionId> = self.callees_of(&id).iter().collect();
            next.sort();
            for c in next {
                if self.functions.contains_key(c) && !prev.contains_key(c) {
                    prev.insert(c.clone(), Some(id.clone()));
                    queue.push_back(c.clone());
                }
            }
        }
        None
    }

    /// Runs one code query. Results are byte-stable for a given graph.
    pub fn query(&self, query: &Query) -> QueryResult {
        query::run(self, query)
    }
}

/// Assembles a graph in code; the same normalisation as the export loader
/// (external stubs, reachability, depths) runs on `build`.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    records: Vec<ExportRecord>,
}

impl GraphBuilder {
    pub fn function(mut self, id: &str, callees: &[&str]) -> Self {
        self.records.push(ExportRecord {
            id: id.to_string(),
            name: id.to_string(),
            file: format!("{id}.c"),
            source: String::new(),
            callees: callees.iter().map(|c| c.to_string()).collect(),
            ..Default::default()
        });
        self
    }

    pub fn record(mut self, record: ExportRecord) -> Self {
        self.records.push(record);
        self
    }

    /// Marks an already-added function as an entry for `fuzzer`.
    pub fn entry(mut self, fuzzer: &str, id: &str) -> Self {
        if let Some(r) = self.records.iter_mut().find(|r| r.id == id) {
            r.is_entry_for.push(fuzzer.to_string());
        } else {
            self.records.push(ExportRecord {
                id: id.to_string(),
                name: id.to_string(),
                file: format!("{id}.c"),
                is_entry_for: vec![fuzzer.to_string()],
                ..Default::default()
            });
        }
        self
    }

    pub fn build(self) -> Result<CallGraph, GraphError> {
        CallGraph::from_records(self.records.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> FunctionId {
        FunctionId::new(s)
    }

    #[test]
    fn chain_export_builds_three_nodes_two_edges() {
        let export = r#"
{"id":"entry","name":"entry","file":"a.c","source":"void entry(){a();}","callees":["a"],"is_entry_for":["fz"]}
{"id":"a","name":"a","file":"a.c","source":"void a(){b();}","callees":["b"]}
{"id":"b","name":"b","file":"a.c","source":"void b(){}","callees":[]}
"#;
        let g = CallGraph::from_export_str(export).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.entries("fz").unwrap(), &[id("entry")]);
    }

    #[test]
    fn dangling_callee_becomes_external_stub() {
        let export = r#"{"id":"f","name":"f","file":"f.c","source":"","callees":["ext_lib_fn"],"is_entry_for":["fz"]}"#;
        let g = CallGraph::from_export_str(export).unwrap();
        let ext = g.function(&id("ext_lib_fn")).unwrap();
        assert!(ext.external);
        assert_eq!(g.callees_of(&id("f")), &[id("ext_lib_fn")]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let export = "{\"id\":\"f\",\"name\":\"f\",\"file\":\"f.c\"}\n\nnot json\n";
        match CallGraph::from_export_str(export) {
            Err(GraphError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let export = r#"{"id":"f","name":"f","file":"f.c","colour":"red"}"#;
        assert!(matches!(
            CallGraph::from_export_str(export),
            Err(GraphError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_id_rejected() {
        let export = "{\"id\":\"f\",\"name\":\"f\",\"file\":\"f.c\"}\n{\"id\":\"f\",\"name\":\"g\",\"file\":\"g.c\"}\n";
        assert!(matches!(
            CallGraph::from_export_str(export),
            Err(GraphError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn chain_depths() {
        let g = CallGraph::builder()
            .function("entry", &["a"])
            .function("a", &["b"])
            .function("b", &[])
            .entry("fz", "entry")
            .build()
            .unwrap();
        let d = g.compute_depths("fz").unwrap();
        assert_eq!(d[&id("entry")], 1);
        assert_eq!(d[&id("a")], 2);
        assert_eq!(d[&id("b")], 3);
    }

    #[test]
    fn diamond_depth_is_shortest() {
        let g = CallGraph::builder()
            .function("entry", &["a", "b"])
            .function("a", &["c"])
            .function("b", &["c"])
            .function("c", &[])
            .entry("fz", "entry")
            .build()
            .unwrap();
        assert_eq!(g.compute_depths("fz").unwrap()[&id("c")], 3);
        let callers: Vec<_> = g.callers_of(&id("c")).cloned().collect();
        assert_eq!(callers, vec![id("a"), id("b")]);
    }

    #[test]
    fn unknown_fuzzer_is_error() {
        let g = CallGraph::builder().function("e", &[]).entry("fz", "e").build().unwrap();
        assert!(matches!(g.compute_depths("nope"), Err(GraphError::UnknownFuzzer(_))));
        assert!(matches!(g.reachable_subgraph("nope"), Err(GraphError::UnknownFuzzer(_))));
    }

    #[test]
    fn subgraph_excludes_other_fuzzers_functions() {
        let g = CallGraph::builder()
            .function("ea", &["shared"])
            .function("eb", &["shared", "only_b"])
            .function("shared", &[])
            .function("only_b", &[])
            .entry("A", "ea")
            .entry("B", "eb")
            .build()
            .unwrap();
        let sub = g.reachable_subgraph("A").unwrap();
        assert!(sub.contains(&id("shared")));
        assert!(!sub.contains(&id("only_b")));
        assert!(!sub.contains(&id("eb")));
        assert_eq!(sub.reachable_subgraph("A").unwrap(), sub);
    }

    #[test]
    fn empty_entry_list_yields_empty_subgraph_with_warning() {
        let export = r#"{"id":"f","name":"f","file":"f.c","reached_by_fuzzers":["ghost"]}"#;
        let g = CallGraph::from_export_str(export).unwrap();
        let sub = g.reachable_subgraph("ghost").unwrap();
        assert!(sub.is_empty());
        assert_eq!(sub.warnings().count(), 1);
        assert_eq!(sub.reachable_subgraph("ghost").unwrap(), sub);
    }

    #[test]
    fn annotations_are_kept_alongside_closure() {
        let export = r#"
{"id":"e","name":"e","file":"e.c","callees":[],"is_entry_for":["fz"]}
{"id":"cb","name":"cb","file":"e.c","callees":[],"reached_by_fuzzers":["fz"]}
"#;
        let g = CallGraph::from_export_str(export).unwrap();
        let cb = g.function(&id("cb")).unwrap();
        assert!(cb.reached_by_fuzzers.contains("fz"));
        // reached through an edge the export did not record; no depth
        assert!(cb.call_depth.is_empty());
    }

    #[test]
    fn path_to_prefers_shortest() {
        let g = CallGraph::builder()
            .function("e", &["a", "b"])
            .function("a", &["x"])
            .function("b", &["c"])
            .function("c", &["x"])
            .function("x", &[])
            .entry("fz", "e")
            .build()
            .unwrap();
        assert_eq!(g.path_to("fz", &id("x")).unwrap(), vec![id("e"), id("a"), id("x")]);
        assert!(g.path_to("fz", &id("missing")).is_none());
    }
}
