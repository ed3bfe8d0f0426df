//! Unified diff parsing and hunk-to-function mapping for delta scans.
//!
//! The export carries function bodies but no line numbers, so hunks are
//! mapped by content: a function is changed when one of the hunk's added or
//! removed lines appears in its body. Hunks whose changes match nothing fall
//! back to the function holding most of their context lines, then to a
//! function named in the `@@` header.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::callgraph::{CallGraph, FunctionId, FunctionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineKind {
    Context,
    Added,
    Removed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffLine {
    pub kind: LineKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub old_start: u32,
    pub old_len: u32,
    pub new_start: u32,
    pub new_len: u32,
    /// Text after the closing `@@`, usually the enclosing signature.
    pub section: String,
    pub lines: Vec<DiffLine>,
}

impl Hunk {
    pub fn render(&self) -> String {
        let mut s = format!("@@ -{},{} +{},{} @@", self.old_start, self.old_len, self.new_start, self.new_len);
        if !self.section.is_empty() {
            s.push(' ');
            s.push_str(&self.section);
        }
        s.push('\n');
        for l in &self.lines {
            let p = match l.kind {
                LineKind::Context => ' ',
                LineKind::Added => '+',
                LineKind::Removed => '-',
            };
            let _ = writeln!(s, "{p}{}", l.text);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffFile {
    /// `None` for `/dev/null`.
    pub old_path: Option<String>,
    pub new_path: Option<String>,
    pub hunks: Vec<Hunk>,
}

impl DiffFile {
    pub fn path(&self) -> &str {
        self.new_path.as_deref().or(self.old_path.as_deref()).unwrap_or("")
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DiffError {
    #[error("line {0}: malformed hunk header `{1}`")]
    HunkHeader(usize, String),
    #[error("line {0}: hunk body ended early (expected {1} more old and {2} more new lines)")]
    ShortHunk(usize, u32, u32),
    #[error("line {0}: hunk outside a file section")]
    OrphanHunk(usize),
    #[error("line {0}: unexpected line in hunk `{1}`")]
    BadLine(usize, String),
    #[error("diff contains no file changes")]
    Empty,
}

fn strip_path(raw: &str) -> Option<String> {
    let p = raw.split('\t').next().unwrap_or(raw).trim();
    if p == "/dev/null" {
        return None;
    }
    Some(p.strip_prefix("a/").or_else(|| p.strip_prefix("b/")).unwrap_or(p).to_string())
}

fn parse_range(s: &str) -> Option<(u32, u32)> {
    match s.split_once(',') {
        Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
        None => Some((s.parse().ok()?, 1)),
    }
}

fn parse_hunk_header(line: &str) -> Option<(u32, u32, u32, u32, String)> {
    let rest = line.strip_prefix("@@ -")?;
    let (ranges, section) = rest.split_once(" @@")?;
    let (old, new) = ranges.split_once(" +")?;
    let (os, ol) = parse_range(old)?;
    let (ns, nl) = parse_range(new)?;
    Some((os, ol, ns, nl, section.trim().to_string()))
}

/// Text before the first file section, with mail and `git show` headers
/// reduced to the message itself.
pub fn commit_message(preamble: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut indented_body = false;
    for line in preamble.lines() {
        if line == "---" {
            break;
        }
        if let Some(subject) = line.strip_prefix("Subject: ") {
            let subject = match subject.strip_prefix("[PATCH") {
                Some(r) => r.split_once("] ").map(|(_, s)| s).unwrap_or(r),
                None => subject,
            };
            out.push(subject.to_string());
            continue;
        }
        let header = ["From ", "From: ", "Date: ", "Author: ", "commit ", "Merge: ", "index "]
            .iter()
            .any(|h| line.starts_with(h));
        if header && out.iter().all(|l| l.is_empty()) {
            if line.starts_with("commit ") {
                indented_body = true;
            }
            continue;
        }
        let line = if indented_body { line.strip_prefix("    ").unwrap_or(line) } else { line };
        out.push(line.to_string());
    }
    while out.first().is_some_and(|l| l.trim().is_empty()) {
        out.remove(0);
    }
    while out.last().is_some_and(|l| l.trim().is_empty()) {
        out.pop();
    }
    out.join("\n")
}

/// A parsed diff plus whatever message preceded it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedDiff {
    pub preamble: String,
    pub files: Vec<DiffFile>,
}

pub fn parse_unified_diff(text: &str) -> Result<ParsedDiff, DiffError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut files: Vec<DiffFile> = Vec::new();
    let mut preamble = String::new();
    let mut started = false;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        if line.starts_with("diff ") {
            started = true;
            files.push(DiffFile { old_path: None, new_path: None, hunks: Vec::new() });
            let mut parts = line.split_whitespace().skip(2);
            if let (Some(a), Some(b)) = (parts.next(), parts.next()) {
                let f = files.last_mut().expect("pushed");
                f.old_path = strip_path(a);
                f.new_path = strip_path(b);
            }
            i += 1;
            continue;
        }
        if let (Some(old), Some(new)) = (line.strip_prefix("--- "), lines.get(i + 1).and_then(|l| l.strip_prefix("+++ "))) {
            started = true;
            let fresh = files.last().map(|f| !f.hunks.is_empty()).unwrap_or(true);
            if fresh {
                files.push(DiffFile { old_path: None, new_path: None, hunks: Vec::new() });
            }
            let f = files.last_mut().expect("present");
            f.old_path = strip_path(old);
            f.new_path = strip_path(new);
            i += 2;
            continue;
        }
        if line.starts_with("@@") {
            let (os, ol, ns, nl, section) =
                parse_hunk_header(line).ok_or_else(|| DiffError::HunkHeader(i + 1, line.to_string()))?;
            let file = files.last_mut().ok_or(DiffError::OrphanHunk(i + 1))?;
            let (mut old_left, mut new_left) = (ol, nl);
            let mut body = Vec::new();
            i += 1;
            while old_left > 0 || new_left > 0 {
                let Some(l) = lines.get(i) else {
                    return Err(DiffError::ShortHunk(i, old_left, new_left));
                };
                let (kind, rest) = match l.chars().next() {
                    Some(' ') => (LineKind::Context, &l[1..]),
                    None => (LineKind::Context, ""),
                    Some('+') => (LineKind::Added, &l[1..]),
                    Some('-') => (LineKind::Removed, &l[1..]),
                    Some('\\') => {
                        i += 1;
                        continue;
                    }
                    _ => return Err(DiffError::BadLine(i + 1, l.to_string())),
                };
                match kind {
                    LineKind::Context if old_left > 0 && new_left > 0 => {
                        old_left -= 1;
                        new_left -= 1;
                    }
                    LineKind::Added if new_left > 0 => new_left -= 1,
                    LineKind::Removed if old_left > 0 => old_left -= 1,
                    _ => return Err(DiffError::ShortHunk(i + 1, old_left, new_left)),
                }
                body.push(DiffLine { kind, text: rest.to_string() });
                i += 1;
            }
            while lines.get(i).is_some_and(|l| l.starts_with('\\')) {
                i += 1;
            }
            file.hunks.push(Hunk { old_start: os, old_len: ol, new_start: ns, new_len: nl, section, lines: body });
            continue;
        }
        if !started {
            preamble.push_str(line);
            preamble.push('\n');
        }
        i += 1;
    }
    files.retain(|f| !f.hunks.is_empty());
    if files.is_empty() {
        return Err(DiffError::Empty);
    }
    Ok(ParsedDiff { preamble, files })
}

fn path_matches(function_path: &str, diff_path: &str) -> bool {
    let a = function_path.trim_start_matches("./");
    let b = diff_path.trim_start_matches("./");
    !a.is_empty() && (a == b || a.ends_with(&format!("/{b}")) || b.ends_with(&format!("/{a}")))
}

/// Lines worth matching: some alphanumeric content, not just braces.
fn significant(line: &str) -> Option<&str> {
    let t = line.trim();
    (t.len() >= 3 && t.chars().any(|c| c.is_ascii_alphanumeric())).then_some(t)
}

fn body_lines(f: &FunctionRecord) -> BTreeSet<&str> {
    f.source_text.lines().filter_map(significant).collect()
}

/// Functions a hunk touches, or an empty list when it cannot be mapped.
pub fn hunk_functions(hunk: &Hunk, candidates: &[&FunctionRecord]) -> Vec<FunctionId> {
    let bodies: Vec<(FunctionId, BTreeSet<&str>)> = candidates.iter().map(|f| (f.id.clone(), body_lines(f))).collect();
    let mut hit: BTreeSet<FunctionId> = BTreeSet::new();
    for l in hunk.lines.iter().filter(|l| l.kind != LineKind::Context) {
        if let Some(t) = significant(&l.text) {
            hit.extend(bodies.iter().filter(|(_, b)| b.contains(t)).map(|(id, _)| id.clone()));
        }
    }
    if !hit.is_empty() {
        return hit.into_iter().collect();
    }
    let mut counts: BTreeMap<&FunctionId, usize> = BTreeMap::new();
    for l in hunk.lines.iter().filter(|l| l.kind == LineKind::Context) {
        if let Some(t) = significant(&l.text) {
            for (id, b) in &bodies {
                if b.contains(t) {
                    *counts.entry(id).or_default() += 1;
                }
            }
        }
    }
    if let Some(best) = counts.values().max().copied() {
        return counts.into_iter().filter(|(_, c)| *c == best).map(|(id, _)| id.clone()).collect();
    }
    candidates
        .iter()
        .filter(|f| hunk.section.contains(&format!("{}(", f.name)))
        .map(|f| f.id.clone())
        .collect()
}

/// A diff resolved against a call graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaSpec {
    pub diff: String,
    pub commit_message: String,
    pub files: Vec<DiffFile>,
    /// Changed functions, sorted and unique. Every id is in the graph.
    pub changed: Vec<FunctionId>,
    /// Hunks per changed function, rendered as diff text.
    pub hunks_by_function: BTreeMap<FunctionId, String>,
    pub unresolved: Vec<String>,
}

impl DeltaSpec {
    /// Parses `diff` and maps its hunks onto `graph`. When `commit_message`
    /// is `None` the message is taken from the patch preamble.
    pub fn resolve(diff: &str, commit_message: Option<&str>, graph: &CallGraph) -> Result<DeltaSpec, DiffError> {
        let parsed = parse_unified_diff(diff)?;
        let message = match commit_message {
            Some(m) => m.to_string(),
            None => self::commit_message(&parsed.preamble),
        };
        let mut changed = BTreeSet::new();
        let mut hunks_by_function: BTreeMap<FunctionId, String> = BTreeMap::new();
        let mut unresolved = Vec::new();
        for file in &parsed.files {
            let path = file.path();
            let candidates: Vec<&FunctionRecord> =
                graph.functions().filter(|f| !f.external && path_matches(&f.file_path, path)).collect();
            for hunk in &file.hunks {
                let header = format!("{path} @@ -{},{} +{},{}", hunk.old_start, hunk.old_len, hunk.new_start, hunk.new_len);
                if candidates.is_empty() {
                    unresolved.push(format!("{header}: no known functions in file"));
                    continue;
                }
                let ids = hunk_functions(hunk, &candidates);
                if ids.is_empty() {
                    unresolved.push(format!("{header}: no enclosing function found"));
                    continue;
                }
                for id in ids {
                    let entry = hunks_by_function.entry(id.clone()).or_default();
                    let _ = write!(entry, "--- a/{path}\n+++ b/{path}\n{}", hunk.render());
                    changed.insert(id);
                }
            }
        }
        Ok(DeltaSpec {
            diff: diff.to_string(),
            commit_message: message,
            files: parsed.files,
            changed: changed.into_iter().collect(),
            hunks_by_function,
            unresolved,
        })
    }

    /// Changed functions reachable from `fuzzer`.
    pub fn reachable(&self, graph: &CallGraph, fuzzer: &str) -> Vec<FunctionId> {
        self.changed.iter().filter(|id| graph.depth(id, fuzzer).is_some()).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PATCH: &str = "From 1234abcd Mon Sep 17 00:00:00 2001
From: Dev <dev@example.org>
Date: Tue, 1 Oct 2024 10:00:00 +0000
Subject: [PATCH] png: skip the palette check for grey images

Grey images carry no palette, so the lookup is skipped.
---
 src/png.c | 3 ++-
 1 file changed, 2 insertions(+), 1 deletion(-)

diff --git a/src/png.c b/src/png.c
index 111..222 100644
--- a/src/png.c
+++ b/src/png.c
@@ -10,3 +10,4 @@ int png_palette(png_t *p)
   int n = p->palette_len;
-  if (p->palette == NULL) return -1;
+  if (p->grey)
+    return 0;
   return lookup(p->palette, n);
@@ -40,3 +41,3 @@
 int png_crc(png_t *p) {
-  return crc32(p->buf, p->len);
+  return crc32(p->buf, p->len + 4);
 }
diff --git a/README b/README
--- a/README
+++ b/README
@@ -1 +1 @@
-old
+new
";

    fn graph() -> CallGraph {
        CallGraph::from_export_str(concat!(
            r#"{"id":"png_palette","name":"png_palette","file":"src/png.c","source":"int png_palette(png_t *p) {\n  int n = p->palette_len;\n  if (p->grey)\n    return 0;\n  return lookup(p->palette, n);\n}"}"#,
            "\n",
            r#"{"id":"png_crc","name":"png_crc","file":"src/png.c","source":"int png_crc(png_t *p) {\n  return crc32(p->buf, p->len + 4);\n}"}"#,
            "\n",
            r#"{"id":"png_main","name":"png_main","file":"src/main.c","source":"int png_main() { return png_palette(0); }","callees":["png_palette"],"is_entry_for":["png_fuzzer"]}"#,
        ))
        .unwrap()
    }

    #[test]
    fn parses_files_and_hunks() {
        let d = parse_unified_diff(PATCH).unwrap();
        assert_eq!(d.files.len(), 2);
        assert_eq!(d.files[0].path(), "src/png.c");
        assert_eq!(d.files[0].hunks.len(), 2);
        assert_eq!(d.files[0].hunks[0].section, "int png_palette(png_t *p)");
        assert_eq!(d.files[0].hunks[1].lines.len(), 4);
        assert_eq!(d.files[1].path(), "README");
    }

    #[test]
    fn commit_message_from_mail_header() {
        let d = parse_unified_diff(PATCH).unwrap();
        assert_eq!(
            commit_message(&d.preamble),
            "png: skip the palette check for grey images\n\nGrey images carry no palette, so the lookup is skipped."
        );
        let show = "commit abc\nAuthor: X <x@y>\nDate: now\n\n    fix: bound the copy\n\n    Long body.\n";
        assert_eq!(commit_message(show), "fix: bound the copy\n\nLong body.");
    }

    #[test]
    fn maps_hunks_by_content() {
        let g = graph();
        let spec = DeltaSpec::resolve(PATCH, None, &g).unwrap();
        assert_eq!(spec.changed, vec![FunctionId::new("png_crc"), FunctionId::new("png_palette")]);
        assert_eq!(spec.unresolved.len(), 1);
        assert!(spec.unresolved[0].starts_with("README"));
        assert!(spec.hunks_by_function[&FunctionId::new("png_palette")].contains("+  if (p->grey)"));
        assert_eq!(spec.reachable(&g, "png_fuzzer"), vec![FunctionId::new("png_palette")]);
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert_eq!(parse_unified_diff("just text\n"), Err(DiffError::Empty));
        assert!(matches!(
            parse_unified_diff("--- a/x\n+++ b/x\n@@ -1,2 +1,2 @@\n a\n"),
            Err(DiffError::ShortHunk(..))
        ));
        assert!(matches!(parse_unified_diff("--- a/x\n+++ b/x\n@@ -x +1 @@\n"), Err(DiffError::HunkHeader(..))));
    }

    #[test]
    fn new_file_has_no_old_path() {
        let d = parse_unified_diff("--- /dev/null\n+++ b/new.c\n@@ -0,0 +1,2 @@\n+int f() {\n+}\n").unwrap();
        assert_eq!(d.files[0].old_path, None);
        assert_eq!(d.files[0].path(), "new.c");
    }
}
