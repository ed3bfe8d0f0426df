//! `spscan report`: render stored reports as JSON and Markdown files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use spscan::pipeline::VulnReport;

use crate::store::{Collection, StoreBackend};

pub fn load_report(store: &dyn StoreBackend, id: &str) -> Result<VulnReport> {
    let value = store.get(Collection::Reports, id)?.ok_or_else(|| anyhow!("no report with id `{id}`"))?;
    serde_json::from_value(value).with_context(|| format!("decoding report {id}"))
}

/// Writes `<dir>/<id>.json` and `<dir>/<id>.md`. The output depends only on
/// the stored record, so rendering twice gives identical bytes.
pub fn render_report(store: &dyn StoreBackend, id: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    let report = load_report(store, id)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (ext, text) in [("json", report.to_json()), ("md", report.to_markdown())] {
        let path = dir.join(format!("{id}.{ext}"));
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

/// Renders every stored report. An empty store writes nothing.
pub fn render_all(store: &dyn StoreBackend, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (id, _) in store.list(Collection::Reports)? {
        written.extend(render_report(store, &id, dir)?);
    }
    Ok(written)
}

/// Either one id or `--all`, not both.
pub fn select(id: Option<&str>, all: bool) -> Result<Option<&str>> {
    match (id, all) {
        (Some(_), true) => bail!(crate::config::UsageError("give a report id or --all, not both".into())),
        (None, false) => bail!(crate::config::UsageError("give a report id or --all".into())),
        (id, _) => Ok(id),
    }
}
