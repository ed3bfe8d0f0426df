//! Command-line front end for spscan: configuration, the file-backed store,
//! and the `scan`, `status` and `report` commands.

pub mod config;
pub mod report;
pub mod scan;
pub mod status;
pub mod store;

use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use spscan::pipeline::ScanMode;
use spscan::spstore::Sanitizer;

use config::{Config, FileConfig, Overrides, DEFAULT_OUT};
use store::FileStore;

#[derive(Debug, Parser)]
#[command(name = "spscan", version, about = "Suspicious-point driven fuzzing scans over a call-graph export")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan workers, run them and persist the results under --out.
    Scan(ScanArgs),
    /// Print per-task metrics from a previous scan.
    Status {
        #[arg(long, default_value = DEFAULT_OUT)]
        out: PathBuf,
    },
    /// Render stored reports as JSON and Markdown.
    Report {
        /// Report id, e.g. `vr-0123456789ab`.
        id: Option<String>,
        #[arg(long)]
        all: bool,
        #[arg(long, default_value = DEFAULT_OUT)]
        out: PathBuf,
        /// Directory for the rendered files; defaults to <out>/reports.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Default)]
pub struct ScanArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<ScanMode>,
    /// Unified diff (mail-style patches allowed) for delta mode.
    #[arg(long)]
    pub diff: Option<PathBuf>,
    /// Restrict to these fuzzers; repeatable.
    #[arg(long = "fuzzer")]
    pub fuzzers: Vec<String>,
    /// Restrict to these sanitizers; repeatable.
    #[arg(long = "sanitizer")]
    pub sanitizers: Vec<Sanitizer>,
    #[arg(long)]
    pub budget_minutes: Option<u64>,
    #[arg(long)]
    pub budget_dollars: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scripted agent scenario; replaces the HTTP provider.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Call-graph export (JSON lines).
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Directory of simulated target files.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run workers on separate threads.
    #[arg(long)]
    pub parallel: bool,
}

impl ScanArgs {
    pub fn config(self) -> Result<Config> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let flags = Overrides {
            mode: self.mode,
            diff: self.diff,
            fuzzers: self.fuzzers,
            sanitizers: self.sanitizers,
            budget_minutes: self.budget_minutes,
            budget_dollars: self.budget_dollars,
            seed: self.seed,
            scenario: self.scenario,
            export: self.export,
            targets: self.targets,
            out: self.out,
            parallel: self.parallel.then_some(true),
        };
        Config::resolve(file, flags)
    }
}

/// Runs one command; the returned value is the process exit status.
pub fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<u8> {
    match cli.command {
        Command::Scan(args) => {
            let cfg = args.config()?;
            let store = FileStore::open(scan::store_dir(&cfg.out))?;
            let summary = scan::run_scan(&cfg, &store)?;
            for t in &summary.tasks {
                write!(stdout, "{}  {}", t.id, t.state)?;
                if let Some(e) = &t.error {
                    write!(stdout, "  ({e})")?;
                }
                writeln!(stdout)?;
            }
            writeln!(stdout, "{} report(s) in {}", summary.reports.len(), scan::reports_dir(&cfg.out).display())?;
            Ok(if summary.failed() > 0 { 1 } else { 0 })
        }
        Command::Status { out } => {
            let store = FileStore::open(scan::store_dir(&out))?;
            stdout.write_all(status::render(&status::snapshot(&store)?).as_bytes())?;
            Ok(0)
        }
        Command::Report { id, all, out, dest } => {
            let store = FileStore::open(scan::store_dir(&out))?;
            let dest = dest.unwrap_or_else(|| scan::reports_dir(&out));
            let written = match report::select(id.as_deref(), all)? {
                Some(id) => report::render_report(&store, id, &dest)?,
                None => report::render_all(&store, &dest)?,
            };
            if written.is_empty() {
                writeln!(stdout, "no reports stored; nothing written")?;
            }
            for p in &written {
                writeln!(stdout, "{}", p.display())?;
            }
            Ok(0)
        }
    }
}
