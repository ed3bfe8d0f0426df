//! Scan configuration: one TOML file plus command-line overrides.
//!
//! Relative paths inside the file resolve against the file's directory;
//! paths given as flags resolve against the working directory. A flag always
//! wins over the file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use spscan::agentcore::cost::ModelPrice;
use spscan::agentcore::{PriceTable, ScanBudget};
use spscan::pipeline::ScanMode;
use spscan::spstore::Sanitizer;

/// Bad flags or configuration. The binary exits with status 2 on these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const DEFAULT_OUT: &str = "spscan-out";
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;

/// Per-million-token prices for the default model names.
pub fn default_prices() -> PriceTable {
    PriceTable::new()
        .with("reasoning-primary", 15.0, 75.0)
        .with("reasoning-fallback", 10.0, 40.0)
        .with("main-primary", 3.0, 15.0)
        .with("main-fallback", 2.5, 10.0)
        .with("utility-primary", 0.8, 4.0)
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub minutes: Option<u64>,
    pub dollars: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    pub base_url: Option<String>,
    pub timeout_secs: Option<u64>,
}

/// Model chain per tier, most preferred first.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsSection {
    pub reasoning: Option<Vec<String>>,
    pub main: Option<Vec<String>>,
    pub utility: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    pub global_iterations: Option<u64>,
    pub global_slice: Option<u64>,
    pub parallel: Option<bool>,
    pub max_revisits: Option<u32>,
    pub verify_retries: Option<u32>,
    pub dedup_agent: Option<bool>,
    pub seed_agent: Option<bool>,
}

/// The configuration file as written.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<ScanMode>,
    pub seed: Option<u64>,
    pub export: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub diff: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub corpus_dir: Option<PathBuf>,
    #[serde(default)]
    pub fuzzers: Vec<String>,
    #[serde(default)]
    pub sanitizers: Vec<Sanitizer>,
    #[serde(default)]
    pub budget: BudgetSection,
    #[serde(default)]
    pub provider: ProviderSection,
    #[serde(default)]
    pub models: ModelsSection,
    #[serde(default)]
    pub prices: BTreeMap<String, ModelPrice>,
    #[serde(default)]
    pub engine: EngineSection,
}

impl FileConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| usage(format!("invalid configuration: {e}")))
    }

    /// Reads `path` and makes its relative paths relative to its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("reading configuration {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.export,
            &mut cfg.targets,
            &mut cfg.scenario,
            &mut cfg.diff,
            &mut cfg.out,
            &mut cfg.corpus_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Values given on the command line; `None` and empty lists defer to the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<ScanMode>,
    pub diff: Option<PathBuf>,
    pub fuzzers: Vec<String>,
    pub sanitizers: Vec<Sanitizer>,
    pub budget_minutes: Option<u64>,
    pub budget_dollars: Option<f64>,
    pub seed: Option<u64>,
    pub scenario: Option<PathBuf>,
    pub export: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub parallel: Option<bool>,
}

/// A validated scan configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub mode: ScanMode,
    pub seed: u64,
    pub export: PathBuf,
    pub targets: PathBuf,
    pub scenario: Option<PathBuf>,
    pub diff: Option<PathBuf>,
    pub out: PathBuf,
    pub corpus_dir: Option<PathBuf>,
    pub fuzzers: Vec<String>,
    pub sanitizers: Vec<Sanitizer>,
    pub budget: ScanBudget,
    pub provider: ProviderSection,
    pub models: ModelsSection,
    pub prices: PriceTable,
    pub engine: EngineSection,
    pub parallel: bool,
}

impl Config {
    pub fn resolve(file: FileConfig, flags: Overrides) -> anyhow::Result<Self> {
        let mode = flags.mode.or(file.mode).unwrap_or(ScanMode::Full);
        let defaults = mode.default_budget();
        let budget = ScanBudget {
            minutes: flags.budget_minutes.or(file.budget.minutes).unwrap_or(defaults.minutes),
            dollars: flags.budget_dollars.or(file.budget.dollars).unwrap_or(defaults.dollars),
        };
        if !(budget.dollars.is_finite() && budget.dollars >= 0.0) {
            return Err(usage(format!("budget dollars must be a non-negative number, got {}", budget.dollars)));
        }
        let diff = flags.diff.or(file.diff);
        if mode == ScanMode::Delta && diff.is_none() {
            return Err(usage("delta mode needs a diff (--diff <path>)"));
        }
        let export = flags.export.or(file.export).ok_or_else(|| usage("no call-graph export given (--export)"))?;
        let targets = flags.targets.or(file.targets).ok_or_else(|| usage("no target directory given (--targets)"))?;
        let mut prices = default_prices();
        for (model, p) in &file.prices {
            if !(p.input > 0.0 && p.output > 0.0) {
                return Err(usage(format!("price for `{model}` must be positive")));
            }
            prices = prices.with(model, p.input, p.output);
        }
        for (tier, chain) in [("reasoning", &file.models.reasoning), ("main", &file.models.main), ("utility", &file.models.utility)] {
            if chain.as_ref().is_some_and(Vec::is_empty) {
                return Err(usage(format!("model chain `{tier}` is empty")));
            }
        }
        let pick = |flag: Vec<String>, file: Vec<String>| if flag.is_empty() { file } else { flag };
        Ok(Config {
            mode,
            seed: flags.seed.or(file.seed).unwrap_or(0),
            export,
            targets,
            scenario: flags.scenario.or(file.scenario),
            diff,
            out: flags.out.or(file.out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            corpus_dir: file.corpus_dir,
            fuzzers: pick(flags.fuzzers, file.fuzzers),
            sanitizers: if flags.sanitizers.is_empty() { file.sanitizers } else { flags.sanitizers },
            budget,
            parallel: flags.parallel.or(file.engine.parallel).unwrap_or(false),
            provider: file.provider,
            models: file.models,
            prices,
            engine: file.engine,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
mode = "full"
seed = 9
export = "graph/export.jsonl"
targets = "targets"
fuzzers = ["png_fuzzer"]
sanitizers = ["address"]

[budget]
minutes = 30
dollars = 12.5

[provider]
base_url = "http://localhost:9000/v1"

[models]
reasoning = ["r1"]

[prices.r1]
input = 2.0
output = 8.0

[engine]
global_iterations = 1000
parallel = true
"#;

    #[test]
    fn parses_every_section() {
        let f = FileConfig::parse(SAMPLE).unwrap();
        assert_eq!(f.seed, Some(9));
        assert_eq!(f.sanitizers, vec![Sanitizer::Address]);
        assert_eq!(f.budget.dollars, Some(12.5));
        assert_eq!(f.models.reasoning.as_deref(), Some(&["r1".to_string()][..]));
        assert_eq!(f.engine.global_iterations, Some(1000));
        let c = Config::resolve(f, Overrides::default()).unwrap();
        assert_eq!(c.prices.price("r1"), Some(ModelPrice { input: 2.0, output: 8.0 }));
        assert!(c.prices.price("main-primary").is_some());
        assert!(c.parallel);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["colour = 1", "[budget]\nhours = 3", "[engine]\nturbo = true", "[prices.x]\ninput = 1\noutput = 1\nextra = 2"] {
            let err = FileConfig::parse(bad).unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{bad}");
        }
    }

    #[test]
    fn flags_win_over_the_file() {
        let f = FileConfig::parse(SAMPLE).unwrap();
        let flags = Overrides {
            seed: Some(1),
            budget_dollars: Some(3.0),
            fuzzers: vec!["json_fuzzer".into()],
            export: Some("other.jsonl".into()),
            parallel: Some(false),
            ..Overrides::default()
        };
        let c = Config::resolve(f, flags).unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.budget, ScanBudget { minutes: 30, dollars: 3.0 });
        assert_eq!(c.fuzzers, vec!["json_fuzzer".to_string()]);
        assert_eq!(c.export, PathBuf::from("other.jsonl"));
        assert!(!c.parallel);
    }

    #[test]
    fn mode_picks_default_budget() {
        let base = || Overrides { export: Some("e".into()), targets: Some("t".into()), ..Overrides::default() };
        let full = Config::resolve(FileConfig::default(), base()).unwrap();
        assert_eq!(full.budget, ScanBudget::FULL);
        let delta = Config::resolve(
            FileConfig::default(),
            Overrides { mode: Some(ScanMode::Delta), diff: Some("d".into()), ..base() },
        )
        .unwrap();
        assert_eq!(delta.budget, ScanBudget::DELTA);
    }

    #[test]
    fn delta_without_diff_is_a_usage_error() {
        let flags = Overrides {
            mode: Some(ScanMode::Delta),
            export: Some("e".into()),
            targets: Some("t".into()),
            ..Overrides::default()
        };
        let err = Config::resolve(FileConfig::default(), flags).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.toml");
        std::fs::write(&path, "export = \"g.jsonl\"\ntargets = \"/abs/targets\"\n").unwrap();
        let f = FileConfig::load(&path).unwrap();
        assert_eq!(f.export, Some(dir.path().join("g.jsonl")));
        assert_eq!(f.targets, Some(PathBuf::from("/abs/targets")));
    }
}
