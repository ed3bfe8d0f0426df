//! Target execution, the coverage-guided Global and SP fuzzers, seed
//! generation, and crash reproduction.

mod corpus;
mod fuzzer;
mod mutate;
mod pov;
pub mod seeds;
mod target;
mod verify;

pub use corpus::{fingerprint, Corpus, CorpusError, Seed, SeedOrigin};
pub use fuzzer::{BackgroundFuzzer, CrashRecord, Fuzzer, FuzzerConfig, DEFAULT_MAX_LEN, FRESH_ENERGY};
pub use mutate::{apply as apply_mutation, mutate, MutationContext, MutationOp};
pub use pov::{attach_crash, crash_matches, pov_id, reproduce, PoV, Reproduction, QUORUM};
pub use seeds::{literal_tokens, seed_from_direction, seed_from_fp, SeedError};
pub use target::{
    parse_harness_output, Cmp, CommandRunner, CrashKey, CrashSpec, ExecError, ExecutionResult, Limits, Outcome,
    Pattern, Predicate, Rule, SimRunner, SimTarget, TargetError, TargetRunner, MAX_BLOB, TARGET_VERSION,
};
pub use verify::{sp_fuzzer_verify, BlobStatus, VerifyError, VerifyOutcome, HINT_CHARS, MAX_VARIANTS};

/// Runs the SP fuzzer's background loop for `budget` iterations and returns
/// crashes found for the first time. The fuzzer keeps its corpus.
pub fn sp_fuzzer_background(fuzzer: &mut Fuzzer, runner: &dyn TargetRunner, budget: u64) -> Vec<CrashRecord> {
    fuzzer.run(runner, budget)
}
