use std::fmt::Write as _;

use crate::callgraph::FunctionId;

use super::target::{ExecutionResult, Outcome, TargetRunner};

/// Tail of execution output kept in a failure hint.
pub const HINT_CHARS: usize = 2000;
pub const MAX_VARIANTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlobStatus {
    Ran(ExecutionResult),
    /// Not executed because an earlier variant already crashed.
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub results: Vec<BlobStatus>,
    /// Index and result of the crashing variant.
    pub crash: Option<(usize, ExecutionResult)>,
    /// Summary plus output tail, meant for the PoC generator after a miss.
    pub hint: String,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum VerifyError {
    #[error("expected 1 to {MAX_VARIANTS} blobs, got {0}")]
    VariantCount(usize),
}

/// Executes each variant in order and stops at the first crash.
pub fn sp_fuzzer_verify(
    blobs: &[Vec<u8>],
    runner: &dyn TargetRunner,
    target_function: Option<&FunctionId>,
) -> Result<VerifyOutcome, VerifyError> {
    if blobs.is_empty() || blobs.len() > MAX_VARIANTS {
        return Err(VerifyError::VariantCount(blobs.len()));
    }
    let mut results = Vec::with_capacity(blobs.len());
    let mut crash = None;
    for (i, blob) in blobs.iter().enumerate() {
        if crash.is_some() {
            results.push(BlobStatus::Skipped);
            continue;
        }
        match runner.execute(blob) {
            Ok(r) => {
                if r.crashed() {
                    crash = Some((i, r.clone()));
                }
                results.push(BlobStatus::Ran(r));
            }
            Err(e) => results.push(BlobStatus::Failed(e.to_string())),
        }
    }
    let hint = failure_hint(blobs, &results, target_function);
    Ok(VerifyOutcome { results, crash, hint })
}

fn failure_hint(blobs: &[Vec<u8>], results: &[BlobStatus], target: Option<&FunctionId>) -> String {
    let mut summary = String::new();
    let mut output = String::new();
    for (i, (blob, r)) in blobs.iter().zip(results).enumerate() {
        let _ = write!(summary, "variant {} ({} bytes): ", i + 1, blob.len());
        match r {
            BlobStatus::Ran(res) => {
                let outcome = match &res.outcome {
                    Outcome::Ok => "no crash".to_string(),
                    Outcome::Crash { location, vuln_type, .. } => format!("crash {vuln_type} in {location}"),
                    Outcome::Timeout => "timeout".to_string(),
                };
                let _ = write!(summary, "{outcome}, {} functions", res.coverage.len());
                if let Some(t) = target {
                    let reached = if res.coverage.contains(t) { "reached" } else { "not reached" };
                    let _ = write!(summary, ", {t} {reached}");
                }
                let last = res.trace.last().map(|f| f.as_str()).unwrap_or("-");
                let _ = writeln!(summary, ", last function {last}");
                output.push_str(&res.output);
            }
            BlobStatus::Skipped => summary.push_str("skipped\n"),
            BlobStatus::Failed(e) => {
                let _ = writeln!(summary, "not executed: {e}");
            }
        }
    }
    let tail: String = {
        let chars: Vec<char> = output.chars().collect();
        chars[chars.len().saturating_sub(HINT_CHARS)..].iter().collect()
    };
    format!("{summary}--- output ---\n{tail}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzzing::target::{SimRunner, SimTarget};

    fn runner() -> SimRunner {
        SimRunner::new(
            SimTarget::from_json(
                r#"{"version":1,"name":"t","fuzzer":"f","sanitizer":"address","entry":["entry"],
                "rules":[{"guard":{"op":"prefix","bytes":"AB"},"enter":["parse"],"message":"parsed header"},
                {"guard":{"op":"prefix","bytes":"ABC"},"requires":["parse"],
                 "crash":{"location":"parse","vuln_type":"out-of-bounds-read","sanitizer":"address"}}]}"#,
            )
            .unwrap(),
        )
    }

    #[test]
    fn second_variant_crash_skips_third() {
        let out = sp_fuzzer_verify(&[b"AB".to_vec(), b"ABC".to_vec(), b"ABCD".to_vec()], &runner(), None).unwrap();
        assert!(matches!(out.results[0], BlobStatus::Ran(ref r) if !r.crashed()));
        assert!(matches!(out.results[1], BlobStatus::Ran(ref r) if r.crashed()));
        assert_eq!(out.results[2], BlobStatus::Skipped);
        let (i, r) = out.crash.unwrap();
        assert_eq!(i, 1);
        assert_eq!(r.crash().unwrap().location.as_str(), "parse");
    }

    #[test]
    fn all_ok_builds_hint() {
        let target = FunctionId::new("parse");
        let out = sp_fuzzer_verify(&[b"x".to_vec(), b"AB".to_vec()], &runner(), Some(&target)).unwrap();
        assert!(out.crash.is_none());
        assert!(out.hint.contains("variant 1 (1 bytes): no crash, 1 functions, parse not reached"));
        assert!(out.hint.contains("parse reached"));
        assert!(out.hint.contains("parsed header"));
    }

    #[test]
    fn variant_count_checked() {
        assert!(sp_fuzzer_verify(&[], &runner(), None).is_err());
        assert!(sp_fuzzer_verify(&vec![vec![]; 4], &runner(), None).is_err());
    }
}
