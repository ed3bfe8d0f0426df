//! Literal-driven seed generation used when no seed-generator agent runs.
//!
//! Tokens are taken from function source text in order of appearance:
//! quoted strings (C escapes decoded), character literals, hex integers as
//! big-endian bytes (`0x89504E47` gives `89 50 4E 47`), and decimal
//! integers of two or more digits as their ASCII text. Single digits are
//! skipped as too common to be useful.

use std::sync::OnceLock;

use regex::Regex;

use crate::callgraph::CallGraph;
use crate::directions::Direction;
use crate::spstore::{SuspiciousPoint, Verdict};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SeedError {
    #[error("suspicious point {0} is not a false positive")]
    NotFalsePositive(String),
}

fn literal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?x)
            "(?P<s>(?:[^"\\\n]|\\.)*)"
          | '(?P<c>\\.|\\x[0-9a-fA-F]{1,2}|[^'\\\n])'
          | \b0[xX](?P<h>[0-9a-fA-F]+)[uUlL]*\b
          | \b(?P<d>[1-9][0-9]+)[uUlL]*\b
            "#,
        )
        .expect("literal pattern")
    })
}

fn unescape(s: &str) -> Vec<u8> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' || i + 1 == bytes.len() {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        i += 1;
        match bytes[i] {
            b'n' => out.push(b'\n'),
            b'r' => out.push(b'\r'),
            b't' => out.push(b'\t'),
            b'0'..=b'7' => {
                let start = i;
                while i < bytes.len() && i - start < 3 && (b'0'..=b'7').contains(&bytes[i]) {
                    i += 1;
                }
                out.push(u8::from_str_radix(&s[start..i], 8).unwrap_or(0));
                continue;
            }
            b'x' => {
                let start = i + 1;
                let mut end = start;
                while end < bytes.len() && end - start < 2 && bytes[end].is_ascii_hexdigit() {
                    end += 1;
                }
                if end > start {
                    out.push(u8::from_str_radix(&s[start..end], 16).unwrap_or(0));
                    i = end;
                    continue;
                }
                out.push(b'x');
            }
            other => out.push(other),
        }
        i += 1;
    }
    out
}

fn hex_bytes(digits: &str) -> Vec<u8> {
    let padded = if digits.len() % 2 == 1 { format!("0{digits}") } else { digits.to_string() };
    hex::decode(padded).unwrap_or_default()
}

/// Literal tokens of one source text, deduplicated, in order.
pub fn literal_tokens(source: &str) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = Vec::new();
    for cap in literal_re().captures_iter(source) {
        let token = if let Some(s) = cap.name("s") {
            unescape(s.as_str())
        } else if let Some(c) = cap.name("c") {
            unescape(c.as_str())
        } else if let Some(h) = cap.name("h") {
            hex_bytes(h.as_str())
        } else if let Some(d) = cap.name("d") {
            d.as_str().as_bytes().to_vec()
        } else {
            continue;
        };
        if !token.is_empty() && !out.contains(&token) {
            out.push(token);
        }
    }
    out
}

/// One seed per token, plus the concatenation of all tokens when there is
/// more than one.
pub fn seeds_from_tokens(tokens: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let mut seeds: Vec<Vec<u8>> = tokens.to_vec();
    if tokens.len() > 1 {
        seeds.push(tokens.concat());
    }
    seeds
}

fn tokens_of<'a>(graph: &CallGraph, names: impl Iterator<Item = &'a String>) -> Vec<Vec<u8>> {
    let mut seen = Vec::new();
    let mut tokens: Vec<Vec<u8>> = Vec::new();
    for name in names {
        let Ok(f) = graph.resolve(name) else { continue };
        if seen.contains(&f.id) {
            continue;
        }
        seen.push(f.id.clone());
        for t in literal_tokens(&f.source_text) {
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
    }
    tokens
}

/// Literal tokens of a direction's entry and core functions.
pub fn direction_tokens(direction: &Direction, subgraph: &CallGraph) -> Vec<Vec<u8>> {
    tokens_of(subgraph, direction.entry_functions.iter().chain(&direction.core_functions))
}

pub fn seed_from_direction(direction: &Direction, subgraph: &CallGraph) -> Vec<Vec<u8>> {
    seeds_from_tokens(&direction_tokens(direction, subgraph))
}

/// Seeds aimed at the function of a point the verifier rejected.
pub fn seed_from_fp(sp: &SuspiciousPoint, graph: &CallGraph) -> Result<Vec<Vec<u8>>, SeedError> {
    if sp.verdict != Verdict::Fp {
        return Err(SeedError::NotFalsePositive(sp.id.to_string()));
    }
    let name = sp.function.to_string();
    Ok(seeds_from_tokens(&tokens_of(graph, std::iter::once(&name))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_each_literal_kind() {
        let src = r#"if (memcmp(buf, "IHDR", 4) == 0 && sig == 0x89504E47u && c == '\n') n = 4096; x = "a\x41\0";"#;
        let t = literal_tokens(src);
        assert_eq!(
            t,
            vec![
                b"IHDR".to_vec(),
                vec![0x89, 0x50, 0x4E, 0x47],
                b"\n".to_vec(),
                b"4096".to_vec(),
                vec![b'a', 0x41, 0],
            ]
        );
    }

    #[test]
    fn identifiers_and_single_digits_are_ignored() {
        assert!(literal_tokens("int png_read_row2(int a) { return a + 1; }").is_empty());
    }

    #[test]
    fn odd_hex_digit_count_pads() {
        assert_eq!(literal_tokens("x = 0xABC;"), vec![vec![0x0A, 0xBC]]);
    }

    #[test]
    fn seeds_include_concatenation() {
        let s = seeds_from_tokens(&[b"AB".to_vec(), b"CD".to_vec()]);
        assert_eq!(s, vec![b"AB".to_vec(), b"CD".to_vec(), b"ABCD".to_vec()]);
        assert!(seeds_from_tokens(&[]).is_empty());
    }
}
