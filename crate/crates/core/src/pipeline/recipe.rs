//! Blob recipes: the PoC generator's input format.
//!
//! A recipe is an ordered list of emit instructions evaluated once per
//! variant. Integer-valued fields are expressions over named bindings; the
//! binding `variant` is always set (1-based) so variants differ even when
//! the recipe declares no bindings of its own.
//!
//! ```json
//! {"emit": [
//!    {"bytes": "hex:89504e47"},
//!    {"int": {"value": {"mul": ["variant", 4096]}, "width": 4, "endian": "be"}},
//!    {"repeat": {"byte": 65, "count": "n"}}],
//!  "bindings": [{"n": 1}, {"n": 100}, {"n": 5000}]}
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fuzzing::{Pattern, MAX_BLOB};

/// Integer expression over bindings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Expr {
    Num(i64),
    Var(String),
    Op(OpExpr),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OpExpr {
    Add(Vec<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Vec<Expr>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endian {
    #[default]
    Le,
    Be,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Instruction {
    /// Text, or `hex:..`.
    Bytes(String),
    Repeat { byte: Expr, count: Expr },
    Int {
        value: Expr,
        width: u8,
        #[serde(default)]
        endian: Endian,
    },
    /// `n` bytes from a ChaCha stream keyed by `seed`.
    Random { n: Expr, seed: Expr },
    Concat(Vec<Instruction>),
}

/// Runs an external program to produce a variant. Not used unless the
/// pipeline is given one.
pub trait GeneratorHook: Send + Sync {
    fn generate(&self, program: &str, variant: u32) -> Result<Vec<u8>, String>;
}

/// Runs the configured interpreter with the recipe's program on stdin and
/// takes stdout as the blob. The variant number is passed in
/// `SPSCAN_VARIANT`.
#[derive(Debug, Clone)]
pub struct CommandGenerator {
    pub interpreter: PathBuf,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl GeneratorHook for CommandGenerator {
    fn generate(&self, program: &str, variant: u32) -> Result<Vec<u8>, String> {
        let mut child = Command::new(&self.interpreter)
            .args(&self.args)
            .env("SPSCAN_VARIANT", variant.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("{}: {e}", self.interpreter.display()))?;
        let _ = child.stdin.take().expect("piped").write_all(program.as_bytes());
        let stdout = child.stdout.take().expect("piped");
        let reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.take(MAX_BLOB as u64 + 1).read_to_end(&mut buf);
            buf
        });
        let start = Instant::now();
        let status = loop {
            match child.try_wait().map_err(|e| e.to_string())? {
                Some(s) => break s,
                None if start.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(format!("generator timed out after {:?}", self.timeout));
                }
                None => std::thread::sleep(Duration::from_millis(2)),
            }
        };
        let out = reader.join().unwrap_or_default();
        if !status.success() {
            return Err(format!("generator exited with {status}"));
        }
        if out.len() > MAX_BLOB {
            return Err(format!("generator output exceeds {MAX_BLOB} bytes"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRecipe {
    #[serde(default)]
    pub emit: Vec<Instruction>,
    /// One map per variant. Empty means only `variant` is bound.
    #[serde(default)]
    pub bindings: Vec<BTreeMap<String, i64>>,
    /// Program for the external generator hook; replaces `emit` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<String>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RecipeError {
    #[error("invalid recipe: {0}")]
    Parse(String),
    #[error("recipe has {got} bindings but {want} variants are generated")]
    BindingCount { got: usize, want: usize },
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("arithmetic overflow")]
    Overflow,
    #[error("{what} must be in {range}, got {value}")]
    OutOfRange { what: &'static str, range: &'static str, value: i64 },
    #[error("{0}")]
    BadBytes(String),
    #[error("output exceeds {MAX_BLOB} bytes")]
    TooLarge,
    #[error("recipe needs an external generator but none is configured")]
    NoGenerator,
    #[error("external generator failed: {0}")]
    Generator(String),
}

impl Expr {
    pub fn eval(&self, env: &BTreeMap<String, i64>) -> Result<i64, RecipeError> {
        match self {
            Expr::Num(n) => Ok(*n),
            Expr::Var(v) => env.get(v).copied().ok_or_else(|| RecipeError::Unbound(v.clone())),
            Expr::Op(OpExpr::Add(xs)) => xs.iter().try_fold(0i64, |acc, x| {
                acc.checked_add(x.eval(env)?).ok_or(RecipeError::Overflow)
            }),
            Expr::Op(OpExpr::Mul(xs)) => xs.iter().try_fold(1i64, |acc, x| {
                acc.checked_mul(x.eval(env)?).ok_or(RecipeError::Overflow)
            }),
            Expr::Op(OpExpr::Sub(a, b)) => a.eval(env)?.checked_sub(b.eval(env)?).ok_or(RecipeError::Overflow),
        }
    }
}

fn in_range(what: &'static str, range: &'static str, value: i64, lo: i64, hi: i64) -> Result<i64, RecipeError> {
    if (lo..=hi).contains(&value) {
        Ok(value)
    } else {
        Err(RecipeError::OutOfRange { what, range, value })
    }
}

fn emit(ins: &Instruction, env: &BTreeMap<String, i64>, out: &mut Vec<u8>) -> Result<(), RecipeError> {
    let room = |n: usize, out: &Vec<u8>| if out.len() + n > MAX_BLOB { Err(RecipeError::TooLarge) } else { Ok(()) };
    match ins {
        Instruction::Bytes(s) => {
            let b = Pattern::parse(s).map_err(RecipeError::BadBytes)?.0;
            room(b.len(), out)?;
            out.extend_from_slice(&b);
        }
        Instruction::Repeat { byte, count } => {
            let b = in_range("repeat byte", "0..=255", byte.eval(env)?, 0, 255)? as u8;
            let n = in_range("repeat count", "0..=1048576", count.eval(env)?, 0, MAX_BLOB as i64)? as usize;
            room(n, out)?;
            out.resize(out.len() + n, b);
        }
        Instruction::Int { value, width, endian } => {
            let v = value.eval(env)?;
            let w = *width as usize;
            if ![1, 2, 4, 8].contains(&w) {
                return Err(RecipeError::OutOfRange { what: "int width", range: "1, 2, 4 or 8", value: w as i64 });
            }
            room(w, out)?;
            // two's complement, truncated to the width
            let le = (v as u64).to_le_bytes();
            match endian {
                Endian::Le => out.extend_from_slice(&le[..w]),
                Endian::Be => out.extend(le[..w].iter().rev()),
            }
        }
        Instruction::Random { n, seed } => {
            let n = in_range("random length", "0..=1048576", n.eval(env)?, 0, MAX_BLOB as i64)? as usize;
            room(n, out)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.eval(env)? as u64);
            let start = out.len();
            out.resize(start + n, 0);
            rng.fill_bytes(&mut out[start..]);
        }
        Instruction::Concat(parts) => {
            for p in parts {
                emit(p, env, out)?;
            }
        }
    }
    Ok(())
}

impl BlobRecipe {
    pub fn from_value(v: &serde_json::Value) -> Result<Self, RecipeError> {
        serde_json::from_value(v.clone()).map_err(|e| RecipeError::Parse(e.to_string()))
    }

    /// Evaluates one variant (1-based).
    pub fn variant(
        &self,
        variant: u32,
        bindings: Option<&BTreeMap<String, i64>>,
        hook: Option<&dyn GeneratorHook>,
    ) -> Result<Vec<u8>, RecipeError> {
        if let Some(program) = &self.program {
            let hook = hook.ok_or(RecipeError::NoGenerator)?;
            let blob = hook.generate(program, variant).map_err(RecipeError::Generator)?;
            if blob.len() > MAX_BLOB {
                return Err(RecipeError::TooLarge);
            }
            return Ok(blob);
        }
        let mut env = bindings.cloned().unwrap_or_default();
        env.insert("variant".into(), variant as i64);
        let mut out = Vec::new();
        for ins in &self.emit {
            emit(ins, &env, &mut out)?;
        }
        Ok(out)
    }

    /// Evaluates `count` variants. Deterministic for a given recipe.
    pub fn evaluate(&self, count: usize, hook: Option<&dyn GeneratorHook>) -> Result<Vec<Vec<u8>>, RecipeError> {
        if !self.bindings.is_empty() && self.bindings.len() != count {
            return Err(RecipeError::BindingCount { got: self.bindings.len(), want: count });
        }
        (0..count)
            .map(|i| self.variant(i as u32 + 1, self.bindings.get(i), hook))
            .collect()
    }
}
