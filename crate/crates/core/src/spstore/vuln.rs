use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Vulnerability class of a suspicious point or crash.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VulnType {
    HeapBufferOverflow,
    StackBufferOverflow,
    GlobalBufferOverflow,
    OutOfBoundsWrite,
    OutOfBoundsRead,
    UseAfterFree,
    DoubleFree,
    NullPointerDereference,
    IntegerOverflow,
    FormatString,
    ArbitraryWrite,
    UninitializedRead,
    Other(String),
}

impl VulnType {
    pub const KNOWN: [VulnType; 12] = [
        VulnType::HeapBufferOverflow,
        VulnType::StackBufferOverflow,
        VulnType::GlobalBufferOverflow,
        VulnType::OutOfBoundsWrite,
        VulnType::OutOfBoundsRead,
        VulnType::UseAfterFree,
        VulnType::DoubleFree,
        VulnType::NullPointerDereference,
        VulnType::IntegerOverflow,
        VulnType::FormatString,
        VulnType::ArbitraryWrite,
        VulnType::UninitializedRead,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            VulnType::HeapBufferOverflow => "heap-buffer-overflow",
            VulnType::StackBufferOverflow => "stack-buffer-overflow",
            VulnType::GlobalBufferOverflow => "global-buffer-overflow",
            VulnType::OutOfBoundsWrite => "out-of-bounds-write",
            VulnType::OutOfBoundsRead => "out-of-bounds-read",
            VulnType::UseAfterFree => "use-after-free",
            VulnType::DoubleFree => "double-free",
            VulnType::NullPointerDereference => "null-pointer-dereference",
            VulnType::IntegerOverflow => "integer-overflow",
            VulnType::FormatString => "format-string",
            VulnType::ArbitraryWrite => "arbitrary-write",
            VulnType::UninitializedRead => "uninitialized-read",
            VulnType::Other(s) => s,
        }
    }
}

impl fmt::Display for VulnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VulnType {
    type Err = std::convert::Infallible;

    /// Accepts the canonical names and the short forms used in triage tables
    /// (`Heap-OF`, `NPD`, `UAF`, ...). Anything else becomes `Other`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match norm.as_str() {
            "heap-buffer-overflow" | "heap-of" => VulnType::HeapBufferOverflow,
            "stack-buffer-overflow" | "stack-of" => VulnType::StackBufferOverflow,
            "global-buffer-overflow" | "global-of" => VulnType::GlobalBufferOverflow,
            "out-of-bounds-write" | "oob-w" => VulnType::OutOfBoundsWrite,
            "out-of-bounds-read" | "oob-r" => VulnType::OutOfBoundsRead,
            "use-after-free" | "uaf" => VulnType::UseAfterFree,
            "double-free" | "dblfree" => VulnType::DoubleFree,
            "null-pointer-dereference" | "npd" => VulnType::NullPointerDereference,
            "integer-overflow" | "int-of" => VulnType::IntegerOverflow,
            "format-string" | "fmt-str" => VulnType::FormatString,
            "arbitrary-write" | "arb-w" => VulnType::ArbitraryWrite,
            "uninitialized-read" | "use-of-uninitialized-value" => VulnType::UninitializedRead,
            _ => VulnType::Other(s.trim().to_string()),
        })
    }
}

impl Serialize for VulnType {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for VulnType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

/// Runtime detector class a worker's target is built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sanitizer {
    Address,
    Memory,
    Undefined,
}

impl Sanitizer {
    pub const ALL: [Sanitizer; 3] = [Sanitizer::Address, Sanitizer::Memory, Sanitizer::Undefined];

    pub fn as_str(&self) -> &'static str {
        match self {
            Sanitizer::Address => "address",
            Sanitizer::Memory => "memory",
            Sanitizer::Undefined => "undefined",
        }
    }

    /// Whether this sanitizer can observe `vuln`.
    ///
    /// address: overflows, out-of-bounds accesses, use-after-free,
    /// double-free, arbitrary writes, plus null dereferences and format
    /// string bugs (both surface as invalid accesses).
    /// memory: uninitialized reads. undefined: integer overflow, null
    /// dereference, format string. `Other` is treated as compatible with
    /// every sanitizer so it is never filtered on type alone.
    pub fn detects(&self, vuln: &VulnType) -> bool {
        use VulnType::*;
        match self {
            Sanitizer::Address => matches!(
                vuln,
                HeapBufferOverflow
                    | StackBufferOverflow
                    | GlobalBufferOverflow
                    | OutOfBoundsWrite
                    | OutOfBoundsRead
                    | UseAfterFree
                    | DoubleFree
                    | ArbitraryWrite
                    | NullPointerDereference
                    | FormatString
                    | Other(_)
            ),
            Sanitizer::Memory => matches!(vuln, UninitializedRead | Other(_)),
            Sanitizer::Undefined => matches!(
                vuln,
                IntegerOverflow | NullPointerDereference | FormatString | Other(_)
            ),
        }
    }
}

impl fmt::Display for Sanitizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown sanitizer `{0}`")]
pub struct UnknownSanitizer(pub String);

impl FromStr for Sanitizer {
    type Err = UnknownSanitizer;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "address" | "asan" | "addresssanitizer" => Ok(Sanitizer::Address),
            "memory" | "msan" | "memorysanitizer" => Ok(Sanitizer::Memory),
            "undefined" | "ubsan" | "undefinedbehaviorsanitizer" => Ok(Sanitizer::Undefined),
            _ => Err(UnknownSanitizer(s.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_type_has_a_sanitizer() {
        for v in VulnType::KNOWN.iter().chain([VulnType::Other("leak".into())].iter()) {
            assert!(Sanitizer::ALL.iter().any(|s| s.detects(v)), "{v}");
        }
    }

    #[test]
    fn short_forms_parse() {
        assert_eq!("Heap-OF".parse::<VulnType>().unwrap(), VulnType::HeapBufferOverflow);
        assert_eq!("NPD".parse::<VulnType>().unwrap(), VulnType::NullPointerDereference);
        assert_eq!("Stack-OF".parse::<VulnType>().unwrap(), VulnType::StackBufferOverflow);
        assert_eq!("memory-leak".parse::<VulnType>().unwrap(), VulnType::Other("memory-leak".into()));
    }

    #[test]
    fn names_round_trip() {
        for v in VulnType::KNOWN {
            assert_eq!(v.as_str().parse::<VulnType>().unwrap(), v);
        }
    }

    #[test]
    fn compatibility_table() {
        assert!(Sanitizer::Address.detects(&VulnType::UseAfterFree));
        assert!(!Sanitizer::Address.detects(&VulnType::UninitializedRead));
        assert!(Sanitizer::Memory.detects(&VulnType::UninitializedRead));
        assert!(!Sanitizer::Memory.detects(&VulnType::HeapBufferOverflow));
        assert!(Sanitizer::Undefined.detects(&VulnType::IntegerOverflow));
        assert!(!Sanitizer::Undefined.detects(&VulnType::DoubleFree));
    }
}
