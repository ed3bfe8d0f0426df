use std::collections::BTreeSet;

/// Lower-cased alphanumeric/underscore tokens of `text`.
pub fn token_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Jaccard index of the two token sets as an exact fraction
/// `(intersection, union)`. Two empty texts compare as `(1, 1)`.
pub fn jaccard_fraction(a: &str, b: &str) -> (usize, usize) {
    let ta = token_set(a);
    let tb = token_set(b);
    let union = ta.union(&tb).count();
    if union == 0 {
        return (1, 1);
    }
    (ta.intersection(&tb).count(), union)
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    let (i, u) = jaccard_fraction(a, b);
    i as f64 / u as f64
}

/// Similarity threshold held as a reduced fraction so boundary values such
/// as 3/5 compare exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Threshold {
    num: usize,
    den: usize,
}

impl Threshold {
    pub const DEFAULT: Threshold = Threshold { num: 3, den: 5 };

    pub fn new(num: usize, den: usize) -> Self {
        assert!(den > 0 && num <= den, "threshold must be a fraction in [0,1]");
        Threshold { num, den }
    }

    pub fn admits(&self, a: &str, b: &str) -> bool {
        let (i, u) = jaccard_fraction(a, b);
        i * self.den >= self.num * u
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Self::DEFAULT
    }
}
