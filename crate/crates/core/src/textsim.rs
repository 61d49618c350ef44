//! Phrase similarity providers.
//!
//! Metrics that compare predicted and ground-truth phrases go through the
//! [`TextSimProvider`] trait so the similarity backend is swappable: the
//! built-in lexical provider works offline, while an embedding-service
//! provider can be plugged in where a model endpoint is available.

use crate::text::{stem, tokenize};
use std::collections::BTreeSet;

pub trait TextSimProvider: Send + Sync {
    /// Similarity in [0, 1]. Every provider must score a non-empty string
    /// against itself at 1.0 (or at least above any sane match threshold).
    fn sim(&self, a: &str, b: &str) -> f64;
}

/// Token-set F1 over stemmed tokens. Symmetric; two empty strings score 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalSim;

fn stem_set(s: &str) -> BTreeSet<String> {
    tokenize(s).iter().map(|t| stem(t)).collect()
}

impl TextSimProvider for LexicalSim {
    fn sim(&self, a: &str, b: &str) -> f64 {
        let sa = stem_set(a);
        let sb = stem_set(b);
        if sa.is_empty() && sb.is_empty() {
            return 1.0;
        }
        if sa.is_empty() || sb.is_empty() {
            return 0.0;
        }
        let inter = sa.intersection(&sb).count();
        2.0 * inter as f64 / (sa.len() + sb.len()) as f64
    }
}

/// Fixed-value provider, for tests exercising threshold edges.
#[derive(Debug, Clone, Copy)]
pub struct ConstSim(pub f64);

impl TextSimProvider for ConstSim {
    fn sim(&self, _a: &str, _b: &str) -> f64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_overlap_f1() {
        // {an, old, white, car} vs {white, car}: F1 = 2*2 / (4+2).
        let got = LexicalSim.sim("an old white car", "white car");
        assert!((got - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(LexicalSim.sim("an old white car", "white car"),
                   LexicalSim.sim("white car", "an old white car"));
    }

    #[test]
    fn reflexive_on_non_empty() {
        for s in ["car", "an old white car", "the dogs"] {
            assert_eq!(LexicalSim.sim(s, s), 1.0);
        }
    }

    #[test]
    fn stems_unify_inflections() {
        assert_eq!(LexicalSim.sim("the dogs", "the dog"), 1.0);
    }

    #[test]
    fn empty_conventions() {
        assert_eq!(LexicalSim.sim("", ""), 1.0);
        assert_eq!(LexicalSim.sim("", "car"), 0.0);
        assert_eq!(LexicalSim.sim("...", "car"), 0.0); // tokenizes to nothing
    }

    #[test]
    fn duplicates_do_not_inflate() {
        assert_eq!(LexicalSim.sim("car car car", "car"), 1.0);
    }
}
