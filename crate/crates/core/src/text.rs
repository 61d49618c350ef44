//! Shared caption tokenization and stemming.
//!
//! Tokens are lowercased, whitespace-split words with leading and trailing
//! punctuation stripped; interior punctuation (hyphens, apostrophes) is kept
//! so "well-manicured" stays one token. Stemming uses the Snowball English
//! (Porter-family) stemmer.

use rust_stemmers::{Algorithm, Stemmer};
use std::sync::OnceLock;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let t = w.trim_matches(|c: char| !c.is_alphanumeric());
            if t.is_empty() {
                None
            } else {
                Some(t.to_lowercase())
            }
        })
        .collect()
}

fn stemmer() -> &'static Stemmer {
    static STEMMER: OnceLock<Stemmer> = OnceLock::new();
    STEMMER.get_or_init(|| Stemmer::create(Algorithm::English))
}

pub fn stem(word: &str) -> String {
    let lower = word.to_lowercase();
    stemmer().stem(&lower).into_owned()
}

pub fn stem_tokens(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| stem(t)).collect()
}
