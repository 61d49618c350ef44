//! CIDEr-D caption metric.
//!
//! Candidates and references are compared as TF-IDF n-gram vectors for
//! n = 1..4. Document frequency is counted over per-image reference sets,
//! so the weighting needs a corpus: with a single image every IDF term is
//! ln(1) = 0 and all scores collapse to 0. Candidate counts are clipped at
//! the reference counts (the "-D" variant), a Gaussian penalty discounts
//! length differences, and the result is scaled by 10, giving per-image
//! scores in [0, 10].

use crate::text::tokenize;
use std::collections::HashMap;

pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

/// N-grams keyed by their tokens joined with an unprintable separator.
fn ngram_counts(tokens: &[String], n: usize) -> HashMap<String, u32> {
    let mut counts = HashMap::new();
    if tokens.len() < n {
        return counts;
    }
    for win in tokens.windows(n) {
        *counts.entry(win.join("\u{1f}")).or_insert(0) += 1;
    }
    counts
}

/// Document frequencies of reference n-grams over a corpus of images.
#[derive(Debug, Clone)]
pub struct IdfTable {
    n_images: usize,
    /// Per n (0-indexed): n-gram -> number of images containing it.
    df: Vec<HashMap<String, u32>>,
}

impl IdfTable {
    /// `reference_sets[i]` holds the raw reference captions of image `i`.
    pub fn build(reference_sets: &[Vec<String>]) -> IdfTable {
        let mut df = vec![HashMap::new(); CIDER_MAX_N];
        for refs in reference_sets {
            let token_lists: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
            for (n, table) in df.iter_mut().enumerate() {
                let mut seen: HashMap<String, ()> = HashMap::new();
                for toks in &token_lists {
                    for g in ngram_counts(toks, n + 1).into_keys() {
                        seen.entry(g).or_insert(());
                    }
                }
                for g in seen.into_keys() {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        IdfTable { n_images: reference_sets.len(), df }
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    fn idf(&self, n: usize, gram: &str) -> f64 {
        let df = self.df[n].get(gram).copied().unwrap_or(0).max(1) as f64;
        (self.n_images as f64).ln() - df.ln()
    }
}

/// TF-IDF vector for one n: gram -> weight, plus the L2 norm.
fn tfidf(tokens: &[String], n: usize, idf: &IdfTable) -> (HashMap<String, f64>, f64) {
    let counts = ngram_counts(tokens, n + 1);
    let mut vec = HashMap::with_capacity(counts.len());
    let mut norm_sq = 0.0;
    for (g, c) in counts {
        let w = c as f64 * idf.idf(n, &g);
        norm_sq += w * w;
        vec.insert(g, w);
    }
    (vec, norm_sq.sqrt())
}

fn sim_n(
    cand: &HashMap<String, f64>,
    cand_norm: f64,
    rf: &HashMap<String, f64>,
    ref_norm: f64,
    len_delta: f64,
) -> f64 {
    if cand_norm == 0.0 || ref_norm == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (g, &cw) in cand {
        if let Some(&rw) = rf.get(g) {
            acc += cw.min(rw) * rw;
        }
    }
    acc / (cand_norm * ref_norm) * (-(len_delta * len_delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiderScores {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

/// Scores each candidate against its image's references using a prebuilt
/// IDF table. `candidates` and `references` are index-aligned; the table is
/// normally built from the same reference corpus.
///
/// # Panics
/// When the two slices have different lengths.
pub fn cider(candidates: &[String], references: &[Vec<String>], idf: &IdfTable) -> CiderScores {
    assert_eq!(candidates.len(), references.len(), "candidate/reference length mismatch");
    let mut per_image = Vec::with_capacity(candidates.len());
    for (cand, refs) in candidates.iter().zip(references) {
        let cand_tokens = tokenize(cand);
        let mut acc = 0.0;
        for n in 0..CIDER_MAX_N {
            let (cv, cn) = tfidf(&cand_tokens, n, idf);
            if refs.is_empty() {
                continue;
            }
            let mut ref_acc = 0.0;
            for r in refs {
                let ref_tokens = tokenize(r);
                let (rv, rn) = tfidf(&ref_tokens, n, idf);
                let delta = cand_tokens.len() as f64 - ref_tokens.len() as f64;
                ref_acc += sim_n(&cv, cn, &rv, rn, delta);
            }
            acc += ref_acc / refs.len() as f64;
        }
        per_image.push(10.0 * acc / CIDER_MAX_N as f64);
    }
    let mean = if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    };
    CiderScores { per_image, mean }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-6;

    fn run(cands: &[&str], refs: &[&[&str]]) -> CiderScores {
        let candidates: Vec<String> = cands.iter().map(|s| s.to_string()).collect();
        let references: Vec<Vec<String>> =
            refs.iter().map(|rs| rs.iter().map(|s| s.to_string()).collect()).collect();
        let idf = IdfTable::build(&references);
        cider(&candidates, &references, &idf)
    }

    // Expected values computed with an independent formula transcription
    // (see the module docs for the definition).

    #[test]
    fn two_image_fixture() {
        let s = run(
            &["a man rides a horse", "a cat sits"],
            &[&["a man rides a horse", "a person on a horse"], &["a dog runs"]],
        );
        assert!((s.per_image[0] - 5.729166666667).abs() < TOL);
        assert!((s.per_image[1] - 0.0).abs() < TOL);
        assert!((s.mean - 2.864583333333).abs() < TOL);
    }

    #[test]
    fn zero_ngram_overlap_scores_zero() {
        let s = run(
            &["blue ocean waves", "a cat sits"],
            &[&["red desert sand dunes", "dry red sand"], &["a cat sits near a door"]],
        );
        assert!((s.per_image[0] - 0.0).abs() < TOL);
        assert!((s.per_image[1] - 4.299860507435).abs() < TOL);
        assert!((s.mean - 2.149930253718).abs() < TOL);
    }

    #[test]
    fn single_image_corpus_is_all_zero() {
        let s = run(&["a man rides a horse"], &[&["a man rides a horse"]]);
        assert_eq!(s.per_image, vec![0.0]);
        assert_eq!(s.mean, 0.0);
    }

    #[test]
    fn self_match_reaches_ten() {
        let s = run(
            &["a man rides a horse", "a yellow bus stops here"],
            &[&["a man rides a horse"], &["a yellow bus stops here"]],
        );
        assert!((s.per_image[0] - 10.0).abs() < TOL);
        assert!((s.per_image[1] - 10.0).abs() < TOL);
    }

    #[test]
    fn scores_stay_in_range() {
        let s = run(
            &["a a a a a a", "b", ""],
            &[&["a a", "c d e"], &["b b b b"], &["x y"]],
        );
        for v in &s.per_image {
            assert!((0.0..=10.0).contains(v), "score {v} out of range");
        }
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let s = run(&["", "a cat sits"], &[&["a dog runs"], &["a cat sits"]]);
        assert_eq!(s.per_image[0], 0.0);
    }
}
