//! METEOR caption metric, exact and stem matching stages.
//!
//! Unigram matches are found in two stages: exact string equality first
//! (maximal), then stem equality over the leftovers. With m matches against
//! a candidate of length `len_c` and a reference of length `len_r`:
//!
//! ```text
//! P = m / len_c      R = m / len_r      F = 10 P R / (R + 9 P)
//! Penalty = 0.5 (chunks / m)^3          score = F (1 - Penalty)
//! ```
//!
//! `chunks` is the smallest number of contiguous matched runs over any
//! alignment realizing the stage-wise maximal match counts; the minimum is
//! found by exhaustive search over candidate positions with pruning. The
//! returned score is the maximum over the references.

use crate::text::{stem_tokens, tokenize};
use std::collections::HashMap;

/// Cap on alignment-search nodes. Sentence-sized captions stay far below
/// this; if a pathological input exceeds it the best alignment found so far
/// is used (still a valid maximal matching, chunks possibly overcounted).
const SEARCH_BUDGET: usize = 200_000;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Match {
    Exact,
    Stem,
}

struct AlignProblem<'a> {
    cand: &'a [String],
    refs: &'a [String],
    cand_stems: &'a [String],
    ref_stems: &'a [String],
    need_exact: usize,
    need_total: usize,
}

impl AlignProblem<'_> {
    fn kind(&self, i: usize, j: usize) -> Option<Match> {
        if self.cand[i] == self.refs[j] {
            Some(Match::Exact)
        } else if self.cand_stems[i] == self.ref_stems[j] {
            Some(Match::Stem)
        } else {
            None
        }
    }
}

/// Count-based maximum for stage 1 (exact) and stage 2 (stems of the
/// residual). Which duplicate occurrences stage 1 consumes never changes
/// the residual counts, so the two maxima are well-defined.
fn stage_maxima(p: &AlignProblem) -> (usize, usize) {
    let mut cand_counts: HashMap<&str, i64> = HashMap::new();
    let mut ref_counts: HashMap<&str, i64> = HashMap::new();
    for w in p.cand {
        *cand_counts.entry(w).or_insert(0) += 1;
    }
    for w in p.refs {
        *ref_counts.entry(w).or_insert(0) += 1;
    }
    let exact: i64 =
        cand_counts.iter().map(|(w, &c)| c.min(ref_counts.get(w).copied().unwrap_or(0))).sum();
    let mut resid_c: HashMap<&str, i64> = HashMap::new();
    let mut resid_r: HashMap<&str, i64> = HashMap::new();
    for (i, w) in p.cand.iter().enumerate() {
        let used = (*cand_counts.get(w.as_str()).unwrap())
            .min(ref_counts.get(w.as_str()).copied().unwrap_or(0));
        // spread the residual over occurrences: occurrence index >= used
        let occ_before = p.cand[..i].iter().filter(|x| *x == w).count() as i64;
        if occ_before >= used {
            *resid_c.entry(&p.cand_stems[i]).or_insert(0) += 1;
        }
    }
    for (j, w) in p.refs.iter().enumerate() {
        let used = (*ref_counts.get(w.as_str()).unwrap())
            .min(cand_counts.get(w.as_str()).copied().unwrap_or(0));
        let occ_before = p.refs[..j].iter().filter(|x| *x == w).count() as i64;
        if occ_before >= used {
            *resid_r.entry(&p.ref_stems[j]).or_insert(0) += 1;
        }
    }
    let stem: i64 =
        resid_c.iter().map(|(s, &c)| c.min(resid_r.get(s).copied().unwrap_or(0))).sum();
    (exact as usize, stem as usize)
}

fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    let mut sorted: Vec<_> = pairs.to_vec();
    sorted.sort_unstable();
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(i, j) in &sorted {
        match prev {
            Some((pi, pj)) if i == pi + 1 && j == pj + 1 => {}
            _ => chunks += 1,
        }
        prev = Some((i, j));
    }
    chunks
}

/// Quota-respecting greedy alignment: pairs duplicate occurrences of each
/// word left to right (stage 1), then residual stems (stage 2). Guaranteed
/// to realize (need_exact, need_total), with no chunk optimization.
fn greedy_alignment(p: &AlignProblem) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; p.cand.len()];
    let mut used_r = vec![false; p.refs.len()];
    let mut pairs = Vec::new();
    for i in 0..p.cand.len() {
        if used_c[i] {
            continue;
        }
        if let Some(j) = (0..p.refs.len()).find(|&j| !used_r[j] && p.refs[j] == p.cand[i]) {
            used_c[i] = true;
            used_r[j] = true;
            pairs.push((i, j));
        }
    }
    for i in 0..p.cand.len() {
        if used_c[i] {
            continue;
        }
        if let Some(j) = (0..p.refs.len())
            .find(|&j| !used_r[j] && p.refs[j] != p.cand[i] && p.ref_stems[j] == p.cand_stems[i])
        {
            used_c[i] = true;
            used_r[j] = true;
            pairs.push((i, j));
        }
    }
    debug_assert_eq!(pairs.len(), p.need_total);
    pairs
}

struct Search<'a> {
    p: &'a AlignProblem<'a>,
    used_r: Vec<bool>,
    best: usize,
    nodes: usize,
}

impl Search<'_> {
    /// DFS over candidate positions. `chunks` counts runs among pairs so
    /// far; `prev` is the last matched (cand, ref) pair.
    fn go(
        &mut self,
        i: usize,
        exact_left: usize,
        stem_left: usize,
        chunks: usize,
        prev: Option<(usize, usize)>,
    ) {
        if chunks >= self.best {
            return; // cannot improve
        }
        let left = exact_left + stem_left;
        if left == 0 {
            self.best = chunks;
            return;
        }
        if self.nodes >= SEARCH_BUDGET {
            return;
        }
        self.nodes += 1;
        if self.p.cand.len() - i < left {
            return; // not enough positions remain
        }
        // Try matching position i; extension of the current run first so a
        // low-chunk solution is found early and prunes the rest.
        let preferred = match prev {
            Some((pi, pj)) if pi + 1 == i && pj + 1 < self.p.refs.len() => Some(pj + 1),
            _ => None,
        };
        let mut js: Vec<usize> = Vec::with_capacity(self.p.refs.len());
        js.extend(preferred);
        js.extend((0..self.p.refs.len()).filter(|&j| Some(j) != preferred));
        for j in js {
            if self.used_r[j] {
                continue;
            }
            let kind = match self.p.kind(i, j) {
                Some(k) => k,
                None => continue,
            };
            match kind {
                Match::Exact if exact_left == 0 => continue,
                Match::Stem if stem_left == 0 => continue,
                _ => {}
            }
            let extends = matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j);
            let next_chunks = if extends { chunks } else { chunks + 1 };
            self.used_r[j] = true;
            let (e, s) = match kind {
                Match::Exact => (exact_left - 1, stem_left),
                Match::Stem => (exact_left, stem_left - 1),
            };
            self.go(i + 1, e, s, next_chunks, Some((i, j)));
            self.used_r[j] = false;
        }
        // Or skip position i (run cannot be extended through a gap).
        self.go(i + 1, exact_left, stem_left, chunks, prev);
    }
}

fn min_chunks(p: &AlignProblem) -> usize {
    let greedy = greedy_alignment(p);
    let upper = chunk_count(&greedy);
    if upper == 1 {
        return 1;
    }
    let mut search = Search { p, used_r: vec![false; p.refs.len()], best: upper, nodes: 0 };
    search.go(0, p.need_exact, p.need_total - p.need_exact, 0, None);
    search.best
}

fn meteor_single(
    cand: &[String],
    cand_stems: &[String],
    reference: &[String],
    ref_stems: &[String],
) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut p = AlignProblem {
        cand,
        refs: reference,
        cand_stems,
        ref_stems,
        need_exact: 0,
        need_total: 0,
    };
    let (m1, m2) = stage_maxima(&p);
    let m = m1 + m2;
    if m == 0 {
        return 0.0;
    }
    p.need_exact = m1;
    p.need_total = m;
    let chunks = min_chunks(&p);
    let mf = m as f64;
    let precision = mf / cand.len() as f64;
    let recall = mf / reference.len() as f64;
    let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let penalty = 0.5 * (chunks as f64 / mf).powi(3);
    f_mean * (1.0 - penalty)
}

/// Scores a candidate against one or more references, taking the maximum.
/// Empty candidate, empty references, or zero matches yield 0.
pub fn meteor(candidate: &str, references: &[String]) -> f64 {
    let cand = tokenize(candidate);
    let cand_stems = stem_tokens(&cand);
    references
        .iter()
        .map(|r| {
            let rt = tokenize(r);
            let rs = stem_tokens(&rt);
            meteor_single(&cand, &cand_stems, &rt, &rs)
        })
        .fold(0.0, f64::max)
}
