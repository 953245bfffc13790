//! ROUGE-L similarity over word tokens.
//!
//! The score is the LCS F-measure `2·LCS(a,b) / (|a|+|b|)`. The LCS length is
//! computed with a bit-parallel recurrence (one machine word covers 64 token
//! positions) so that all-pairs scans over template buckets of roughly a
//! thousand records stay cheap.

use std::collections::HashMap;

use rayon::prelude::*;

/// Lowercased word tokens with surrounding punctuation stripped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    tokens: Vec<String>,
}

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        TokenSeq {
            tokens: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// Lowercase, split on whitespace, trim non-alphanumeric characters from
/// both ends of every token and drop tokens left empty.
pub fn tokenize(text: &str) -> TokenSeq {
    let tokens = text
        .split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect();
    TokenSeq { tokens }
}

/// ROUGE-L F-measure. Two empty sequences score 0.
pub fn rouge_l(a: &TokenSeq, b: &TokenSeq) -> f64 {
    let mut interner = Interner::default();
    let a = interner.intern(a);
    let b = interner.intern(b);
    let profile = Profile::new(&a);
    f_measure(profile.lcs(&b), a.len(), b.len())
}

/// Highest ROUGE-L of `candidate` against any pool member, with the index of
/// the first member attaining it. An empty pool yields `(0.0, None)`.
pub fn max_similarity(candidate: &TokenSeq, pool: &[TokenSeq]) -> (f64, Option<usize>) {
    let mut interner = Interner::default();
    let cand = interner.intern(candidate);
    let profile = Profile::new(&cand);
    let mut best = (0.0, None);
    for (idx, member) in pool.iter().enumerate() {
        let ids = interner.intern(member);
        let score = f_measure(profile.lcs(&ids), cand.len(), ids.len());
        if best.1.is_none() || score > best.0 {
            best = (score, Some(idx));
        }
    }
    best
}

/// For each sequence, the maximum ROUGE-L against every other sequence.
/// Fewer than two sequences yields all zeros.
pub fn pairwise_max(records: &[TokenSeq]) -> Vec<f64> {
    SimIndex::new(records).pairwise_max()
}

/// Like [`pairwise_max`] but only compares records sharing a bucket key
/// (for example a template id). Records alone in their bucket get 0.
pub fn pairwise_max_bucketed<K>(records: &[TokenSeq], keys: &[K]) -> Vec<f64>
where
    K: std::hash::Hash + Eq + Sync,
{
    assert_eq!(records.len(), keys.len(), "one bucket key per record");
    let mut groups: HashMap<&K, Vec<usize>> = HashMap::new();
    for (idx, key) in keys.iter().enumerate() {
        groups.entry(key).or_default().push(idx);
    }
    let mut out = vec![0.0; records.len()];
    for members in groups.values() {
        let seqs: Vec<TokenSeq> = members.iter().map(|&i| records[i].clone()).collect();
        let maxima = pairwise_max(&seqs);
        for (&idx, value) in members.iter().zip(maxima) {
            out[idx] = value;
        }
    }
    out
}

fn f_measure(lcs: usize, len_a: usize, len_b: usize) -> f64 {
    let total = len_a + len_b;
    if total == 0 {
        0.0
    } else {
        2.0 * lcs as f64 / total as f64
    }
}

#[derive(Default)]
struct Interner {
    ids: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, seq: &TokenSeq) -> Vec<u32> {
        seq.tokens
            .iter()
            .map(|tok| {
                let next = self.ids.len() as u32;
                *self.ids.entry(tok.clone()).or_insert(next)
            })
            .collect()
    }
}

/// Position bitmasks of every distinct token in a sequence.
#[derive(Debug, Clone)]
struct Profile {
    len: usize,
    words: usize,
    // sorted by token id
    masks: Vec<(u32, Vec<u64>)>,
}

impl Profile {
    fn new(seq: &[u32]) -> Self {
        let words = seq.len().div_ceil(64).max(1);
        let mut by_token: HashMap<u32, Vec<u64>> = HashMap::new();
        for (pos, &tok) in seq.iter().enumerate() {
            let mask = by_token.entry(tok).or_insert_with(|| vec![0; words]);
            mask[pos / 64] |= 1u64 << (pos % 64);
        }
        let mut masks: Vec<_> = by_token.into_iter().collect();
        masks.sort_unstable_by_key(|(tok, _)| *tok);
        Profile {
            len: seq.len(),
            words,
            masks,
        }
    }

    fn mask(&self, tok: u32) -> Option<&[u64]> {
        self.masks
            .binary_search_by_key(&tok, |(t, _)| *t)
            .ok()
            .map(|i| self.masks[i].1.as_slice())
    }

    /// LCS length against `other` (Crochemore et al. bit-vector recurrence:
    /// `V' = (V + (V & M)) | (V & !M)`; zero bits of `V` count the LCS).
    fn lcs(&self, other: &[u32]) -> usize {
        if self.len == 0 || other.is_empty() {
            return 0;
        }
        if self.words == 1 {
            return self.lcs_single(other);
        }
        let mut v = vec![u64::MAX; self.words];
        for &tok in other {
            let Some(m) = self.mask(tok) else { continue };
            let mut carry = 0u64;
            for w in 0..self.words {
                let u = v[w] & m[w];
                let (s1, c1) = v[w].overflowing_add(u);
                let (s2, c2) = s1.overflowing_add(carry);
                carry = (c1 || c2) as u64;
                v[w] = s2 | (v[w] & !m[w]);
            }
        }
        self.count_zeros(&v)
    }

    fn lcs_single(&self, other: &[u32]) -> usize {
        let mut v = u64::MAX;
        for &tok in other {
            if let Some(m) = self.mask(tok) {
                let m = m[0];
                v = v.wrapping_add(v & m) | (v & !m);
            }
        }
        self.count_zeros(std::slice::from_ref(&v))
    }

    fn count_zeros(&self, v: &[u64]) -> usize {
        let mut zeros = 0;
        for (w, &word) in v.iter().enumerate() {
            let bits = (self.len - w * 64).min(64);
            let live = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
            zeros += (!word & live).count_ones() as usize;
        }
        zeros
    }
}

/// Interned, profiled corpus for repeated similarity queries.
pub struct SimIndex {
    seqs: Vec<Vec<u32>>,
    profiles: Vec<Profile>,
}

impl SimIndex {
    pub fn new(records: &[TokenSeq]) -> Self {
        let mut interner = Interner::default();
        let seqs: Vec<Vec<u32>> = records.iter().map(|r| interner.intern(r)).collect();
        let profiles = seqs.iter().map(|s| Profile::new(s)).collect();
        SimIndex { seqs, profiles }
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        let lcs = self.profiles[i].lcs(&self.seqs[j]);
        f_measure(lcs, self.seqs[i].len(), self.seqs[j].len())
    }

    /// Rows are computed independently, so the result does not depend on
    /// how rayon schedules them.
    pub fn pairwise_max(&self) -> Vec<f64> {
        let n = self.len();
        if n < 2 {
            return vec![0.0; n];
        }
        (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| self.similarity(i, j))
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

/// Growing pool used by the acceptance gate. Keeps its own interner so new
/// members are profiled once on insertion.
#[derive(Default)]
pub struct DedupPool {
    interner: Interner,
    seqs: Vec<Vec<u32>>,
}

impl DedupPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn insert(&mut self, seq: &TokenSeq) {
        let ids = self.interner.intern(seq);
        self.seqs.push(ids);
    }

    /// Same contract as [`max_similarity`] against the pool members.
    pub fn max_similarity(&mut self, candidate: &TokenSeq) -> (f64, Option<usize>) {
        let cand = self.interner.intern(candidate);
        let profile = Profile::new(&cand);
        let mut best = (0.0, None);
        for (idx, member) in self.seqs.iter().enumerate() {
            let score = f_measure(profile.lcs(member), cand.len(), member.len());
            if best.1.is_none() || score > best.0 {
                best = (score, Some(idx));
            }
        }
        best
    }
}
