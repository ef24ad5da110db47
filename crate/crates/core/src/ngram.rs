//! Character n-gram mining and longest-suffix lookup.
//!
//! Both the raw counts and the retained index are tries keyed on the
//! *reversed* n-gram: the path root → `c_t` → `c_{t-1}` → … spells the
//! n-gram ending at position `t` backwards. Proper suffixes of an n-gram are
//! therefore exactly its ancestors, and a longest-match query is a single
//! descent from the root along the history read right to left.

use serde::{Deserialize, Serialize};

use crate::corpus::{escape_str, CharVocab};
use crate::error::{Error, Result};

const ROOT: u32 = 0;

#[derive(Debug, Clone, Default)]
struct TrieNode {
    count: u64,
    /// `(symbol, child index)`, sorted by symbol.
    children: Vec<(u32, u32)>,
}

#[derive(Debug, Clone)]
struct ReverseTrie {
    nodes: Vec<TrieNode>,
}

impl ReverseTrie {
    fn new() -> Self {
        ReverseTrie {
            nodes: vec![TrieNode::default()],
        }
    }

    #[inline]
    fn child(&self, node: u32, sym: u32) -> Option<u32> {
        let children = &self.nodes[node as usize].children;
        children
            .binary_search_by_key(&sym, |&(s, _)| s)
            .ok()
            .map(|i| children[i].1)
    }

    fn child_or_insert(&mut self, node: u32, sym: u32) -> u32 {
        let next = self.nodes.len() as u32;
        let children = &mut self.nodes[node as usize].children;
        match children.binary_search_by_key(&sym, |&(s, _)| s) {
            Ok(i) => children[i].1,
            Err(i) => {
                children.insert(i, (sym, next));
                self.nodes.push(TrieNode::default());
                next
            }
        }
    }

    /// Node for an n-gram given in text order.
    fn find(&self, ngram: &[u32]) -> Option<u32> {
        ngram
            .iter()
            .rev()
            .try_fold(ROOT, |node, &sym| self.child(node, sym))
    }
}

/// Counts of every contiguous n-gram of length `1..=n_max`.
#[derive(Debug, Clone)]
pub struct NGramCounts {
    trie: ReverseTrie,
    n_max: usize,
}

impl NGramCounts {
    /// An empty multiset to be filled with [`Self::insert`].
    pub fn empty(n_max: usize) -> Self {
        NGramCounts {
            trie: ReverseTrie::new(),
            n_max,
        }
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Number of positions counted (the count attached to the empty n-gram).
    pub fn positions(&self) -> u64 {
        self.trie.nodes[ROOT as usize].count
    }

    pub fn get(&self, ngram: &[u32]) -> u64 {
        if ngram.is_empty() {
            return self.positions();
        }
        self.trie
            .find(ngram)
            .map_or(0, |n| self.trie.nodes[n as usize].count)
    }

    /// Adds `count` occurrences of `ngram` (text order). Intermediate
    /// suffixes are created with zero count.
    pub fn insert(&mut self, ngram: &[u32], count: u64) {
        let node = ngram
            .iter()
            .rev()
            .fold(ROOT, |node, &sym| self.trie.child_or_insert(node, sym));
        self.trie.nodes[node as usize].count += count;
    }

    /// All n-grams with a positive count, in text order.
    pub fn to_vec(&self) -> Vec<(Vec<u32>, u64)> {
        let mut out = Vec::new();
        walk_paths(&self.trie, |node, rev_path| {
            let count = self.trie.nodes[node as usize].count;
            if !rev_path.is_empty() && count > 0 {
                out.push((rev_path.iter().rev().copied().collect(), count));
            }
        });
        out
    }
}

/// Depth-first walk carrying the reversed path to each node.
fn walk_paths(trie: &ReverseTrie, mut visit: impl FnMut(u32, &[u32])) {
    let mut path: Vec<u32> = Vec::new();
    // (node, depth, symbol that leads to node)
    let mut stack: Vec<(u32, usize, u32)> = vec![(ROOT, 0, 0)];
    while let Some((node, depth, sym)) = stack.pop() {
        path.truncate(depth.saturating_sub(1));
        if depth > 0 {
            path.push(sym);
        }
        visit(node, &path);
        for &(s, child) in trie.nodes[node as usize].children.iter().rev() {
            stack.push((child, depth + 1, s));
        }
    }
}

pub fn count_ngrams(stream: &[u32], n_max: usize) -> Result<NGramCounts> {
    if n_max < 1 {
        return Err(Error::Param("n-gram order must be at least 1".into()));
    }
    let mut counts = NGramCounts::empty(n_max);
    counts.trie.nodes[ROOT as usize].count = stream.len() as u64;
    for t in 0..stream.len() {
        let mut node = ROOT;
        for k in 0..n_max.min(t + 1) {
            node = counts.trie.child_or_insert(node, stream[t - k]);
            counts.trie.nodes[node as usize].count += 1;
        }
    }
    Ok(counts)
}

/// Dense index into the conditional model's output bank. 0 is the empty
/// context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextId(pub u32);

impl ContextId {
    pub const EMPTY: ContextId = ContextId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub ngram: Vec<u32>,
    pub count: u64,
}

/// Frequency-filtered, suffix-closed n-gram set with longest-match lookup.
#[derive(Debug, Clone)]
pub struct NGramIndex {
    /// Reverse trie over retained n-grams; `count` holds the context id.
    trie: ReverseTrie,
    entries: Vec<IndexEntry>,
    n_max: usize,
    theta: u64,
}

impl PartialEq for NGramIndex {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && self.n_max == other.n_max && self.theta == other.theta
    }
}

impl NGramIndex {
    /// Index with the empty context only: every query maps to context 0.
    pub fn single_context() -> Self {
        NGramIndex {
            trie: ReverseTrie::new(),
            entries: vec![IndexEntry {
                ngram: Vec::new(),
                count: 0,
            }],
            n_max: 0,
            theta: u64::MAX,
        }
    }

    /// Rebuilds an index from its entries in context-id order (entry 0 must
    /// be the empty n-gram).
    pub fn from_entries(entries: Vec<IndexEntry>, n_max: usize, theta: u64) -> Result<Self> {
        if entries.first().map(|e| e.ngram.is_empty()) != Some(true) {
            return Err(Error::Input("index entry 0 must be the empty context".into()));
        }
        let mut trie = ReverseTrie::new();
        for (id, e) in entries.iter().enumerate().skip(1) {
            if e.ngram.is_empty() || e.ngram.len() > n_max {
                return Err(Error::Input(format!("index entry {id} has bad length")));
            }
            // the longest proper suffix must already be present
            let parent = trie
                .find(&e.ngram[1..])
                .ok_or_else(|| Error::Input(format!("index entry {id} breaks suffix closure")))?;
            let before = trie.nodes.len();
            let node = trie.child_or_insert(parent, e.ngram[0]);
            if trie.nodes.len() == before {
                return Err(Error::Input(format!("duplicate index entry {id}")));
            }
            trie.nodes[node as usize].count = id as u64;
        }
        Ok(NGramIndex {
            trie,
            entries,
            n_max,
            theta,
        })
    }

    /// Number of contexts, the empty one included (`|𝒩| + 1`).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn theta(&self) -> u64 {
        self.theta
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn ngram(&self, ctx: ContextId) -> &[u32] {
        &self.entries[ctx.index()].ngram
    }

    pub fn contains(&self, ngram: &[u32]) -> bool {
        ngram.is_empty() || self.trie.find(ngram).is_some()
    }

    /// Context of the longest suffix of `history` (text order, most recent
    /// character last) that is in the index. Only the last `n_max`
    /// characters are consulted. An unseen last character gives
    /// [`ContextId::EMPTY`].
    #[inline]
    pub fn longest_match(&self, history: &[u32]) -> ContextId {
        let mut node = ROOT;
        for &sym in history.iter().rev().take(self.n_max) {
            match self.trie.child(node, sym) {
                Some(child) => node = child,
                None => break,
            }
        }
        ContextId(self.trie.nodes[node as usize].count as u32)
    }

    /// Context used to predict `stream[t + 1]`: the longest match over the
    /// window ending at `t` inclusive.
    #[inline]
    pub fn context_at(&self, stream: &[u32], t: usize) -> ContextId {
        let start = (t + 1).saturating_sub(self.n_max);
        self.longest_match(&stream[start..=t])
    }

    /// Inspection dump, one `count<TAB>id<TAB>escaped n-gram` line per context.
    pub fn dump(&self, cv: &CharVocab) -> String {
        let mut out = String::new();
        for (id, e) in self.entries.iter().enumerate() {
            let text: String = cv.decode(&e.ngram);
            out.push_str(&format!("{}\t{}\t{}\n", e.count, id, escape_str(&text)));
        }
        out
    }
}

/// Keeps n-grams of length `<= n_max` seen at least `theta` times, every
/// observed unigram, and every suffix of a kept n-gram. Context ids are
/// assigned by (length, symbol sequence), after the empty context.
pub fn build_index(counts: &NGramCounts, theta: u64, n_max: usize) -> Result<NGramIndex> {
    if theta < 1 {
        return Err(Error::Param("n-gram cutoff must be at least 1".into()));
    }
    if n_max < 1 {
        return Err(Error::Param("n-gram order must be at least 1".into()));
    }
    let trie = &counts.trie;
    let mut keep = vec![false; trie.nodes.len()];
    let mut parent = vec![ROOT; trie.nodes.len()];
    let mut depth = vec![0usize; trie.nodes.len()];
    let mut order = vec![ROOT];
    let mut i = 0;
    while i < order.len() {
        let node = order[i];
        i += 1;
        for &(_, child) in &trie.nodes[node as usize].children {
            parent[child as usize] = node;
            depth[child as usize] = depth[node as usize] + 1;
            if depth[child as usize] <= n_max {
                order.push(child);
            }
        }
    }
    for &node in order.iter().skip(1) {
        let c = trie.nodes[node as usize].count;
        if c > 0 && (c >= theta || depth[node as usize] == 1) {
            keep[node as usize] = true;
        }
    }
    // suffix closure: a kept node's ancestors are its suffixes
    for &node in order.iter().rev() {
        if keep[node as usize] && parent[node as usize] != ROOT {
            keep[parent[node as usize] as usize] = true;
        }
    }

    let mut retained: Vec<IndexEntry> = Vec::new();
    walk_paths(trie, |node, rev_path| {
        if node != ROOT && rev_path.len() <= n_max && keep[node as usize] {
            retained.push(IndexEntry {
                ngram: rev_path.iter().rev().copied().collect(),
                count: trie.nodes[node as usize].count,
            });
        }
    });
    retained.sort_by(|a, b| {
        a.ngram
            .len()
            .cmp(&b.ngram.len())
            .then_with(|| a.ngram.cmp(&b.ngram))
    });
    let mut entries = Vec::with_capacity(retained.len() + 1);
    entries.push(IndexEntry {
        ngram: Vec::new(),
        count: counts.positions(),
    });
    entries.extend(retained);
    NGramIndex::from_entries(entries, n_max, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use std::collections::{BTreeMap, BTreeSet};

    /// Brute-force substring enumeration.
    fn brute_counts(s: &[u32], n_max: usize) -> BTreeMap<Vec<u32>, u64> {
        let mut out = BTreeMap::new();
        for n in 1..=n_max {
            for w in s.windows(n) {
                *out.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        out
    }

    fn brute_retained(s: &[u32], theta: u64, n_max: usize) -> BTreeSet<Vec<u32>> {
        let counts = brute_counts(s, n_max);
        let mut keep: BTreeSet<Vec<u32>> = counts
            .iter()
            .filter(|(g, &c)| c >= theta || g.len() == 1)
            .map(|(g, _)| g.clone())
            .collect();
        for g in keep.clone() {
            for k in 1..g.len() {
                keep.insert(g[k..].to_vec());
            }
        }
        keep
    }

    /// Longest suffix of `history` (bounded by n_max) inside `set`.
    fn brute_longest(set: &BTreeSet<Vec<u32>>, history: &[u32], n_max: usize) -> Vec<u32> {
        for len in (1..=history.len().min(n_max)).rev() {
            let suffix = &history[history.len() - len..];
            if set.contains(suffix) {
                return suffix.to_vec();
            }
        }
        Vec::new()
    }

    const ABAB: [u32; 4] = [0, 1, 0, 1];

    #[test]
    fn counts_abab() {
        let c = count_ngrams(&ABAB, 2).unwrap();
        let oracle = brute_counts(&ABAB, 2);
        assert_eq!(oracle[&vec![0]], 2);
        assert_eq!(oracle[&vec![1]], 2);
        assert_eq!(oracle[&vec![0, 1]], 2);
        assert_eq!(oracle[&vec![1, 0]], 1);
        let got: BTreeMap<Vec<u32>, u64> = c.to_vec().into_iter().collect();
        assert_eq!(got, oracle);
        assert!(matches!(count_ngrams(&ABAB, 0), Err(Error::Param(_))));
    }

    #[test]
    fn window_totals() {
        let s: Vec<u32> = vec![2, 0, 1, 1, 0, 2, 2, 1, 0];
        let c = count_ngrams(&s, 4).unwrap();
        for n in 1..=4 {
            let total: u64 = c.to_vec().iter().filter(|(g, _)| g.len() == n).map(|e| e.1).sum();
            assert_eq!(total as usize, s.len() - n + 1);
        }
    }

    #[test]
    fn index_abab() {
        let c = count_ngrams(&ABAB, 2).unwrap();
        let idx = build_index(&c, 2, 2).unwrap();
        let kept: Vec<Vec<u32>> = idx.entries().iter().map(|e| e.ngram.clone()).collect();
        assert_eq!(kept, vec![vec![], vec![0], vec![1], vec![0, 1]]);
        assert!(!idx.contains(&[1, 0]));

        // history "…ab" → "ab"; "…ba" → "a"
        assert_eq!(idx.ngram(idx.longest_match(&[1, 0, 1])), &[0, 1]);
        assert_eq!(idx.ngram(idx.longest_match(&[0, 1, 0])), &[0]);
        // unseen last character
        assert_eq!(idx.longest_match(&[0, 1, 7]), ContextId::EMPTY);
    }

    #[test]
    fn theta_one_keeps_everything() {
        let c = count_ngrams(&ABAB, 3).unwrap();
        let idx = build_index(&c, 1, 3).unwrap();
        assert_eq!(idx.len() - 1, brute_counts(&ABAB, 3).len());
    }

    #[test]
    fn huge_theta_keeps_unigrams_only() {
        let s = [0, 1, 2, 0, 1, 2, 0];
        let c = count_ngrams(&s, 4).unwrap();
        let idx = build_index(&c, u64::MAX, 4).unwrap();
        assert_eq!(idx.len(), 4);
        assert!(idx.entries()[1..].iter().all(|e| e.ngram.len() == 1));
    }

    #[test]
    fn first_character_uses_its_unigram() {
        let s = [0, 1, 0, 1, 1];
        let idx = build_index(&count_ngrams(&s, 3).unwrap(), 1, 3).unwrap();
        assert_eq!(idx.ngram(idx.context_at(&s, 0)), &[0]);
    }

    #[test]
    fn suffix_closure_from_sparse_counts() {
        let mut c = NGramCounts::empty(3);
        c.insert(&[0, 1, 2], 10);
        c.insert(&[2], 1);
        let idx = build_index(&c, 5, 3).unwrap();
        assert!(idx.contains(&[0, 1, 2]));
        assert!(idx.contains(&[1, 2]));
        assert!(idx.contains(&[2]));
    }

    #[test]
    fn from_entries_rejects_open_suffix() {
        let entries = vec![
            IndexEntry { ngram: vec![], count: 0 },
            IndexEntry { ngram: vec![0, 1], count: 3 },
        ];
        assert!(NGramIndex::from_entries(entries, 2, 1).is_err());
    }

    #[test]
    fn single_context_index() {
        let idx = NGramIndex::single_context();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.longest_match(&[0, 1, 2]), ContextId::EMPTY);
    }

    #[test]
    fn dump_format() {
        let cv = CharVocab::build("ab").unwrap();
        let idx = build_index(&count_ngrams(&ABAB, 2).unwrap(), 2, 2).unwrap();
        let dump = idx.dump(&cv);
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines, vec!["4\t0\t", "2\t1\ta", "2\t2\tb", "2\t3\tab"]);
    }

    #[test]
    fn matches_brute_force_on_random_corpora() {
        let mut rng = Rng::new(99);
        for _ in 0..30 {
            let len = 1 + rng.below(120) as usize;
            let alpha = 1 + rng.below(4) as u32;
            let s: Vec<u32> = (0..len).map(|_| rng.below(alpha as u64) as u32).collect();
            for theta in [1, 2, 3] {
                for n_max in [1, 2, 4] {
                    let idx = build_index(&count_ngrams(&s, n_max).unwrap(), theta, n_max).unwrap();
                    let set = brute_retained(&s, theta, n_max);
                    assert_eq!(idx.len() - 1, set.len());
                    for t in 0..s.len() {
                        let want = brute_longest(&set, &s[..=t], n_max);
                        assert_eq!(idx.ngram(idx.context_at(&s, t)), &want[..]);
                    }
                }
            }
        }
    }

    #[test]
    fn theta_monotone() {
        let mut rng = Rng::new(5);
        let s: Vec<u32> = (0..300).map(|_| rng.below(3) as u32).collect();
        let c = count_ngrams(&s, 4).unwrap();
        let small = build_index(&c, 2, 4).unwrap();
        let large = build_index(&c, 6, 4).unwrap();
        for e in large.entries() {
            assert!(small.contains(&e.ngram));
        }
    }
}
