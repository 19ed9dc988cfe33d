//! Paraphrase test-set construction from sentence pairs.

use std::collections::HashMap;

use super::contractions::expand_contractions;
use super::text::eval_normalize;
use super::{MultiRefSet, SingleRefSet};

/// Which cleanup steps run before pairing; both default to on.
#[derive(Debug, Clone, Copy)]
pub struct TestsetOptions {
    pub expand_contractions: bool,
    /// Drop pairs whose sides are equal after eval-normalization, which
    /// removes pairs differing only in punctuation or case.
    pub drop_normalized_duplicates: bool,
}

impl Default for TestsetOptions {
    fn default() -> Self {
        TestsetOptions {
            expand_contractions: true,
            drop_normalized_duplicates: true,
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Builds the recognition and generation test sets from unordered
/// paraphrase pairs.
///
/// Pipeline: optional contraction expansion on both sides; drop pairs that
/// collapse to the same eval-normalized string; union surviving pairs into
/// synonym sets. The single-reference set keeps the surviving pairs as
/// given. Each synonym set of two or more sentences becomes one
/// multi-reference entry: the lexicographically smallest member is the
/// source, the rest are references (minus any reference that still equals
/// the source after normalization).
pub fn build_paraphrase_testsets(
    pairs: &[(String, String)],
    opts: TestsetOptions,
) -> (SingleRefSet, MultiRefSet) {
    let cleaned: Vec<(String, String)> = pairs
        .iter()
        .map(|(a, b)| {
            if opts.expand_contractions {
                (expand_contractions(a), expand_contractions(b))
            } else {
                (a.clone(), b.clone())
            }
        })
        .collect();

    let surviving: Vec<(String, String)> = cleaned
        .into_iter()
        .filter(|(a, b)| {
            !opts.drop_normalized_duplicates || eval_normalize(a) != eval_normalize(b)
        })
        .collect();

    let single = SingleRefSet {
        entries: surviving.clone(),
    };

    // Synonym sets over distinct sentence strings.
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut sentences: Vec<&str> = Vec::new();
    for (a, b) in &surviving {
        for s in [a.as_str(), b.as_str()] {
            if !ids.contains_key(s) {
                ids.insert(s, sentences.len());
                sentences.push(s);
            }
        }
    }
    let mut uf = UnionFind::new(sentences.len());
    for (a, b) in &surviving {
        uf.union(ids[a.as_str()], ids[b.as_str()]);
    }
    let mut groups: HashMap<usize, Vec<&str>> = HashMap::new();
    for (i, s) in sentences.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(s);
    }

    let mut entries = Vec::new();
    let mut sets: Vec<Vec<&str>> = groups.into_values().collect();
    for set in sets.iter_mut() {
        set.sort_unstable();
    }
    sets.sort_unstable_by(|a, b| a[0].cmp(b[0]));
    for set in sets {
        if set.len() < 2 {
            continue;
        }
        let source = set[0].to_string();
        let source_norm = eval_normalize(&source);
        let mut seen_norms = vec![source_norm];
        let mut references = Vec::new();
        for member in &set[1..] {
            let norm = eval_normalize(member);
            if seen_norms.contains(&norm) {
                continue;
            }
            seen_norms.push(norm);
            references.push(member.to_string());
        }
        if !references.is_empty() {
            entries.push((source, references));
        }
    }

    (single, MultiRefSet { entries })
}
