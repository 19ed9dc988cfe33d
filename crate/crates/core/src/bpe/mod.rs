//! Language-dependent byte-pair encoding: learning, application, and the
//! joint vocabulary.
//!
//! Learning is the standard procedure: every word is its character
//! sequence plus a terminal word-end symbol, and the most frequent
//! adjacent symbol pair is merged repeatedly. Ties break by lexicographic
//! byte order of the `(left, right)` pair, and learning stops early once
//! no pair occurs at least twice. Serialized output uses `@@`
//! continuation markers on non-final subwords; the word-end symbol never
//! leaves this module.

pub mod vocab;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use vocab::{
    build_vocabulary, Vocabulary, BOS_ID, BOS_TOKEN, EOS_ID, EOS_TOKEN, PAD_ID, PAD_TOKEN,
    UNK_ID, UNK_TOKEN,
};

pub const WORD_END: &str = "</w>";
pub const CONTINUATION: &str = "@@";

/// Ordered merge operations for one language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTable {
    pub language: String,
    pub merges: Vec<(String, String)>,
}

impl MergeTable {
    pub fn empty(language: &str) -> Self {
        MergeTable {
            language: language.to_string(),
            merges: Vec::new(),
        }
    }

    fn ranks(&self) -> HashMap<(&str, &str), usize> {
        self.merges
            .iter()
            .enumerate()
            .map(|(i, (l, r))| ((l.as_str(), r.as_str()), i))
            .collect()
    }

    /// Segments one word into subword tokens with continuation markers.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        if word.is_empty() {
            return Vec::new();
        }
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        symbols.push(WORD_END.to_string());
        let ranks = self.ranks();

        // Applying merges in table order equals repeatedly applying the
        // lowest-ranked pair present; the latter skips absent pairs.
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len() - 1 {
                if let Some(&rank) = ranks.get(&(symbols[i].as_str(), symbols[i + 1].as_str())) {
                    if best.map(|(r, _)| rank < r).unwrap_or(true) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            apply_merge(&mut symbols, left, right);
        }

        finish_word(symbols)
    }

    /// Segments a pre-tokenized line (whitespace-separated tokens).
    pub fn segment(&self, line: &str) -> Vec<String> {
        line.split_whitespace()
            .flat_map(|w| self.segment_word(w))
            .collect()
    }

    pub fn segment_to_line(&self, line: &str) -> String {
        self.segment(line).join(" ")
    }
}

/// Merges every non-overlapping left-to-right occurrence of the pair.
fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let joined = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = joined;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

/// Strips the word-end symbol and marks non-final subwords.
fn finish_word(mut symbols: Vec<String>) -> Vec<String> {
    match symbols.last() {
        Some(last) if last == WORD_END => {
            symbols.pop();
        }
        Some(last) if last.ends_with(WORD_END) => {
            let n = symbols.len();
            let trimmed = symbols[n - 1][..last.len() - WORD_END.len()].to_string();
            symbols[n - 1] = trimmed;
        }
        _ => {}
    }
    let n = symbols.len();
    symbols
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if i + 1 < n {
                format!("{s}{CONTINUATION}")
            } else {
                s
            }
        })
        .collect()
}

/// Learns merge operations from a stream of pre-tokenized words.
pub fn learn_merges<'a>(
    words: impl IntoIterator<Item = &'a str>,
    num_merges: usize,
    language: &str,
) -> MergeTable {
    let mut word_freq: HashMap<&str, u64> = HashMap::new();
    for w in words {
        if !w.is_empty() {
            *word_freq.entry(w).or_insert(0) += 1;
        }
    }
    let mut symbolized: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(w, f)| {
            let mut syms: Vec<String> = w.chars().map(|c| c.to_string()).collect();
            syms.push(WORD_END.to_string());
            (syms, f)
        })
        .collect();

    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let mut counts: HashMap<(String, String), u64> = HashMap::new();
        for (syms, f) in &symbolized {
            for w in syms.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += f;
            }
        }
        let mut best: Option<(&(String, String), u64)> = None;
        for (pair, &count) in &counts {
            best = match best {
                None => Some((pair, count)),
                Some((bp, bc)) if count > bc || (count == bc && pair < bp) => {
                    Some((pair, count))
                }
                keep => keep,
            };
        }
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let (left, right) = pair.clone();
        for (syms, _) in symbolized.iter_mut() {
            apply_merge(syms, &left, &right);
        }
        merges.push((left, right));
    }

    MergeTable {
        language: language.to_string(),
        merges,
    }
}

/// Learns from whole corpus lines (each split on whitespace).
pub fn learn_merges_from_lines(lines: &[String], num_merges: usize, language: &str) -> MergeTable {
    learn_merges(
        lines.iter().flat_map(|l| l.split_whitespace()),
        num_merges,
        language,
    )
}

/// Inverse of segmentation: fuses continuation-marked tokens back into
/// words. A trailing marker at sequence end is stripped.
pub fn unsegment(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut fuse = false;
    for token in tokens {
        if !fuse && !out.is_empty() {
            out.push(' ');
        }
        if let Some(stem) = token.strip_suffix(CONTINUATION) {
            out.push_str(stem);
            fuse = true;
        } else {
            out.push_str(token);
            fuse = false;
        }
    }
    out
}

// ---- codes files -------------------------------------------------------------

/// Writes a codes file: header line `#codes v1 <language>`, then one
/// `left<SPACE>right` merge per line in learning order.
pub fn save_codes(table: &MergeTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "#codes v1 {}", table.language).map_err(|e| Error::io(path, e))?;
    for (l, r) in &table.merges {
        writeln!(f, "{l} {r}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_codes(path: impl AsRef<Path>) -> Result<MergeTable> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = content.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty codes file"))?;
    let language = header
        .strip_prefix("#codes v1 ")
        .ok_or_else(|| Error::format(path, "missing `#codes v1 <language>` header"))?
        .trim()
        .to_string();
    if language.is_empty() {
        return Err(Error::format(path, "header names no language"));
    }
    let mut merges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (l, r) = line
            .split_once(' ')
            .ok_or_else(|| Error::parse(path, i + 2, "merge line needs `left right`"))?;
        let pair = (l.to_string(), r.to_string());
        if !seen.insert(pair.clone()) {
            return Err(Error::DuplicateKey {
                key: format!("{l} {r}"),
                context: format!("codes file {}", path.display()),
            });
        }
        merges.push(pair);
    }
    Ok(MergeTable { language, merges })
}
