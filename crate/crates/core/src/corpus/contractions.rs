//! English contraction expansion.
//!
//! The inventory below is the one this crate ships; ambiguous forms are
//! resolved once and documented here: `'s` expands to `is` (never `has`
//! or possessive -- possessives are not in the table), `'d` to `would`,
//! `ain't` to `is not`. Expansion is idempotent because no expansion
//! contains an apostrophe.

use super::text::is_punctuation;

/// Lowercased contraction table, matched per whitespace token after
/// stripping surrounding punctuation. Curly apostrophes are treated as
/// ASCII `'` during lookup.
const TABLE: &[(&str, &str)] = &[
    ("ain't", "is not"),
    ("aren't", "are not"),
    ("can't", "cannot"),
    ("couldn't", "could not"),
    ("didn't", "did not"),
    ("doesn't", "does not"),
    ("don't", "do not"),
    ("hadn't", "had not"),
    ("hasn't", "has not"),
    ("haven't", "have not"),
    ("he'd", "he would"),
    ("he'll", "he will"),
    ("he's", "he is"),
    ("here's", "here is"),
    ("how's", "how is"),
    ("i'd", "i would"),
    ("i'll", "i will"),
    ("i'm", "i am"),
    ("i've", "i have"),
    ("isn't", "is not"),
    ("it'll", "it will"),
    ("it's", "it is"),
    ("let's", "let us"),
    ("mightn't", "might not"),
    ("mustn't", "must not"),
    ("needn't", "need not"),
    ("shan't", "shall not"),
    ("she'd", "she would"),
    ("she'll", "she will"),
    ("she's", "she is"),
    ("shouldn't", "should not"),
    ("that's", "that is"),
    ("there's", "there is"),
    ("they'd", "they would"),
    ("they'll", "they will"),
    ("they're", "they are"),
    ("they've", "they have"),
    ("wasn't", "was not"),
    ("we'd", "we would"),
    ("we'll", "we will"),
    ("we're", "we are"),
    ("we've", "we have"),
    ("weren't", "were not"),
    ("what's", "what is"),
    ("when's", "when is"),
    ("where's", "where is"),
    ("who's", "who is"),
    ("why's", "why is"),
    ("won't", "will not"),
    ("wouldn't", "would not"),
    ("y'all", "you all"),
    ("you'd", "you would"),
    ("you'll", "you will"),
    ("you're", "you are"),
    ("you've", "you have"),
];

fn lookup(core: &str) -> Option<&'static str> {
    let key: String = core
        .to_lowercase()
        .chars()
        .map(|c| if c == '\u{2019}' { '\'' } else { c })
        .collect();
    TABLE
        .binary_search_by(|(k, _)| k.cmp(&key.as_str()))
        .ok()
        .map(|i| TABLE[i].1)
}

fn match_case(expansion: &str, original: &str) -> String {
    let mut chars = original.chars();
    let first_upper = chars.next().map(char::is_uppercase).unwrap_or(false);
    let rest_upper = original.chars().filter(|c| c.is_alphabetic()).count() > 1
        && original
            .chars()
            .filter(|c| c.is_alphabetic())
            .all(char::is_uppercase);
    if rest_upper {
        expansion.to_uppercase()
    } else if first_upper {
        let mut out = String::with_capacity(expansion.len());
        let mut cs = expansion.chars();
        if let Some(c) = cs.next() {
            out.extend(c.to_uppercase());
        }
        out.extend(cs);
        out
    } else {
        expansion.to_string()
    }
}

/// Replaces every known contraction with its expansion. Tokens keep their
/// surrounding punctuation; whitespace is collapsed to single spaces.
pub fn expand_contractions(text: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    for token in text.split_whitespace() {
        let chars: Vec<char> = token.chars().collect();
        let start = chars
            .iter()
            .position(|&c| !is_punctuation(c))
            .unwrap_or(chars.len());
        let end = chars
            .iter()
            .rposition(|&c| !is_punctuation(c))
            .map(|i| i + 1)
            .unwrap_or(start);
        let lead: String = chars[..start].iter().collect();
        let core: String = chars[start..end].iter().collect();
        let trail: String = chars[end..].iter().collect();
        match lookup(&core) {
            Some(expansion) => {
                let expanded = match_case(expansion, &core);
                let mut words = expanded.split(' ');
                if let Some(first) = words.next() {
                    out.push(format!("{lead}{first}"));
                }
                let mut rest: Vec<&str> = words.collect();
                if let Some(last) = rest.pop() {
                    out.extend(rest.iter().map(|w| w.to_string()));
                    out.push(format!("{last}{trail}"));
                } else if !trail.is_empty() {
                    let merged = out.pop().unwrap_or_default();
                    out.push(format!("{merged}{trail}"));
                }
            }
            None => out.push(token.to_string()),
        }
    }
    out.join(" ")
}
