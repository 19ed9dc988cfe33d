//! Tokenization and text normalization shared by corpus preparation and
//! metric computation.

/// Punctuation inventory used by the tokenizer and by evaluation
/// normalization. Approximates the Unicode `P` categories over the scripts
/// this crate is expected to meet: ASCII, Latin-1 supplement, general
/// punctuation, Devanagari danda, Greek, and common CJK/fullwidth marks.
pub fn is_punctuation(c: char) -> bool {
    match c {
        // ASCII category-P characters ($ + < = > ^ ` | ~ are symbols).
        '!' | '"' | '#' | '%' | '&' | '\'' | '(' | ')' | '*' | ',' | '-' | '.' | '/' | ':'
        | ';' | '?' | '@' | '[' | '\\' | ']' | '_' | '{' | '}' => true,
        // Latin-1 supplement.
        '\u{A1}' | '\u{A7}' | '\u{AB}' | '\u{B6}' | '\u{B7}' | '\u{BB}' | '\u{BF}' => true,
        // Greek question mark and ano teleia.
        '\u{37E}' | '\u{387}' => true,
        // Devanagari danda and double danda.
        '\u{964}' | '\u{965}' => true,
        // General punctuation: hyphens, dashes, quotes, daggers, bullet,
        // leaders, per-mille, primes, interrobang, doubled marks.
        '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{203E}' | '\u{2047}'..='\u{2049}' => true,
        // CJK punctuation and middle dot.
        '\u{3001}'..='\u{3003}' | '\u{3008}'..='\u{3011}' | '\u{3014}'..='\u{301F}'
        | '\u{30FB}' => true,
        // Fullwidth forms.
        '\u{FF01}'..='\u{FF03}' | '\u{FF05}'..='\u{FF0A}' | '\u{FF0C}'..='\u{FF0F}'
        | '\u{FF1A}' | '\u{FF1B}' | '\u{FF1F}' | '\u{FF20}' | '\u{FF3B}'..='\u{FF3D}'
        | '\u{FF3F}' | '\u{FF5B}' | '\u{FF5D}' => true,
        _ => false,
    }
}

/// Splits on whitespace, then detaches every punctuation character as its
/// own token. Deterministic and reversible up to spacing.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Pre-tokenized form of a sentence: tokens joined by single spaces.
pub fn tokenize_to_line(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Joins tokens back into running text, attaching closing punctuation to
/// the preceding token and opening punctuation to the following one.
pub fn detokenize(tokens: &[String]) -> String {
    const NO_SPACE_BEFORE: &[char] = &[
        '.', ',', '!', '?', ';', ':', ')', ']', '}', '\u{BB}', '\u{2026}', '\u{964}',
    ];
    const NO_SPACE_AFTER: &[char] = &['(', '[', '{', '\u{AB}', '\u{BF}', '\u{A1}'];
    let mut out = String::new();
    let mut glue_next = false;
    for token in tokens {
        let first = token.chars().next();
        let closing = first.map(|c| NO_SPACE_BEFORE.contains(&c)).unwrap_or(false)
            && token.chars().count() == 1;
        if !out.is_empty() && !glue_next && !closing {
            out.push(' ');
        }
        out.push_str(token);
        glue_next =
            first.map(|c| NO_SPACE_AFTER.contains(&c)).unwrap_or(false) && token.chars().count() == 1;
    }
    out
}

/// Normalization applied before metric comparisons: lowercase, drop all
/// punctuation characters, collapse whitespace.
pub fn eval_normalize(text: &str) -> String {
    let stripped: String = text
        .chars()
        .map(|c| if is_punctuation(c) { ' ' } else { c })
        .collect();
    stripped
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whitespace tokens of the eval-normalized text.
pub fn eval_tokens(text: &str) -> Vec<String> {
    eval_normalize(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}
