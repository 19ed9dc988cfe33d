//! Joint token-id space over all configured languages.
//!
//! Layout: ids 0..3 are the specials (pad, unk, bos, eos); the pivot
//! language's subword block comes next so that pivot token ids stay
//! identical across configurations sharing the same pivot data, no matter
//! how many auxiliary languages are added; then one flag token per
//! configured language in language order; then the remaining language
//! blocks in language order. Within a block, tokens sort by descending
//! frequency, ties lexicographic. A subword seen in several languages
//! keeps the id of its first occurrence.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::{flag_token, TrainingExample};
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
    languages: Vec<String>,
    flag_ids: BTreeMap<String, u32>,
}

/// Builds the joint vocabulary from segmented corpora (language ->
/// segmented lines). The pivot language must be first in `languages`.
pub fn build_vocabulary(
    segmented: &BTreeMap<String, Vec<String>>,
    languages: &[String],
) -> Result<Vocabulary> {
    if languages.is_empty() {
        return Err(Error::Config("no languages configured".into()));
    }
    for lang in languages {
        if !segmented.contains_key(lang) {
            return Err(Error::Config(format!(
                "no segmented corpus for language `{lang}`"
            )));
        }
    }

    let block = |lang: &str| -> Vec<(String, u64)> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for line in &segmented[lang] {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut items: Vec<(String, u64)> = counts
            .into_iter()
            .map(|(t, c)| (t.to_string(), c))
            .collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        items
    };

    let mut vocab = Vocabulary {
        tokens: Vec::new(),
        freqs: Vec::new(),
        index: HashMap::new(),
        languages: languages.to_vec(),
        flag_ids: BTreeMap::new(),
    };
    for tok in [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN] {
        vocab.push(tok.to_string(), 0)?;
    }
    for (tok, freq) in block(&languages[0]) {
        vocab.push(tok, freq)?;
    }
    for lang in languages {
        let id = vocab.push(flag_token(lang), 0)?;
        vocab.flag_ids.insert(lang.clone(), id);
    }
    for lang in &languages[1..] {
        for (tok, freq) in block(lang) {
            if !vocab.index.contains_key(&tok) {
                vocab.push(tok, freq)?;
            }
        }
    }
    Ok(vocab)
}

impl Vocabulary {
    fn push(&mut self, token: String, freq: u64) -> Result<u32> {
        if self.index.contains_key(&token) {
            return Err(Error::DuplicateKey {
                key: token,
                context: "vocabulary".into(),
            });
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        self.freqs.push(freq);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Token id with unknown-token fallback.
    pub fn encode_token(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.freqs[id as usize]
    }

    pub fn flag_id(&self, lang: &str) -> Result<u32> {
        self.flag_ids
            .get(lang)
            .copied()
            .ok_or_else(|| Error::Config(format!("no flag token for language `{lang}`")))
    }

    /// Encodes a segmented line into ids (no flag, no eos).
    pub fn encode_line(&self, segmented: &str) -> Vec<u32> {
        segmented
            .split_whitespace()
            .map(|t| self.encode_token(t))
            .collect()
    }

    /// Tokens for a run of ids, skipping pad/bos/eos.
    pub fn decode_tokens(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD_ID && id != BOS_ID && id != EOS_ID)
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    /// Assembles one id-encoded training unit from segmented text: the
    /// source starts with the target-language flag; the target ends with
    /// the end-of-sentence id.
    pub fn example_from_segmented(
        &self,
        src_segmented: &str,
        tgt_segmented: &str,
        src_lang: &str,
        tgt_lang: &str,
    ) -> Result<TrainingExample> {
        let flag = self.flag_id(tgt_lang)?;
        let mut src_tokens = vec![flag];
        src_tokens.extend(self.encode_line(src_segmented));
        let mut tgt_tokens = self.encode_line(tgt_segmented);
        tgt_tokens.push(EOS_ID);
        Ok(TrainingExample {
            src_tokens,
            tgt_tokens,
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
        })
    }

    /// Writes `token<TAB>id<TAB>frequency` in id order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for (id, token) in self.tokens.iter().enumerate() {
            writeln!(f, "{token}\t{id}\t{}", self.freqs[id]).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Reads a vocabulary file; flag tokens (`<2xxx>`) recover the
    /// language list in their id order.
    pub fn load(path: impl AsRef<Path>) -> Result<Vocabulary> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            freqs: Vec::new(),
            index: HashMap::new(),
            languages: Vec::new(),
            flag_ids: BTreeMap::new(),
        };
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(path, i + 1, "expected `token<TAB>id<TAB>freq`"));
            }
            let id: u32 = fields[1]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, "id is not an integer"))?;
            let freq: u64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, "frequency is not an integer"))?;
            if id as usize != vocab.tokens.len() {
                return Err(Error::parse(path, i + 1, "ids must be dense and in order"));
            }
            vocab.push(fields[0].to_string(), freq)?;
        }
        if vocab.tokens.len() < 4
            || vocab.tokens[PAD_ID as usize] != PAD_TOKEN
            || vocab.tokens[UNK_ID as usize] != UNK_TOKEN
            || vocab.tokens[BOS_ID as usize] != BOS_TOKEN
            || vocab.tokens[EOS_ID as usize] != EOS_TOKEN
        {
            return Err(Error::format(path, "special tokens must occupy ids 0..3"));
        }
        for (id, token) in vocab.tokens.iter().enumerate() {
            if let Some(lang) = token.strip_prefix("<2").and_then(|t| t.strip_suffix('>')) {
                vocab.languages.push(lang.to_string());
                vocab.flag_ids.insert(lang.to_string(), id as u32);
            }
        }
        Ok(vocab)
    }
}
