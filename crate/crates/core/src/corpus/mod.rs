//! Corpus ingestion, training-set construction, and paraphrase test sets.
//!
//! Inputs are verse-aligned translations (one `verse_id<TAB>text` record
//! per line, `#` comments) and sentence-pair files
//! (`sentence_a<TAB>sentence_b`). Training configurations pair every
//! translation variant of two languages over their shared verse ids, in
//! both directions, optionally with identity pairs for one language and
//! with pivot-variant pairs when paraphrase supervision is requested.

pub mod contractions;
pub mod testset;
pub mod text;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, mix64};

pub use contractions::expand_contractions;
pub use testset::{build_paraphrase_testsets, TestsetOptions};
pub use text::{detokenize, eval_normalize, eval_tokens, tokenize, tokenize_to_line};

/// One aligned text unit of a translation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verse {
    pub translation_id: String,
    pub verse_id: String,
    pub text: String,
}

/// All verses of one translation file.
#[derive(Debug, Clone)]
pub struct Translation {
    pub id: String,
    pub verses: Vec<Verse>,
}

/// A directed sentence pair ready for flagging and segmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelPair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src_text: String,
    pub tgt_text: String,
}

/// Id-encoded training unit. `src_tokens` starts with the target-language
/// flag id; `tgt_tokens` ends with the end-of-sentence id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub src_tokens: Vec<u32>,
    pub tgt_tokens: Vec<u32>,
    pub src_lang: String,
    pub tgt_lang: String,
}

/// Recognition test set: one reference per source.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SingleRefSet {
    pub entries: Vec<(String, String)>,
}

/// Generation test set: each source with all its synonym-set references.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MultiRefSet {
    pub entries: Vec<(String, Vec<String>)>,
}

// ---- loading ---------------------------------------------------------------

/// Loads a verse file: UTF-8, one `verse_id<TAB>text` per line, `#` lines
/// are comments, blank lines ignored. Order is preserved.
pub fn load_verse_corpus(path: impl AsRef<Path>, translation_id: &str) -> Result<Vec<Verse>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut verses = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, line_no, "missing TAB between verse id and text"))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::parse(path, line_no, "empty verse id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateKey {
                key: id.to_string(),
                context: format!("translation `{}` ({})", translation_id, path.display()),
            });
        }
        verses.push(Verse {
            translation_id: translation_id.to_string(),
            verse_id: id.to_string(),
            text: text.trim().to_string(),
        });
    }
    Ok(verses)
}

pub fn load_translation(path: impl AsRef<Path>, translation_id: &str) -> Result<Translation> {
    Ok(Translation {
        id: translation_id.to_string(),
        verses: load_verse_corpus(path, translation_id)?,
    })
}

/// Loads a two-column sentence-pair file (`a<TAB>b`).
pub fn load_pair_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => pairs.push((a.trim().to_string(), b.trim().to_string())),
            _ => {
                return Err(Error::parse(
                    path,
                    i + 1,
                    "expected exactly two TAB-separated fields",
                ))
            }
        }
    }
    Ok(pairs)
}

// ---- alignment and training sets -------------------------------------------

/// Pairs verses present in both inputs, sorted by verse id.
pub fn align_by_verse(
    a: &[Verse],
    b: &[Verse],
    src_lang: &str,
    tgt_lang: &str,
) -> Vec<ParallelPair> {
    let by_id: HashMap<&str, &Verse> = b.iter().map(|v| (v.verse_id.as_str(), v)).collect();
    let mut shared: Vec<&Verse> = a
        .iter()
        .filter(|v| by_id.contains_key(v.verse_id.as_str()))
        .collect();
    shared.sort_by(|x, y| x.verse_id.cmp(&y.verse_id));
    shared
        .into_iter()
        .map(|v| ParallelPair {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            src_text: v.text.clone(),
            tgt_text: by_id[v.verse_id.as_str()].text.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Both,
    Forward,
}

/// Which language pairs, directions and extras a training set contains.
#[derive(Debug, Clone)]
pub struct TrainingSetPolicy {
    /// Configured languages, pivot first.
    pub languages: Vec<String>,
    /// Explicit language pairs; when absent, every pair touching one of
    /// the first two languages is used.
    pub pairs: Option<Vec<(String, String)>>,
    pub directions: Direction,
    /// Language that contributes identical input-output pairs, one per
    /// distinct verse text, to anchor the meaning of the language flags.
    pub identity_language: Option<String>,
    /// Adds pivot-variant pairs (both directions), turning the model into
    /// a supervised paraphraser. Off by default: pivot-pivot data is
    /// otherwise never emitted.
    pub paraphrase_supervision: bool,
}

impl TrainingSetPolicy {
    pub fn bidirectional(languages: &[&str]) -> Self {
        TrainingSetPolicy {
            languages: languages.iter().map(|s| s.to_string()).collect(),
            pairs: None,
            directions: Direction::Both,
            identity_language: None,
            paraphrase_supervision: false,
        }
    }

    /// Language pairs after applying the default hub rule.
    pub fn language_pairs(&self) -> Vec<(String, String)> {
        if let Some(pairs) = &self.pairs {
            return pairs.clone();
        }
        let mut out = Vec::new();
        for i in 0..self.languages.len() {
            for j in (i + 1)..self.languages.len() {
                if i < 2 {
                    out.push((self.languages[i].clone(), self.languages[j].clone()));
                }
            }
        }
        out
    }
}

/// Builds the directional pair list for a configuration over loaded
/// corpora (language code -> its translations).
pub fn build_training_set(
    corpora: &BTreeMap<String, Vec<Translation>>,
    policy: &TrainingSetPolicy,
) -> Result<Vec<ParallelPair>> {
    let known = |lang: &str| corpora.contains_key(lang);
    for lang in &policy.languages {
        if !known(lang) {
            return Err(Error::Config(format!(
                "language `{lang}` has no corpus data"
            )));
        }
        if corpora[lang].is_empty() {
            return Err(Error::Config(format!(
                "language `{lang}` needs at least one translation"
            )));
        }
    }
    if let Some(lang) = &policy.identity_language {
        if !policy.languages.iter().any(|l| l == lang) {
            return Err(Error::Config(format!(
                "identity language `{lang}` is not configured"
            )));
        }
    }

    let mut out = Vec::new();
    for (la, lb) in policy.language_pairs() {
        if !known(&la) || !known(&lb) {
            return Err(Error::Config(format!(
                "pair ({la}, {lb}) references an unknown language"
            )));
        }
        if la == lb {
            return Err(Error::Config(format!(
                "pair ({la}, {lb}) repeats a language; use paraphrase supervision instead"
            )));
        }
        for ta in &corpora[&la] {
            for tb in &corpora[&lb] {
                for pair in align_by_verse(&ta.verses, &tb.verses, &la, &lb) {
                    if policy.directions == Direction::Both {
                        out.push(ParallelPair {
                            src_lang: pair.tgt_lang.clone(),
                            tgt_lang: pair.src_lang.clone(),
                            src_text: pair.tgt_text.clone(),
                            tgt_text: pair.src_text.clone(),
                        });
                    }
                    out.push(pair);
                }
            }
        }
    }

    if let Some(lang) = &policy.identity_language {
        let mut seen = HashSet::new();
        for t in &corpora[lang] {
            for v in &t.verses {
                if seen.insert(v.text.clone()) {
                    out.push(ParallelPair {
                        src_lang: lang.clone(),
                        tgt_lang: lang.clone(),
                        src_text: v.text.clone(),
                        tgt_text: v.text.clone(),
                    });
                }
            }
        }
    }

    if policy.paraphrase_supervision {
        let pivot = &policy.languages[0];
        let translations = &corpora[pivot];
        for i in 0..translations.len() {
            for j in (i + 1)..translations.len() {
                for pair in
                    align_by_verse(&translations[i].verses, &translations[j].verses, pivot, pivot)
                {
                    out.push(ParallelPair {
                        src_lang: pair.tgt_lang.clone(),
                        tgt_lang: pair.src_lang.clone(),
                        src_text: pair.tgt_text.clone(),
                        tgt_text: pair.src_text.clone(),
                    });
                    out.push(pair);
                }
            }
        }
    }

    Ok(out)
}

// ---- held-out splits ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Stable split assignment keyed by verse id; the same verse lands in the
/// same split across languages and runs.
pub fn assign_split(verse_id: &str, dev_fraction: f64, test_fraction: f64, salt: u64) -> Split {
    let u = mix64(fnv1a64(verse_id.as_bytes(), salt)) as f64 / (u64::MAX as f64 + 1.0);
    if u < test_fraction {
        Split::Test
    } else if u < test_fraction + dev_fraction {
        Split::Dev
    } else {
        Split::Train
    }
}

pub fn filter_split(
    t: &Translation,
    want: Split,
    dev_fraction: f64,
    test_fraction: f64,
    salt: u64,
) -> Translation {
    Translation {
        id: t.id.clone(),
        verses: t
            .verses
            .iter()
            .filter(|v| assign_split(&v.verse_id, dev_fraction, test_fraction, salt) == want)
            .cloned()
            .collect(),
    }
}

// ---- language flags ----------------------------------------------------------

/// The pseudo token marking the requested output language.
pub fn flag_token(lang: &str) -> String {
    format!("<2{lang}>")
}

/// Prepends the target-language flag to a (possibly empty) token string.
pub fn add_language_flag(sentence: &str, target: &str, configured: &[String]) -> Result<String> {
    if !configured.iter().any(|l| l == target) {
        return Err(Error::Config(format!(
            "unknown target language `{target}`"
        )));
    }
    let flag = flag_token(target);
    if sentence.is_empty() {
        Ok(flag)
    } else {
        Ok(format!("{flag} {sentence}"))
    }
}

// ---- serialization -------------------------------------------------------------

/// Writes a 4-column pair file: `src_lang tgt_lang src_text tgt_text`.
pub fn write_pairs_tsv(pairs: &[ParallelPair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for p in pairs {
        writeln!(
            f,
            "{}\t{}\t{}\t{}",
            p.src_lang, p.tgt_lang, p.src_text, p.tgt_text
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_pairs_tsv(path: impl AsRef<Path>) -> Result<Vec<ParallelPair>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(path, i + 1, "expected 4 TAB-separated fields"));
        }
        out.push(ParallelPair {
            src_lang: fields[0].to_string(),
            tgt_lang: fields[1].to_string(),
            src_text: fields[2].to_string(),
            tgt_text: fields[3].to_string(),
        });
    }
    Ok(out)
}

pub fn write_single_ref(set: &SingleRefSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (src, reference) in &set.entries {
        writeln!(f, "{src}\t{reference}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_single_ref(path: impl AsRef<Path>) -> Result<SingleRefSet> {
    Ok(SingleRefSet {
        entries: load_pair_file(path)?,
    })
}

pub fn write_multi_ref(set: &MultiRefSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (src, refs) in &set.entries {
        writeln!(f, "{}\t{}", src, refs.join("\t")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_multi_ref(path: impl AsRef<Path>) -> Result<MultiRefSet> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let src = fields.next().unwrap_or_default().to_string();
        let refs: Vec<String> = fields.map(str::to_string).collect();
        if refs.is_empty() {
            return Err(Error::parse(path, i + 1, "entry has no references"));
        }
        entries.push((src, refs));
    }
    Ok(MultiRefSet { entries })
}
