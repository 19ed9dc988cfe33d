//! Shared test infrastructure: a synthetic three-language world with known
//! synonym structure, plus a cached training harness.
//!
//! The pivot language has 160 meanings; 40 of them have two interchangeable
//! surface words (synonym pairs), the rest one word each, 200 surface words
//! in total. Each auxiliary language renders meanings with a bijective word
//! substitution, so both members of a synonym pair translate to the same
//! auxiliary word: translation data carries the synonym evidence, while
//! pivot-to-pivot data never appears unless paraphrase supervision is
//! requested.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex, OnceLock};

use nmtlab::bpe::{self, MergeTable, Vocabulary};
use nmtlab::corpus::{
    self, filter_split, ParallelPair, Split, TrainingSetPolicy, Translation, Verse,
};
use nmtlab::model::ParameterSet;
use nmtlab::rng::SplitMix64;
use nmtlab::train::{train_loop, DevSet, TrainOptions, ValidationPoint};

pub const PIVOT: &str = "pvt";
pub const AUX1: &str = "aux1";
pub const AUX2: &str = "aux2";

pub const SYNONYM_PAIRS: usize = 40;
pub const SINGLE_MEANINGS: usize = 120;
pub const MEANINGS: usize = SYNONYM_PAIRS + SINGLE_MEANINGS;
const TRAIN_VERSES: usize = 400;
const TEST_VERSES: usize = 60;
/// Probability that the supervised rendering keeps the first rendering's
/// synonym choice, biasing the supervised model toward copying.
const SUPERVISED_KEEP: f64 = 0.75;

/// One sentence as a meaning sequence plus the synonym choices of its
/// first pivot rendering.
struct Sentence {
    meanings: Vec<usize>,
    choices: Vec<bool>,
}

pub struct ToyWorld {
    /// Pivot rendering used everywhere ("pvt-a").
    pub pivot_a: Translation,
    /// Second pivot rendering, mostly copying pivot_a's choices
    /// ("pvt-b"); used for paraphrase supervision.
    pub pivot_b: Translation,
    pub aux1: Translation,
    pub aux2: Translation,
    /// Held-out pivot sources (rendering A).
    pub test_src: Vec<String>,
    /// The same held-out sentences with every synonym choice flipped.
    pub test_para: Vec<String>,
    /// Auxiliary-1 rendering of the held-out sentences.
    pub test_aux1: Vec<String>,
}

fn syllable_words(consonants: &[char], count: usize, rng: &mut SplitMix64) -> Vec<String> {
    const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(count);
    while words.len() < count {
        let syllables = 2 + rng.index(2);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(consonants[rng.index(consonants.len())]);
            w.push(VOWELS[rng.index(VOWELS.len())]);
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

struct Lexicon {
    /// meaning -> (word, alternative word for synonym-pair meanings)
    pivot: Vec<(String, Option<String>)>,
    aux1: Vec<String>,
    aux2: Vec<String>,
}

fn build_lexicon(rng: &mut SplitMix64) -> Lexicon {
    let pivot_words = syllable_words(&['p', 't', 'k', 's', 'm', 'n'], 2 * SYNONYM_PAIRS + SINGLE_MEANINGS, rng);
    let mut pivot = Vec::with_capacity(MEANINGS);
    for i in 0..SYNONYM_PAIRS {
        pivot.push((
            pivot_words[2 * i].clone(),
            Some(pivot_words[2 * i + 1].clone()),
        ));
    }
    for i in 0..SINGLE_MEANINGS {
        pivot.push((pivot_words[2 * SYNONYM_PAIRS + i].clone(), None));
    }
    Lexicon {
        pivot,
        aux1: syllable_words(&['b', 'd', 'g', 'z', 'l', 'r'], MEANINGS, rng),
        aux2: syllable_words(&['f', 'v', 'w', 'j', 'c', 'h'], MEANINGS, rng),
    }
}

fn render_pivot(lex: &Lexicon, s: &Sentence, flip: bool) -> String {
    s.meanings
        .iter()
        .zip(&s.choices)
        .map(|(&m, &first)| {
            let (a, b) = &lex.pivot[m];
            match b {
                Some(b) if first == flip => b.clone(),
                _ => a.clone(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn render_aux(words: &[String], s: &Sentence) -> String {
    s.meanings
        .iter()
        .map(|&m| words[m].clone())
        .collect::<Vec<_>>()
        .join(" ")
}

fn sample_sentence(rng: &mut SplitMix64, min_pairs: usize) -> Sentence {
    loop {
        let len = 3 + rng.index(6).max(if min_pairs > 0 { 2 } else { 0 });
        let mut meanings = Vec::with_capacity(len);
        let mut pairs = 0;
        for _ in 0..len {
            if rng.next_f64() < 0.45 {
                meanings.push(rng.index(SYNONYM_PAIRS));
                pairs += 1;
            } else {
                meanings.push(SYNONYM_PAIRS + rng.index(SINGLE_MEANINGS));
            }
        }
        if pairs < min_pairs {
            continue;
        }
        let choices = (0..len).map(|_| rng.next_f64() < 0.5).collect();
        return Sentence { meanings, choices };
    }
}

impl ToyWorld {
    pub fn generate(seed: u64) -> ToyWorld {
        let mut rng = SplitMix64::stream(seed, 0xA11);
        let lex = build_lexicon(&mut rng);

        let mut pivot_a = Vec::new();
        let mut pivot_b = Vec::new();
        let mut aux1 = Vec::new();
        let mut aux2 = Vec::new();
        for i in 0..TRAIN_VERSES {
            let s = sample_sentence(&mut rng, 0);
            let id = format!("v{i:04}");
            // The supervised rendering keeps most synonym choices.
            let b_choices: Vec<bool> = s
                .choices
                .iter()
                .map(|&c| {
                    if rng.next_f64() < SUPERVISED_KEEP {
                        c
                    } else {
                        !c
                    }
                })
                .collect();
            let b_sentence = Sentence {
                meanings: s.meanings.clone(),
                choices: b_choices,
            };
            pivot_a.push((id.clone(), render_pivot(&lex, &s, false)));
            pivot_b.push((id.clone(), render_pivot(&lex, &b_sentence, false)));
            aux1.push((id.clone(), render_aux(&lex.aux1, &s)));
            aux2.push((id, render_aux(&lex.aux2, &s)));
        }

        let mut test_src = Vec::new();
        let mut test_para = Vec::new();
        let mut test_aux1 = Vec::new();
        for _ in 0..TEST_VERSES {
            let s = sample_sentence(&mut rng, 4);
            test_src.push(render_pivot(&lex, &s, false));
            test_para.push(render_pivot(&lex, &s, true));
            test_aux1.push(render_aux(&lex.aux1, &s));
        }

        let translation = |id: &str, items: Vec<(String, String)>| Translation {
            id: id.to_string(),
            verses: items
                .into_iter()
                .map(|(verse_id, text)| Verse {
                    translation_id: id.to_string(),
                    verse_id,
                    text,
                })
                .collect(),
        };
        ToyWorld {
            pivot_a: translation("pvt-a", pivot_a),
            pivot_b: translation("pvt-b", pivot_b),
            aux1: translation("aux1-a", aux1),
            aux2: translation("aux2-a", aux2),
            test_src,
            test_para,
            test_aux1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setup {
    /// pivot <-> aux1, plus aux1 identity pairs.
    Bilingual,
    /// Bilingual plus pivot <-> aux2 and aux1 <-> aux2.
    Trilingual,
    /// Bilingual data plus pivot-variant paraphrase pairs.
    Supervised,
}

pub struct ToyModel {
    pub params: ParameterSet<f32>,
    pub vocab: Vocabulary,
    pub tables: BTreeMap<String, MergeTable>,
    pub best_bleu: Option<f64>,
    pub steps: u64,
    pub history: Vec<ValidationPoint>,
}

impl ToyModel {
    pub fn src_ids(&self, sentence: &str, target_lang: &str) -> Vec<u32> {
        let table = &self.tables[PIVOT];
        let mut ids = vec![self.vocab.flag_id(target_lang).unwrap()];
        ids.extend(
            self.vocab
                .encode_line(&table.segment_to_line(&corpus::tokenize_to_line(sentence))),
        );
        ids
    }

    pub fn tgt_ids(&self, sentence: &str, lang: &str) -> Vec<u32> {
        let table = &self.tables[lang];
        let mut ids = self
            .vocab
            .encode_line(&table.segment_to_line(&corpus::tokenize_to_line(sentence)));
        ids.push(bpe::EOS_ID);
        ids
    }

    pub fn ids_to_text(&self, ids: &[u32]) -> String {
        bpe::unsegment(&self.vocab.decode_tokens(ids))
    }
}

pub fn train_toy(world: &ToyWorld, setup: Setup, seed: u64) -> ToyModel {
    let mut corpora: BTreeMap<String, Vec<Translation>> = BTreeMap::new();
    let languages: Vec<String> = match setup {
        Setup::Bilingual | Setup::Supervised => vec![PIVOT.into(), AUX1.into()],
        Setup::Trilingual => vec![PIVOT.into(), AUX1.into(), AUX2.into()],
    };
    let pivot_translations = match setup {
        Setup::Supervised => vec![world.pivot_a.clone(), world.pivot_b.clone()],
        _ => vec![world.pivot_a.clone()],
    };
    corpora.insert(PIVOT.into(), pivot_translations);
    corpora.insert(AUX1.into(), vec![world.aux1.clone()]);
    if setup == Setup::Trilingual {
        corpora.insert(AUX2.into(), vec![world.aux2.clone()]);
    }

    // Shared verse-id split across all setups.
    let (dev_fraction, salt) = (0.08, 42);
    let part = |t: &Translation, want: Split| filter_split(t, want, dev_fraction, 0.0, salt);
    let split = |want: Split| -> BTreeMap<String, Vec<Translation>> {
        corpora
            .iter()
            .map(|(lang, ts)| (lang.clone(), ts.iter().map(|t| part(t, want)).collect()))
            .collect()
    };
    let train_corpora = split(Split::Train);
    let dev_corpora = split(Split::Dev);

    let policy = TrainingSetPolicy {
        languages: languages.clone(),
        pairs: None,
        directions: corpus::Direction::Both,
        identity_language: Some(AUX1.into()),
        paraphrase_supervision: setup == Setup::Supervised,
    };
    let mut dev_policy = policy.clone();
    dev_policy.identity_language = None;
    dev_policy.paraphrase_supervision = false;
    let train_pairs = corpus::build_training_set(&train_corpora, &policy).unwrap();
    let dev_pairs = corpus::build_training_set(&dev_corpora, &dev_policy).unwrap();

    // Language-dependent codes over the training split.
    let mut tables = BTreeMap::new();
    let mut segmented = BTreeMap::new();
    for lang in &languages {
        let lines: Vec<String> = train_corpora[lang]
            .iter()
            .flat_map(|t| t.verses.iter())
            .map(|v| corpus::tokenize_to_line(&v.text))
            .collect();
        let table = bpe::learn_merges_from_lines(&lines, 400, lang);
        let seg: Vec<String> = lines.iter().map(|l| table.segment_to_line(l)).collect();
        segmented.insert(lang.clone(), seg);
        tables.insert(lang.clone(), table);
    }
    let vocab = bpe::build_vocabulary(&segmented, &languages).unwrap();

    let encode = |pairs: &[ParallelPair]| -> Vec<corpus::TrainingExample> {
        pairs
            .iter()
            .map(|p| {
                let src = tables[&p.src_lang].segment_to_line(&corpus::tokenize_to_line(&p.src_text));
                let tgt = tables[&p.tgt_lang].segment_to_line(&corpus::tokenize_to_line(&p.tgt_text));
                vocab
                    .example_from_segmented(&src, &tgt, &p.src_lang, &p.tgt_lang)
                    .unwrap()
            })
            .collect()
    };
    let examples = encode(&train_pairs);
    let dev = DevSet {
        examples: encode(&dev_pairs),
        references: dev_pairs.iter().map(|p| p.tgt_text.clone()).collect(),
    };

    let model_cfg = nmtlab::model::ModelConfig {
        emb_dim: 32,
        rnn_dim: 64,
        vocab_size: vocab.len(),
        rnn_dropout: 0.1,
        word_dropout_src: 0.05,
        word_dropout_tgt: 0.05,
        layer_norm: true,
        layers: 1,
    };
    let opts = TrainOptions {
        learning_rate: 3e-3,
        token_budget: 360,
        // Dev BLEU sits at zero for the first few hundred steps on this
        // corpus; validate sparsely with extra patience.
        validation_every: 150,
        patience: 8,
        smoothing_decay: 0.05,
        clip_norm: 1.0,
        max_steps: Some(2800),
        max_epochs: None,
        bucket_size: 512,
        seed,
        checkpoint_dir: None,
        log_path: None,
    };
    let outcome = train_loop(&model_cfg, &examples, &dev, &vocab, &opts).unwrap();
    ToyModel {
        params: outcome.best,
        vocab,
        tables,
        best_bleu: outcome.best_score,
        steps: outcome.steps,
        history: outcome.history,
    }
}

/// Process-wide cache so several acceptance tests can share trained toy
/// models; training happens once per (setup, seed) with per-key locking.
pub fn trained(world_seed: u64, setup: Setup, seed: u64) -> Arc<ToyModel> {
    type Key = (u64, Setup, u64);
    type Slot = Arc<OnceLock<Arc<ToyModel>>>;
    static CACHE: OnceLock<Mutex<HashMap<Key, Slot>>> = OnceLock::new();

    let world = world(world_seed);
    let slot: Slot = {
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap();
        guard
            .entry((world_seed, setup, seed))
            .or_insert_with(|| Arc::new(OnceLock::new()))
            .clone()
    };
    slot.get_or_init(|| Arc::new(train_toy(&world, setup, seed)))
        .clone()
}

pub fn world(world_seed: u64) -> Arc<ToyWorld> {
    static WORLDS: OnceLock<Mutex<HashMap<u64, Arc<ToyWorld>>>> = OnceLock::new();
    let worlds = WORLDS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = worlds.lock().unwrap();
    guard
        .entry(world_seed)
        .or_insert_with(|| Arc::new(ToyWorld::generate(world_seed)))
        .clone()
}
