//! Acceptance suite: every release-gating property in one place, one test
//! per criterion, each printing a PASS line on success. Run with
//! `cargo test -p nmtlab --test acceptance -- --nocapture` to see the
//! lines; failures panic with the measured values.

mod support;

use std::collections::BTreeMap;

use nmtlab::autodiff::{max_gradient_error, numeric_gradients, Var};
use nmtlab::bpe;
use nmtlab::corpus::{self, TrainingExample};
use nmtlab::decode::{
    beam_search, corpus_perplexity, default_max_len, greedy, score_target, Hypothesis,
    ModelScorer, StepScorer,
};
use nmtlab::error::Result;
use nmtlab::eval;
use nmtlab::model::{build_batch_graph, ModelConfig, ParameterSet, TrainNoise};
use nmtlab::rng::SplitMix64;
use nmtlab::train::{
    adam_step, clip_global_norm, make_batches, AdamConfig, AdamState, EarlyStopState,
};

use support::{trained, world, Setup, ToyModel, ToyWorld, AUX1, PIVOT};

const WORLD_SEED: u64 = 0xBEEF;

fn pass(n: usize, name: &str, detail: &str) {
    println!("ACCEPTANCE {n} ({name}): PASS {detail}");
}

// ---- 1: gradient fidelity ----------------------------------------------------

#[test]
fn acceptance_1_gradient_fidelity() {
    let started = std::time::Instant::now();
    let cfg = ModelConfig {
        emb_dim: 8,
        rnn_dim: 16,
        vocab_size: 50,
        rnn_dropout: 0.2,
        word_dropout_src: 0.1,
        word_dropout_tgt: 0.1,
        layer_norm: true,
        layers: 1,
    };
    let params32 = ParameterSet::<f32>::init(&cfg, 21).unwrap();
    let params64: ParameterSet<f64> = params32.cast();
    let batch = vec![
        TrainingExample {
            src_tokens: vec![5, 12, 33, 7],
            tgt_tokens: vec![9, 41, 18, bpe::EOS_ID],
            src_lang: "a".into(),
            tgt_lang: "b".into(),
        },
        TrainingExample {
            src_tokens: vec![44, 6],
            tgt_tokens: vec![27, 13, bpe::EOS_ID],
            src_lang: "a".into(),
            tgt_lang: "b".into(),
        },
    ];
    // The same noise seed replays identical dropout masks and word
    // dropouts in both precisions.
    let noise = || {
        Some(TrainNoise {
            rng: SplitMix64::stream(77, 0),
        })
    };

    // 64-bit graph provides both its own analytic gradients and the
    // finite-difference oracle (finite differences need 64-bit forward
    // passes to be meaningful).
    let mut built64 = build_batch_graph(&params64, &batch, noise()).unwrap();
    built64.graph.tape.backward(built64.loss).unwrap();
    let named: Vec<(String, Var)> = built64.graph.bound_params();
    let vars: Vec<Var> = named.iter().map(|(_, v)| *v).collect();
    let analytic64: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            built64
                .graph
                .tape
                .grad(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; built64.graph.tape.value(v).len()])
        })
        .collect();
    let numeric = numeric_gradients(&mut built64.graph.tape, built64.loss, &vars, 1e-5).unwrap();

    let gmax = numeric
        .iter()
        .flatten()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    assert!(gmax > 0.0, "degenerate batch: all gradients zero");
    let err64 = max_gradient_error(&analytic64, &numeric, 1e-3 * gmax);
    assert!(
        err64 < 1e-5,
        "64-bit gradients deviate from finite differences: {err64}"
    );

    // 32-bit analytic gradients against the same 64-bit oracle.
    let mut built32 = build_batch_graph(&params32, &batch, noise()).unwrap();
    built32.graph.tape.backward(built32.loss).unwrap();
    let named32 = built32.graph.bound_params();
    assert_eq!(
        named32.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        named.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        "parameter registration order must match across precisions"
    );
    let analytic32: Vec<Vec<f64>> = named32
        .iter()
        .map(|&(_, v)| {
            built32
                .graph
                .tape
                .grad(v)
                .map(|g| g.data().iter().map(|x| *x as f64).collect())
                .unwrap_or_else(|| vec![0.0; built32.graph.tape.value(v).len()])
        })
        .collect();
    let err32 = max_gradient_error(&analytic32, &numeric, 1e-3 * gmax);
    assert!(
        err32 < 1e-3,
        "32-bit gradients deviate from finite differences: {err32}"
    );

    let scalars: usize = numeric.iter().map(Vec::len).sum();
    assert!(
        started.elapsed().as_secs() < 60,
        "gradient check exceeded one minute"
    );
    pass(
        1,
        "gradient fidelity",
        &format!("{scalars} parameters, 64-bit err {err64:.2e}, 32-bit err {err32:.2e}"),
    );
}

// ---- 2: overfit sanity --------------------------------------------------------

#[test]
fn acceptance_2_overfit_sanity() {
    let started = std::time::Instant::now();
    // 32 fixed sentences over a small vocabulary, memorized by a tiny
    // model driven through the real batching/optimizer path.
    let mut rng = SplitMix64::stream(0x0F17, 3);
    let words = ["kapo", "timu", "sela", "noki", "ruva", "pemi", "dolu", "basa"];
    let mut sentence = |rng: &mut SplitMix64, n: usize| {
        (0..n)
            .map(|_| words[rng.index(words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut lines: Vec<(String, String)> = Vec::new();
    for _ in 0..32 {
        let ns = 3 + rng.index(3);
        let nt = 3 + rng.index(3);
        let src = sentence(&mut rng, ns);
        let tgt = sentence(&mut rng, nt);
        lines.push((src, tgt));
    }

    let src_lines: Vec<String> = lines.iter().map(|(s, _)| s.clone()).collect();
    let tgt_lines: Vec<String> = lines.iter().map(|(_, t)| t.clone()).collect();
    let table_src = bpe::learn_merges_from_lines(&src_lines, 60, "a");
    let table_tgt = bpe::learn_merges_from_lines(&tgt_lines, 60, "b");
    let mut segmented = BTreeMap::new();
    segmented.insert(
        "a".to_string(),
        src_lines.iter().map(|l| table_src.segment_to_line(l)).collect::<Vec<_>>(),
    );
    segmented.insert(
        "b".to_string(),
        tgt_lines.iter().map(|l| table_tgt.segment_to_line(l)).collect::<Vec<_>>(),
    );
    let vocab = bpe::build_vocabulary(&segmented, &["a".to_string(), "b".to_string()]).unwrap();
    let examples: Vec<TrainingExample> = lines
        .iter()
        .map(|(s, t)| {
            vocab
                .example_from_segmented(
                    &table_src.segment_to_line(s),
                    &table_tgt.segment_to_line(t),
                    "a",
                    "b",
                )
                .unwrap()
        })
        .collect();

    let cfg = ModelConfig {
        emb_dim: 16,
        rnn_dim: 32,
        vocab_size: vocab.len(),
        rnn_dropout: 0.0,
        word_dropout_src: 0.0,
        word_dropout_tgt: 0.0,
        layer_norm: true,
        layers: 1,
    };
    let mut params = ParameterSet::<f32>::init(&cfg, 5).unwrap();
    let mut adam = AdamState::new(
        AdamConfig {
            alpha: 3e-3,
            ..AdamConfig::default()
        },
        &params,
    );

    let train_ppl = |params: &ParameterSet<f32>| -> f64 {
        let scores: Vec<(f64, usize)> = examples
            .iter()
            .map(|ex| score_target(params, &ex.src_tokens, &ex.tgt_tokens).unwrap())
            .collect();
        corpus_perplexity(&scores)
    };

    let mut steps = 0u64;
    let mut reached = None;
    'outer: for epoch in 0..u64::MAX {
        let batches = make_batches(&examples, 512, epoch, 64);
        for batch in batches {
            let chosen: Vec<TrainingExample> =
                batch.iter().map(|&i| examples[i].clone()).collect();
            let (_, mut grads, _) =
                nmtlab::model::batch_loss_and_gradients(&params, &chosen, None).unwrap();
            clip_global_norm(&mut grads, 1.0).unwrap();
            adam_step(&mut params, &grads, &mut adam).unwrap();
            steps += 1;
            if steps % 50 == 0 && train_ppl(&params) < 1.3 {
                reached = Some(steps);
                break 'outer;
            }
            if steps >= 2000 {
                break 'outer;
            }
        }
    }
    let final_ppl = train_ppl(&params);
    assert!(
        reached.is_some() && final_ppl < 1.3,
        "per-token perplexity {final_ppl} after {steps} steps"
    );
    assert!(params.all_finite());
    assert!(
        started.elapsed().as_secs() < 300,
        "overfit run exceeded five minutes"
    );
    pass(
        2,
        "overfit sanity",
        &format!("perplexity {final_ppl:.4} after {} steps", reached.unwrap()),
    );
}

// ---- 3: metric oracles ----------------------------------------------------------

#[test]
fn acceptance_3_metric_oracles() {
    let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    // BLEU: identical hypothesis scores exactly 100.
    let hyps = strings(&["the cat sat on the mat"]);
    let refs = vec![strings(&["the cat sat on the mat"])];
    assert_eq!(eval::bleu(&hyps, &refs, 4).unwrap(), 100.0);

    // BLEU: no 4-gram overlap anywhere scores exactly 0.
    let hyps = strings(&["aa bb cc dd ee"]);
    let refs = vec![strings(&["aa bb cc xx dd ee"])];
    assert_eq!(eval::bleu(&hyps, &refs, 4).unwrap(), 0.0);

    // Clipped unigram precision 2/7.
    let hyps = strings(&["the the the the the the the"]);
    let refs = vec![strings(&["the cat is on the mat"])];
    let unigram = eval::bleu(&hyps, &refs, 1).unwrap();
    assert!(
        (unigram - 100.0 * 2.0 / 7.0).abs() < 1e-9,
        "clipped precision {unigram}"
    );

    // PINC fixtures: 0, 100, and the hand-computed 61.11.
    assert_eq!(eval::pinc("same words here", "same words here", 4).unwrap(), 0.0);
    assert_eq!(eval::pinc("aa bb", "cc dd", 4).unwrap(), 100.0);
    let p = eval::pinc("the cat sat", "the cat slept", 4).unwrap();
    assert!((p - 100.0 * 11.0 / 18.0).abs() < 0.01, "PINC {p}");

    // Copy-rate fixtures are exact.
    let sources = strings(&["a b", "c d", "e f", "g h"]);
    let outputs = strings(&["a b", "x", "y", "z"]);
    assert_eq!(eval::copy_rate(&sources, &outputs).unwrap(), 25.0);
    assert_eq!(
        eval::copy_rate(&strings(&["Hello!"]), &strings(&["hello"])).unwrap(),
        100.0
    );
    assert_eq!(
        eval::copy_rate(&strings(&["a", "b"]), &strings(&["x", "y"])).unwrap(),
        0.0
    );

    pass(3, "metric oracles", "all fixtures exact");
}

// ---- 4: BPE round trip ------------------------------------------------------------

#[test]
fn acceptance_4_bpe_round_trip() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/utf8_corpus.txt");
    let raw = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<String> = raw.lines().map(corpus::tokenize_to_line).collect();
    assert!(!lines.is_empty());

    let table = bpe::learn_merges_from_lines(&lines, 150, "mixed");
    let mut round_tripped = 0usize;
    for line in &lines {
        let segmented = table.segment(line);
        assert_eq!(&bpe::unsegment(&segmented), line, "round trip broke");
        round_tripped += 1;
    }

    // Determinism: learning twice writes byte-identical codes files.
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("one"), dir.path().join("two"));
    bpe::save_codes(&table, &p1).unwrap();
    let again = bpe::learn_merges_from_lines(&lines, 150, "mixed");
    bpe::save_codes(&again, &p2).unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "codes files differ across runs"
    );

    pass(
        4,
        "BPE round trip",
        &format!("{round_tripped}/{} lines, deterministic codes", lines.len()),
    );
}

// ---- 5: zero-shot paraphrase trend --------------------------------------------------

fn paraphrase_perplexity(model: &ToyModel, world: &ToyWorld) -> f64 {
    let scores: Vec<(f64, usize)> = world
        .test_src
        .iter()
        .zip(&world.test_para)
        .map(|(a, b)| {
            let src = model.src_ids(a, PIVOT);
            let tgt = model.tgt_ids(b, PIVOT);
            score_target(&model.params, &src, &tgt).unwrap()
        })
        .collect();
    corpus_perplexity(&scores)
}

#[test]
fn acceptance_5_zero_shot_paraphrase_trend() {
    let started = std::time::Instant::now();
    let w = world(WORLD_SEED);
    let seeds = [1u64, 2, 3];
    let handles: Vec<_> = seeds
        .into_iter()
        .map(|seed| {
            let w = w.clone();
            std::thread::spawn(move || {
                let bi = trained(WORLD_SEED, Setup::Bilingual, seed);
                let tri = trained(WORLD_SEED, Setup::Trilingual, seed);
                (
                    seed,
                    paraphrase_perplexity(&bi, &w),
                    paraphrase_perplexity(&tri, &w),
                )
            })
        })
        .collect();
    let mut results: Vec<(u64, f64, f64)> =
        handles.into_iter().map(|h| h.join().unwrap()).collect();
    results.sort_by_key(|r| r.0);
    for (seed, bi, tri) in &results {
        println!("  seed {seed}: bilingual ppl {bi:.3}, trilingual ppl {tri:.3}");
    }
    let median = |mut xs: Vec<f64>| {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[xs.len() / 2]
    };
    let bi_median = median(results.iter().map(|r| r.1).collect());
    let tri_median = median(results.iter().map(|r| r.2).collect());
    assert!(
        tri_median < bi_median,
        "trilingual median {tri_median} is not below bilingual median {bi_median}"
    );
    assert!(
        started.elapsed().as_secs() < 1800,
        "trend run exceeded thirty minutes"
    );
    pass(
        5,
        "zero-shot paraphrase trend",
        &format!("median ppl: trilingual {tri_median:.3} < bilingual {bi_median:.3}"),
    );
}

// ---- 6: supervised copy trend --------------------------------------------------------

fn decode_paraphrases(model: &ToyModel, world: &ToyWorld, beam: usize) -> Vec<String> {
    world
        .test_src
        .iter()
        .map(|s| {
            let src = model.src_ids(s, PIVOT);
            let scorer = ModelScorer::new(&model.params, &src).unwrap();
            let hyp = beam_search(&scorer, beam, default_max_len(src.len())).unwrap();
            model.ids_to_text(&hyp.tokens)
        })
        .collect()
}

#[test]
fn acceptance_6_supervised_copy_trend() {
    let started = std::time::Instant::now();
    let w = world(WORLD_SEED);
    let zero_shot = trained(WORLD_SEED, Setup::Trilingual, 1);
    let supervised = trained(WORLD_SEED, Setup::Supervised, 1);

    let zero_out = decode_paraphrases(&zero_shot, &w, 12);
    let sup_out = decode_paraphrases(&supervised, &w, 12);
    let zero_copy = eval::copy_rate(&w.test_src, &zero_out).unwrap();
    let sup_copy = eval::copy_rate(&w.test_src, &sup_out).unwrap();
    assert!(
        zero_copy < 10.0,
        "zero-shot copy rate {zero_copy}% should stay below 10%"
    );
    assert!(
        sup_copy > 50.0,
        "supervised copy rate {sup_copy}% should exceed 50%"
    );
    assert!(
        started.elapsed().as_secs() < 1800,
        "copy-trend run exceeded thirty minutes"
    );
    pass(
        6,
        "supervised copy trend",
        &format!("zero-shot {zero_copy:.1}% < 10% < 50% < supervised {sup_copy:.1}%"),
    );
}

// ---- 7: early stopping -----------------------------------------------------------------

#[test]
fn acceptance_7_early_stopping() {
    let run = || {
        let mut state = EarlyStopState::new(5);
        let mut stopped_at = None;
        for (i, score) in [10.0, 11.0, 10.5, 10.5, 10.5, 10.5, 10.5].iter().enumerate() {
            if state.update(*score) {
                stopped_at = Some(i + 1);
                break;
            }
        }
        (stopped_at, state.consecutive_failures, state.best_score)
    };
    let (stopped_at, failures, best) = run();
    assert_eq!(stopped_at, Some(7), "stop must land on the 5th failure");
    assert_eq!(failures, 5);
    assert_eq!(best, Some(11.0));
    assert_eq!(run(), (stopped_at, failures, best), "must be deterministic");
    pass(7, "early stopping", "stopped after exactly 5 non-improvements");
}

// ---- 8: decoder properties ----------------------------------------------------------------

/// Fixed conditional distributions keyed by prefix, uniform elsewhere.
struct TableScorer {
    vocab: usize,
    rows: std::collections::HashMap<Vec<u32>, Vec<f64>>,
}

impl StepScorer for TableScorer {
    type State = Vec<u32>;
    fn start(&self) -> Result<Self::State> {
        Ok(Vec::new())
    }
    fn step(&self, state: &Self::State, prev: u32) -> Result<(Self::State, Vec<f64>)> {
        let mut next = state.clone();
        if !(next.is_empty() && prev == bpe::BOS_ID) {
            next.push(prev);
        }
        let lp = match self.rows.get(&next) {
            Some(ps) => ps.iter().map(|p| p.ln()).collect(),
            None => vec![-(self.vocab as f64).ln(); self.vocab],
        };
        Ok((next, lp))
    }
}

#[test]
fn acceptance_8_decoder_properties() {
    // Beam size 1 equals greedy on 50 random toy inputs.
    let cfg = ModelConfig {
        emb_dim: 8,
        rnn_dim: 12,
        vocab_size: 20,
        rnn_dropout: 0.0,
        word_dropout_src: 0.0,
        word_dropout_tgt: 0.0,
        layer_norm: true,
        layers: 1,
    };
    let mut rng = SplitMix64::stream(0xDEC0, 1);
    let mut checked = 0;
    for model_seed in 0..5u64 {
        let params = ParameterSet::<f32>::init(&cfg, 300 + model_seed).unwrap();
        for _ in 0..10 {
            let len = 1 + rng.index(5);
            let src: Vec<u32> = (0..len).map(|_| 4 + rng.index(16) as u32).collect();
            let scorer = ModelScorer::new(&params, &src).unwrap();
            let max_len = default_max_len(src.len());
            let g = greedy(&scorer, max_len).unwrap();
            let b = beam_search(&scorer, 1, max_len).unwrap();
            assert_eq!(g.tokens, b.tokens, "beam-1 diverged from greedy");
            checked += 1;
        }
    }
    assert_eq!(checked, 50);

    // Engineered two-step distribution where greedy is suboptimal;
    // beam size 2 recovers the exhaustive-enumeration optimum.
    let mut rows = std::collections::HashMap::new();
    rows.insert(vec![], vec![0.0, 0.0, 0.0, 0.0, 0.6, 0.4]);
    rows.insert(vec![4], vec![0.0, 0.0, 0.0, 0.34, 0.33, 0.33]);
    rows.insert(vec![5], vec![0.0, 0.0, 0.0, 0.9, 0.05, 0.05]);
    let scorer = TableScorer { vocab: 6, rows };

    let greedy_hyp = greedy(&scorer, 2).unwrap();
    let beam_hyp = beam_search(&scorer, 2, 2).unwrap();

    // Exhaustive enumeration over all sequences of length <= 2.
    let mut all: Vec<Hypothesis> = Vec::new();
    let (s0, lp0) = scorer.step(&Vec::new(), bpe::BOS_ID).unwrap();
    for (a, &la) in lp0.iter().enumerate() {
        let first = vec![a as u32];
        if a as u32 == bpe::EOS_ID {
            all.push(Hypothesis {
                tokens: first,
                logprob: la,
            });
            continue;
        }
        let (_, lp1) = scorer.step(&s0, a as u32).unwrap();
        for (b, &lb) in lp1.iter().enumerate() {
            all.push(Hypothesis {
                tokens: vec![a as u32, b as u32],
                logprob: la + lb,
            });
        }
    }
    all.sort_by(|x, y| {
        y.normalized_score()
            .partial_cmp(&x.normalized_score())
            .unwrap()
            .then_with(|| x.tokens.cmp(&y.tokens))
    });
    let optimum = &all[0];
    assert_eq!(beam_hyp.tokens, optimum.tokens, "beam-2 missed the optimum");
    assert!((beam_hyp.logprob - optimum.logprob).abs() < 1e-12);
    assert_ne!(greedy_hyp.tokens, optimum.tokens, "fixture is not a trap");

    pass(
        8,
        "decoder properties",
        "beam-1 == greedy on 50 inputs; beam-2 solves the greedy trap",
    );
}

// ---- 9: translation sanity ----------------------------------------------------------------

#[test]
fn acceptance_9_translation_sanity() {
    let started = std::time::Instant::now();
    let w = world(WORLD_SEED);
    let bi = trained(WORLD_SEED, Setup::Bilingual, 1);

    let hyps: Vec<String> = w
        .test_src
        .iter()
        .map(|s| {
            let src = bi.src_ids(s, AUX1);
            let scorer = ModelScorer::new(&bi.params, &src).unwrap();
            let hyp = beam_search(&scorer, 12, default_max_len(src.len())).unwrap();
            bi.ids_to_text(&hyp.tokens)
        })
        .collect();
    let refs: Vec<Vec<String>> = w.test_aux1.iter().map(|r| vec![r.clone()]).collect();
    let bleu = eval::bleu(&hyps, &refs, 4).unwrap();
    assert!(bleu > 90.0, "held-out translation BLEU {bleu} should exceed 90");
    assert!(
        started.elapsed().as_secs() < 900,
        "translation sanity exceeded fifteen minutes"
    );
    pass(9, "translation sanity", &format!("BLEU {bleu:.2} > 90"));
}
