//! Subcommand front end tying the pipeline together.
//!
//! Exit codes: 0 success, 1 domain errors (bad data), 2 usage and I/O
//! errors. Diagnostics go to standard error; data goes to files or
//! standard output.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bpe::{self, MergeTable, Vocabulary};
use crate::corpus::{self, Split, Translation};
use crate::decode::{self, ModelScorer};
use crate::error::{Error, Result};
use crate::eval;
use crate::rng::SplitMix64;
use crate::train::{self, checkpoint, DevSet};

pub use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "nmtlab",
    version,
    about = "Desk-scale multilingual translation and paraphrasing laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build training/dev/test pairs, BPE codes and the vocabulary from an
    /// experiment configuration.
    Prepare(PrepareArgs),
    /// Learn a byte-pair-encoding code table for one language.
    LearnBpe(LearnBpeArgs),
    /// Segment a text file with a learned code table.
    ApplyBpe(ApplyBpeArgs),
    /// Build the joint vocabulary from segmented corpora.
    BuildVocab(BuildVocabArgs),
    /// Train a model from an experiment configuration (resumes from an
    /// existing checkpoint in the output directory).
    Train(TrainArgs),
    /// Translate a file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Teacher-forced scoring: per-line negative log-likelihood.
    Score(ScoreArgs),
    /// Compute BLEU/PINC/copy-rate (and perplexity) reports.
    Evaluate(EvaluateArgs),
    /// Build paraphrase test sets from a sentence-pair file.
    Testset(TestsetArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct LearnBpeArgs {
    /// Raw text input, one sentence per line (tokenized internally).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    language: String,
    #[arg(long)]
    merges: usize,
    /// Codes file to write.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct ApplyBpeArgs {
    #[arg(long)]
    codes: PathBuf,
    /// Raw text input (tokenized internally, then segmented).
    #[arg(long)]
    input: PathBuf,
    /// Segmented output; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Comma-separated language order, pivot first.
    #[arg(long, value_delimiter = ',')]
    languages: Vec<String>,
    /// Per-language segmented corpus as `lang=path`; repeatable.
    #[arg(long = "segmented")]
    segmented: Vec<String>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Codes file of the source language.
    #[arg(long)]
    codes: PathBuf,
    /// Requested output language (flag token).
    #[arg(long)]
    target_lang: String,
    #[arg(long)]
    input: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    beam: usize,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Codes file of the source language.
    #[arg(long)]
    source_codes: PathBuf,
    /// Codes file of the target language.
    #[arg(long)]
    target_codes: PathBuf,
    /// Language whose flag steers the decoder (the target side).
    #[arg(long)]
    target_lang: String,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Scoring TSV (`line<TAB>nll<TAB>tokens`); standard output when
    /// omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Generated sentences, one per line.
    #[arg(long)]
    hyp: PathBuf,
    /// Source sentences (for PINC and copy rate).
    #[arg(long)]
    src: Option<PathBuf>,
    /// Reference files, parallel to the hypotheses; repeatable.
    #[arg(long = "refs", num_args = 1..)]
    refs: Vec<PathBuf>,
    /// Multi-reference test set (`src<TAB>ref1<TAB>ref2...`) as an
    /// alternative to --src/--refs.
    #[arg(long)]
    testset: Option<PathBuf>,
    /// Scoring TSV for the perplexity column.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Report TSV to write.
    #[arg(long)]
    report: PathBuf,
    /// Optional JSON mirror of the report.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct TestsetArgs {
    /// Sentence pairs (`a<TAB>b`), treated as unordered paraphrases.
    #[arg(long)]
    pairs: PathBuf,
    /// Single-reference output (`src<TAB>ref`).
    #[arg(long)]
    single_out: PathBuf,
    /// Multi-reference output (`src<TAB>ref1<TAB>ref2...`).
    #[arg(long)]
    multi_out: Option<PathBuf>,
    /// Expand contractions on both sides first.
    #[arg(long)]
    expand_contractions: bool,
    /// Drop pairs that differ only in punctuation or case.
    #[arg(long)]
    dedup_punct: bool,
    /// Build the multi-reference set (implied by --multi-out).
    #[arg(long)]
    multi_ref: bool,
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Prepare(args) => prepare(&args),
        Command::LearnBpe(args) => learn_bpe(&args),
        Command::ApplyBpe(args) => apply_bpe(&args),
        Command::BuildVocab(args) => build_vocab(&args),
        Command::Train(args) => train_cmd(&args),
        Command::Translate(args) => translate(&args),
        Command::Score(args) => score(&args),
        Command::Evaluate(args) => evaluate(&args),
        Command::Testset(args) => testset(&args),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .lines()
        .map(str::to_string)
        .collect())
}

fn write_lines(lines: &[String], path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            for line in lines {
                writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
            }
            Ok(())
        }
        None => {
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for line in lines {
                writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))?;
            }
            Ok(())
        }
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

// ---- prepare -------------------------------------------------------------------

fn prepare(args: &PrepareArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;

    // Load all corpora, splitting verses by stable id hash.
    let mut split_corpora: BTreeMap<Split, BTreeMap<String, Vec<Translation>>> = BTreeMap::new();
    for want in [Split::Train, Split::Dev, Split::Test] {
        split_corpora.insert(want, BTreeMap::new());
    }
    for (lang, files) in &cfg.corpora {
        for file in files {
            let translation = corpus::load_translation(file, &file_stem(file))?;
            for want in [Split::Train, Split::Dev, Split::Test] {
                let filtered = corpus::filter_split(
                    &translation,
                    want,
                    cfg.dev_fraction,
                    cfg.test_fraction,
                    cfg.seed,
                );
                split_corpora
                    .get_mut(&want)
                    .expect("initialized")
                    .entry(lang.clone())
                    .or_default()
                    .push(filtered);
            }
        }
    }

    // Learn language-dependent codes on the training split.
    let mut tables: BTreeMap<String, MergeTable> = BTreeMap::new();
    let mut segmented: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for lang in &cfg.languages {
        let lines: Vec<String> = split_corpora[&Split::Train]
            .get(lang)
            .map(|ts| {
                ts.iter()
                    .flat_map(|t| t.verses.iter())
                    .map(|v| corpus::tokenize_to_line(&v.text))
                    .collect()
            })
            .unwrap_or_default();
        let table = bpe::learn_merges_from_lines(&lines, cfg.bpe_merges, lang);
        bpe::save_codes(&table, cfg.codes_path(lang))?;
        let seg_lines: Vec<String> = lines.iter().map(|l| table.segment_to_line(l)).collect();
        segmented.insert(lang.clone(), seg_lines);
        tables.insert(lang.clone(), table);
    }

    let vocab = bpe::build_vocabulary(&segmented, &cfg.languages)?;
    vocab.save(cfg.vocab_path())?;

    // Pair construction per split; identity pairs only in training.
    let policy = cfg.policy();
    let mut dev_policy = policy.clone();
    dev_policy.identity_language = None;
    for (split, name, pol) in [
        (Split::Train, "train", &policy),
        (Split::Dev, "dev", &dev_policy),
        (Split::Test, "test", &dev_policy),
    ] {
        let corpora = &split_corpora[&split];
        let mut pairs = corpus::build_training_set(corpora, pol)?;
        if split == Split::Dev && pairs.len() > cfg.dev_max_examples {
            let mut rng = SplitMix64::stream(cfg.seed, 0xDE5);
            rng.shuffle(&mut pairs);
            pairs.truncate(cfg.dev_max_examples);
        }
        // Store pre-tokenized, segmented text.
        for p in pairs.iter_mut() {
            p.src_text = tables[&p.src_lang].segment_to_line(&corpus::tokenize_to_line(&p.src_text));
            p.tgt_text = tables[&p.tgt_lang].segment_to_line(&corpus::tokenize_to_line(&p.tgt_text));
        }
        corpus::write_pairs_tsv(&pairs, cfg.pairs_path(name))?;
        eprintln!("{name}: {} pairs", pairs.len());
    }
    eprintln!(
        "vocabulary: {} entries over {:?}",
        vocab.len(),
        cfg.languages
    );
    Ok(())
}

// ---- bpe commands -----------------------------------------------------------------

fn learn_bpe(args: &LearnBpeArgs) -> Result<()> {
    let lines: Vec<String> = read_lines(&args.input)?
        .iter()
        .map(|l| corpus::tokenize_to_line(l))
        .collect();
    let table = bpe::learn_merges_from_lines(&lines, args.merges, &args.language);
    bpe::save_codes(&table, &args.output)?;
    eprintln!("learned {} merges for {}", table.merges.len(), args.language);
    Ok(())
}

fn apply_bpe(args: &ApplyBpeArgs) -> Result<()> {
    let table = bpe::load_codes(&args.codes)?;
    let out: Vec<String> = read_lines(&args.input)?
        .iter()
        .map(|l| table.segment_to_line(&corpus::tokenize_to_line(l)))
        .collect();
    write_lines(&out, args.output.as_deref())
}

fn build_vocab(args: &BuildVocabArgs) -> Result<()> {
    let mut segmented: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for spec in &args.segmented {
        let (lang, path) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!("--segmented needs `lang=path`, got `{spec}`"))
        })?;
        segmented.insert(lang.to_string(), read_lines(Path::new(path))?);
    }
    let vocab = bpe::build_vocabulary(&segmented, &args.languages)?;
    vocab.save(&args.output)?;
    eprintln!("vocabulary: {} entries", vocab.len());
    Ok(())
}

// ---- train --------------------------------------------------------------------------

fn encode_pairs(pairs: &[corpus::ParallelPair], vocab: &Vocabulary) -> Result<Vec<corpus::TrainingExample>> {
    pairs
        .iter()
        .map(|p| vocab.example_from_segmented(&p.src_text, &p.tgt_text, &p.src_lang, &p.tgt_lang))
        .collect()
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let vocab = Vocabulary::load(cfg.vocab_path())?;
    let train_pairs = corpus::read_pairs_tsv(cfg.pairs_path("train"))?;
    let dev_pairs = corpus::read_pairs_tsv(cfg.pairs_path("dev"))?;
    if dev_pairs.is_empty() {
        return Err(Error::Domain(
            "dev set is empty; raise dev_fraction and re-run prepare".into(),
        ));
    }

    let examples = encode_pairs(&train_pairs, &vocab)?;
    let dev = DevSet {
        examples: encode_pairs(&dev_pairs, &vocab)?,
        references: dev_pairs
            .iter()
            .map(|p| bpe::unsegment(&split_tokens(&p.tgt_text)))
            .collect(),
    };
    let model_cfg = cfg.model.to_model_config(vocab.len());
    let opts = cfg.train_options();
    let outcome = train::train_loop(&model_cfg, &examples, &dev, &vocab, &opts)?;
    eprintln!(
        "trained {} steps; best dev BLEU {:?}{}",
        outcome.steps,
        outcome.best_score,
        if outcome.stopped_early {
            " (early stop)"
        } else {
            ""
        }
    );
    Ok(())
}

fn split_tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

// ---- translate / score ------------------------------------------------------------------

fn translate(args: &TranslateArgs) -> Result<()> {
    if args.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let (params, _meta) = checkpoint::load_params(&args.checkpoint)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let table = bpe::load_codes(&args.codes)?;
    let flag = vocab.flag_id(&args.target_lang)?;

    let mut out = Vec::new();
    for line in read_lines(&args.input)? {
        let segmented = table.segment_to_line(&corpus::tokenize_to_line(&line));
        let mut src_ids = vec![flag];
        src_ids.extend(vocab.encode_line(&segmented));
        let scorer = ModelScorer::new(&params, &src_ids)?;
        let hyp = decode::beam_search(&scorer, args.beam, decode::default_max_len(src_ids.len()))?;
        let words = split_tokens(&bpe::unsegment(&vocab.decode_tokens(&hyp.tokens)));
        out.push(corpus::detokenize(&words));
    }
    write_lines(&out, args.output.as_deref())
}

fn score(args: &ScoreArgs) -> Result<()> {
    let (params, _meta) = checkpoint::load_params(&args.checkpoint)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let src_table = bpe::load_codes(&args.source_codes)?;
    let tgt_table = bpe::load_codes(&args.target_codes)?;
    let flag = vocab.flag_id(&args.target_lang)?;

    let sources = read_lines(&args.source)?;
    let targets = read_lines(&args.target)?;
    if sources.len() != targets.len() {
        return Err(Error::Domain(format!(
            "line count mismatch between {} and {}",
            args.source.display(),
            args.target.display()
        )));
    }

    let mut scores = Vec::with_capacity(sources.len());
    for (i, (src, tgt)) in sources.iter().zip(&targets).enumerate() {
        let mut src_ids = vec![flag];
        src_ids.extend(vocab.encode_line(&src_table.segment_to_line(&corpus::tokenize_to_line(src))));
        let mut tgt_ids =
            vocab.encode_line(&tgt_table.segment_to_line(&corpus::tokenize_to_line(tgt)));
        tgt_ids.push(bpe::EOS_ID);
        let (nll, token_count) = decode::score_target(&params, &src_ids, &tgt_ids)?;
        scores.push(eval::ScoreLine {
            line_index: i,
            nll,
            token_count,
        });
    }
    match &args.output {
        Some(p) => eval::write_scores(&scores, p),
        None => {
            let lines: Vec<String> = scores
                .iter()
                .map(|s| format!("{}\t{}\t{}", s.line_index, s.nll, s.token_count))
                .collect();
            write_lines(&lines, None)
        }
    }
}

// ---- evaluate / testset -------------------------------------------------------------------

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let report = match (&args.testset, &args.src) {
        (Some(testset), _) => {
            let set = corpus::read_multi_ref(testset)?;
            let hyps = read_lines(&args.hyp)?;
            if hyps.len() != set.entries.len() {
                return Err(Error::Domain(format!(
                    "line count mismatch between {} and {}",
                    args.hyp.display(),
                    testset.display()
                )));
            }
            let sources: Vec<String> = set.entries.iter().map(|(s, _)| s.clone()).collect();
            let references: Vec<Vec<String>> =
                set.entries.iter().map(|(_, r)| r.clone()).collect();
            let scores = match &args.scores {
                Some(p) => Some(eval::read_scores(p)?),
                None => None,
            };
            let report = eval::make_report(scores.as_deref(), &hyps, &sources, &references)?;
            fs::write(&args.report, report.to_tsv()).map_err(|e| Error::io(&args.report, e))?;
            if let Some(jp) = &args.json {
                fs::write(jp, report.to_json()).map_err(|e| Error::io(jp, e))?;
            }
            report
        }
        (None, Some(src)) => {
            if args.refs.is_empty() {
                return Err(Error::Config(
                    "evaluate needs --refs files or a --testset".into(),
                ));
            }
            let ref_paths: Vec<&Path> = args.refs.iter().map(PathBuf::as_path).collect();
            eval::report_from_files(
                args.scores.as_deref(),
                &args.hyp,
                src,
                &ref_paths,
                &args.report,
                args.json.as_deref(),
            )?
        }
        (None, None) => {
            return Err(Error::Config(
                "evaluate needs either --testset or --src with --refs".into(),
            ))
        }
    };
    eprintln!(
        "BLEU {:.2}, PINC {:.2}, copy rate {:.2}%{}",
        report.bleu,
        report.pinc,
        report.copy_rate,
        report
            .perplexity
            .map(|p| format!(", perplexity {p:.2}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn testset(args: &TestsetArgs) -> Result<()> {
    let pairs = corpus::load_pair_file(&args.pairs)?;
    let opts = corpus::TestsetOptions {
        expand_contractions: args.expand_contractions,
        drop_normalized_duplicates: args.dedup_punct,
    };
    let (single, multi) = corpus::build_paraphrase_testsets(&pairs, opts);
    corpus::write_single_ref(&single, &args.single_out)?;
    eprintln!("single-reference entries: {}", single.entries.len());
    if args.multi_ref || args.multi_out.is_some() {
        let path = args.multi_out.as_ref().ok_or_else(|| {
            Error::Config("--multi-ref needs --multi-out to name the output".into())
        })?;
        corpus::write_multi_ref(&multi, path)?;
        eprintln!("multi-reference entries: {}", multi.entries.len());
    }
    Ok(())
}
