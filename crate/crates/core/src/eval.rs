//! Corpus metrics for translation and paraphrase quality: multi-reference
//! BLEU, PINC, copy rate, perplexity aggregation, and report emission.
//!
//! Every metric normalizes its inputs first (lowercase, punctuation
//! removed, whitespace tokens); normalization is idempotent, so feeding
//! pre-normalized text is fine.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::text::{eval_normalize, eval_tokens};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_N: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

fn ngram_set(tokens: &[String], n: usize) -> HashSet<&[String]> {
    if tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).collect()
}

/// Corpus-level BLEU in percent, unsmoothed: clipped modified n-gram
/// precision (clipping against the maximum reference count), geometric
/// mean over n = 1..=max_n, and a brevity penalty using each sentence's
/// closest reference length (ties toward the shorter reference).
pub fn bleu(hypotheses: &[String], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Domain("BLEU over an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Domain(format!(
            "{} hypotheses against {} reference lists",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::Domain("every sentence needs at least one reference".into()));
    }

    let mut matched = vec![0u64; max_n];
    let mut total = vec![0u64; max_n];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;

    for (hyp, refs) in hypotheses.iter().zip(references) {
        let hyp_tokens = eval_tokens(hyp);
        let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| eval_tokens(r)).collect();

        hyp_len += hyp_tokens.len() as u64;
        let closest = ref_tokens
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let diff = (l as i64 - hyp_tokens.len() as i64).abs();
                (diff, l)
            })
            .unwrap_or(0);
        ref_len += closest as u64;

        for n in 1..=max_n {
            let hyp_counts = ngram_counts(&hyp_tokens, n);
            let mut ref_max: HashMap<&[String], u64> = HashMap::new();
            for r in &ref_tokens {
                for (gram, count) in ngram_counts(r, n) {
                    let slot = ref_max.entry(gram).or_insert(0);
                    *slot = (*slot).max(count);
                }
            }
            for (gram, count) in &hyp_counts {
                total[n - 1] += count;
                let clip = ref_max.get(gram).copied().unwrap_or(0);
                matched[n - 1] += (*count).min(clip);
            }
        }
    }

    let mut log_precision_sum = 0.0f64;
    for n in 0..max_n {
        if total[n] == 0 || matched[n] == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let geo_mean = (log_precision_sum / max_n as f64).exp();
    let bp = if hyp_len >= ref_len || hyp_len == 0 {
        if hyp_len == 0 {
            return Ok(0.0);
        }
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * geo_mean)
}

/// PINC in percent: mean over n = 1..=N of the proportion of candidate
/// n-grams (as sets) absent from the source, N capped by the candidate
/// length. Higher means more novel wording.
pub fn pinc(source: &str, candidate: &str, max_n: usize) -> Result<f64> {
    let src = eval_tokens(source);
    let cand = eval_tokens(candidate);
    if cand.is_empty() {
        return Err(Error::Domain(
            "PINC needs a non-empty candidate after normalization".into(),
        ));
    }
    let n_max = max_n.min(cand.len());
    let mut sum = 0.0;
    for n in 1..=n_max {
        let cand_grams = ngram_set(&cand, n);
        let src_grams = ngram_set(&src, n);
        let overlap = cand_grams.intersection(&src_grams).count();
        sum += 1.0 - overlap as f64 / cand_grams.len() as f64;
    }
    Ok(100.0 * sum / n_max as f64)
}

/// Percentage of outputs identical to their source after normalization.
pub fn copy_rate(sources: &[String], outputs: &[String]) -> Result<f64> {
    if sources.is_empty() || sources.len() != outputs.len() {
        return Err(Error::Domain(format!(
            "copy rate needs matching non-empty lists, got {} and {}",
            sources.len(),
            outputs.len()
        )));
    }
    let copies = sources
        .iter()
        .zip(outputs)
        .filter(|(s, o)| eval_normalize(s) == eval_normalize(o))
        .count();
    Ok(100.0 * copies as f64 / sources.len() as f64)
}

/// One `line_index<TAB>nll<TAB>token_count` record of a scoring run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreLine {
    pub line_index: usize,
    pub nll: f64,
    pub token_count: usize,
}

pub fn write_scores(scores: &[ScoreLine], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in scores {
        writeln!(f, "{}\t{}\t{}", s.line_index, s.nll, s.token_count)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreLine>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, i + 1, "expected `index<TAB>nll<TAB>tokens`"));
        }
        out.push(ScoreLine {
            line_index: fields[0]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, "bad line index"))?,
            nll: fields[1]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, "bad NLL"))?,
            token_count: fields[2]
                .parse()
                .map_err(|_| Error::parse(path, i + 1, "bad token count"))?,
        });
    }
    Ok(out)
}

/// Aggregated evaluation results; `perplexity` is absent when no scoring
/// data was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub pinc: f64,
    pub copy_rate: f64,
    pub perplexity: Option<f64>,
    pub sentences: usize,
    pub references_total: usize,
    pub references_mean: f64,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("bleu\t{}\n", self.bleu));
        out.push_str(&format!("pinc\t{}\n", self.pinc));
        out.push_str(&format!("copy_rate\t{}\n", self.copy_rate));
        match self.perplexity {
            Some(p) => out.push_str(&format!("perplexity\t{p}\n")),
            None => out.push_str("perplexity\tNA\n"),
        }
        out.push_str(&format!("sentences\t{}\n", self.sentences));
        out.push_str(&format!("references_total\t{}\n", self.references_total));
        out.push_str(&format!("references_mean\t{}\n", self.references_mean));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Builds the aggregate report: token-weighted perplexity from scoring
/// lines, corpus BLEU of outputs against references, mean PINC of outputs
/// against their sources, and the copy rate. Candidates that normalize to
/// nothing are skipped in the PINC mean.
pub fn make_report(
    scores: Option<&[ScoreLine]>,
    hypotheses: &[String],
    sources: &[String],
    references: &[Vec<String>],
) -> Result<EvalReport> {
    if hypotheses.len() != sources.len() || hypotheses.len() != references.len() {
        return Err(Error::Domain(format!(
            "line counts differ: {} hypotheses, {} sources, {} reference lists",
            hypotheses.len(),
            sources.len(),
            references.len()
        )));
    }
    if let Some(scores) = scores {
        if scores.len() != hypotheses.len() {
            return Err(Error::Domain(format!(
                "line counts differ: {} score lines for {} hypotheses",
                scores.len(),
                hypotheses.len()
            )));
        }
    }

    let bleu_score = bleu(hypotheses, references, DEFAULT_MAX_N)?;
    let mut pinc_sum = 0.0;
    let mut pinc_count = 0usize;
    for (src, hyp) in sources.iter().zip(hypotheses) {
        if let Ok(p) = pinc(src, hyp, DEFAULT_MAX_N) {
            pinc_sum += p;
            pinc_count += 1;
        }
    }
    let pinc_mean = if pinc_count > 0 {
        pinc_sum / pinc_count as f64
    } else {
        0.0
    };
    let copy = copy_rate(sources, hypotheses)?;
    let perplexity = scores.map(|s| {
        let pairs: Vec<(f64, usize)> = s.iter().map(|l| (l.nll, l.token_count)).collect();
        crate::decode::corpus_perplexity(&pairs)
    });
    let references_total: usize = references.iter().map(Vec::len).sum();
    Ok(EvalReport {
        bleu: bleu_score,
        pinc: pinc_mean,
        copy_rate: copy,
        perplexity,
        sentences: hypotheses.len(),
        references_total,
        references_mean: references_total as f64 / hypotheses.len() as f64,
    })
}

/// File-level wrapper naming the offending paths in errors.
pub fn report_from_files(
    scores_path: Option<&Path>,
    hyp_path: &Path,
    src_path: &Path,
    ref_paths: &[&Path],
    report_path: &Path,
    json_path: Option<&Path>,
) -> Result<EvalReport> {
    let read_lines = |p: &Path| -> Result<Vec<String>> {
        Ok(fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .map(str::to_string)
            .collect())
    };
    let hyps = read_lines(hyp_path)?;
    let sources = read_lines(src_path)?;
    let mut references: Vec<Vec<String>> = vec![Vec::new(); hyps.len()];
    for rp in ref_paths {
        let lines = read_lines(rp)?;
        if lines.len() != hyps.len() {
            return Err(Error::Domain(format!(
                "line count mismatch between {} and {}",
                hyp_path.display(),
                rp.display()
            )));
        }
        for (slot, line) in references.iter_mut().zip(lines) {
            slot.push(line);
        }
    }
    let scores = match scores_path {
        Some(p) => Some(read_scores(p)?),
        None => None,
    };
    let report = make_report(scores.as_deref(), &hyps, &sources, &references)?;
    fs::write(report_path, report.to_tsv()).map_err(|e| Error::io(report_path, e))?;
    if let Some(jp) = json_path {
        fs::write(jp, report.to_json()).map_err(|e| Error::io(jp, e))?;
    }
    Ok(report)
}
