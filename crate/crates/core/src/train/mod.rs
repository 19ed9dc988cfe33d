//! Adam optimization with mean cross-entropy, token-budget batching,
//! exponential parameter smoothing, periodic validation with corpus BLEU,
//! patience-based early stopping, and checkpointing.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use crate::autodiff::{Real, Tensor};
use crate::bpe::Vocabulary;
use crate::corpus::TrainingExample;
use crate::decode::{default_max_len, greedy, ModelScorer};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{batch_loss_and_gradients, ModelConfig, ParameterSet, TrainNoise};
use crate::rng::SplitMix64;

pub use checkpoint::{Checkpoint, TrainMeta};

// ---- Adam ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S: Real> {
    pub cfg: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
}

impl<S: Real> AdamState<S> {
    pub fn new(cfg: AdamConfig, params: &ParameterSet<S>) -> Self {
        let zeros: BTreeMap<String, Tensor<S>> = params
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
            .collect();
        AdamState {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor<S>>, &BTreeMap<String, Tensor<S>>) {
        (&self.m, &self.v)
    }

    pub fn restore(
        &mut self,
        t: u64,
        m: BTreeMap<String, Tensor<S>>,
        v: BTreeMap<String, Tensor<S>>,
    ) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// One Adam update with bias correction. Refuses the step if any gradient
/// entry is non-finite.
pub fn adam_step<S: Real>(
    params: &mut ParameterSet<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut AdamState<S>,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.t += 1;
    let t = state.t;
    let AdamConfig {
        alpha,
        beta1,
        beta2,
        eps,
    } = state.cfg;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);

    for (name, g) in grads {
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Domain(format!("no moment slot for `{name}`")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::Domain(format!("no moment slot for `{name}`")))?;
        let theta = params.get_mut(name);
        for ((p, mm), (vv, gg)) in theta
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut().iter_mut().zip(g.data()))
        {
            let g = gg.as_f64();
            let m_new = beta1 * mm.as_f64() + (1.0 - beta1) * g;
            let v_new = beta2 * vv.as_f64() + (1.0 - beta2) * g * g;
            *mm = S::from_f64(m_new);
            *vv = S::from_f64(v_new);
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            *p = S::from_f64(p.as_f64() - alpha * m_hat / (v_hat.sqrt() + eps));
        }
    }
    Ok(())
}

/// Scales all gradients so that their joint L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<S: Real>(
    grads: &mut BTreeMap<String, Tensor<S>>,
    max_norm: f64,
) -> Result<f64> {
    let sq: f64 = grads.values().map(Tensor::sq_norm).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient("global norm".into()));
    }
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = *x * scale;
            }
        }
    }
    Ok(norm)
}

// ---- batching -------------------------------------------------------------------

/// Shuffles by seed, sorts within fixed-size buckets by target length,
/// then greedily fills batches under the padded-size constraint
/// `max_target_len_in_batch * batch_size <= token_budget`. Returns index
/// batches; every example lands in exactly one batch.
pub fn make_batches(
    examples: &[TrainingExample],
    token_budget: usize,
    seed: u64,
    bucket_size: usize,
) -> Vec<Vec<usize>> {
    assert!(token_budget >= 1, "token budget must be at least 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = SplitMix64::stream(seed, 0xBA7C);
    rng.shuffle(&mut order);
    let bucket = bucket_size.max(1);
    for chunk in order.chunks_mut(bucket) {
        chunk.sort_by_key(|&i| examples[i].tgt_tokens.len());
    }

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut max_len = 0usize;
    for i in order {
        let len = examples[i].tgt_tokens.len();
        let would = max_len.max(len) * (current.len() + 1);
        if !current.is_empty() && would > token_budget {
            batches.push(std::mem::take(&mut current));
            max_len = 0;
        }
        if current.is_empty() && len > token_budget {
            log::warn!(
                "example with {len} target tokens exceeds the budget {token_budget}; batching it alone"
            );
        }
        max_len = max_len.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

// ---- early stopping ---------------------------------------------------------------

/// Stops after `patience` consecutive validations without strict
/// improvement; ties count as failures.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub best_score: Option<f64>,
    pub consecutive_failures: u32,
    pub patience: u32,
}

impl EarlyStopState {
    pub fn new(patience: u32) -> Self {
        EarlyStopState {
            best_score: None,
            consecutive_failures: 0,
            patience,
        }
    }

    /// Feeds one validation score; true means stop now.
    pub fn update(&mut self, score: f64) -> bool {
        let improved = match self.best_score {
            None => true,
            Some(best) => score > best,
        };
        if improved {
            self.best_score = Some(score);
            self.consecutive_failures = 0;
        } else {
            self.consecutive_failures = (self.consecutive_failures + 1).min(self.patience);
        }
        self.consecutive_failures >= self.patience
    }
}

// ---- parameter smoothing ------------------------------------------------------------

/// Exponentially decayed shadow copy of the live parameters, used for
/// validation and final decoding.
#[derive(Debug, Clone)]
pub struct SmoothedParams<S: Real> {
    pub decay: f64,
    shadow: ParameterSet<S>,
}

impl<S: Real> SmoothedParams<S> {
    pub fn new(params: &ParameterSet<S>, decay: f64) -> Self {
        SmoothedParams {
            decay,
            shadow: params.clone(),
        }
    }

    /// shadow = (1 - decay) * shadow + decay * live
    pub fn update(&mut self, live: &ParameterSet<S>) {
        let d = self.decay;
        for ((_, s), (_, l)) in self.shadow.iter_mut().zip(live.iter()) {
            for (sv, lv) in s.data_mut().iter_mut().zip(l.data()) {
                *sv = S::from_f64((1.0 - d) * sv.as_f64() + d * lv.as_f64());
            }
        }
    }

    pub fn params(&self) -> &ParameterSet<S> {
        &self.shadow
    }

    pub fn replace(&mut self, params: ParameterSet<S>) {
        self.shadow = params;
    }
}

// ---- training loop -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub token_budget: usize,
    pub validation_every: u64,
    pub patience: u32,
    pub smoothing_decay: f64,
    pub clip_norm: f64,
    pub max_steps: Option<u64>,
    pub max_epochs: Option<u64>,
    pub bucket_size: usize,
    pub seed: u64,
    /// Writes `last.ckpt` / `best.ckpt` here and resumes from `last.ckpt`
    /// when present.
    pub checkpoint_dir: Option<PathBuf>,
    /// Line-oriented TSV: step, loss, validation BLEU, failures.
    pub log_path: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            learning_rate: 3e-4,
            token_budget: 2000,
            validation_every: 2500,
            patience: 5,
            smoothing_decay: 1e-4,
            clip_norm: 1.0,
            max_steps: None,
            max_epochs: None,
            bucket_size: 256,
            seed: 42,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

/// Held-out examples with raw reference strings for validation BLEU.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub examples: Vec<TrainingExample>,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationPoint {
    pub step: u64,
    pub loss: f64,
    pub bleu: f64,
    pub failures: u32,
}

pub struct TrainOutcome {
    /// Smoothed parameters at the best validation score (or the final
    /// smoothed parameters when no validation ever ran).
    pub best: ParameterSet<f32>,
    pub best_score: Option<f64>,
    pub steps: u64,
    pub stopped_early: bool,
    pub history: Vec<ValidationPoint>,
}

/// Greedy-decodes the dev sources and scores corpus BLEU against the
/// references (single-reference lists).
pub fn validation_bleu(
    params: &ParameterSet<f32>,
    dev: &DevSet,
    vocab: &Vocabulary,
) -> Result<f64> {
    let mut hyps = Vec::with_capacity(dev.examples.len());
    for ex in &dev.examples {
        let scorer = ModelScorer::new(params, &ex.src_tokens)?;
        let hyp = greedy(&scorer, default_max_len(ex.src_tokens.len()))?;
        hyps.push(crate::bpe::unsegment(&vocab.decode_tokens(&hyp.tokens)));
    }
    let refs: Vec<Vec<String>> = dev.references.iter().map(|r| vec![r.clone()]).collect();
    eval::bleu(&hyps, &refs, eval::DEFAULT_MAX_N)
}

const LAST_CKPT: &str = "last.ckpt";
const BEST_CKPT: &str = "best.ckpt";

pub fn train_loop(
    model_cfg: &ModelConfig,
    train_examples: &[TrainingExample],
    dev: &DevSet,
    vocab: &Vocabulary,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train_examples.is_empty() {
        return Err(Error::Domain("no training examples".into()));
    }
    if dev.examples.len() != dev.references.len() {
        return Err(Error::Domain(
            "dev examples and references differ in length".into(),
        ));
    }

    let mut params = ParameterSet::<f32>::init(model_cfg, opts.seed)?;
    let mut adam = AdamState::new(
        AdamConfig {
            alpha: opts.learning_rate,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut smoothed = SmoothedParams::new(&params, opts.smoothing_decay);
    let mut early = EarlyStopState::new(opts.patience);
    let mut step: u64 = 0;
    let mut epoch: u64 = 0;
    let mut best_params: Option<ParameterSet<f32>> = None;

    // Resume from the last full state if one is present.
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let last = dir.join(LAST_CKPT);
        if last.exists() {
            let meta: TrainMeta = checkpoint::load_meta(&last)?;
            if &meta.model != model_cfg {
                return Err(Error::Config(format!(
                    "checkpoint in {} was trained with a different model configuration",
                    dir.display()
                )));
            }
            let ckpt = Checkpoint::load(&last)?;
            let mut live = BTreeMap::new();
            let mut m = BTreeMap::new();
            let mut v = BTreeMap::new();
            let mut shadow = BTreeMap::new();
            for (name, tensor) in ckpt.tensors {
                if let Some(n) = name.strip_prefix("param.") {
                    live.insert(n.to_string(), tensor);
                } else if let Some(n) = name.strip_prefix("adam.m.") {
                    m.insert(n.to_string(), tensor);
                } else if let Some(n) = name.strip_prefix("adam.v.") {
                    v.insert(n.to_string(), tensor);
                } else if let Some(n) = name.strip_prefix("shadow.") {
                    shadow.insert(n.to_string(), tensor);
                }
            }
            params = ParameterSet::from_tensors(model_cfg, live)?;
            smoothed.replace(ParameterSet::from_tensors(model_cfg, shadow)?);
            adam.restore(meta.step, m, v);
            step = meta.step;
            epoch = meta.epochs_done;
            early.best_score = meta.best_score;
            early.consecutive_failures = meta.failures;
            if dir.join(BEST_CKPT).exists() {
                best_params = Some(checkpoint::load_params(dir.join(BEST_CKPT))?.0);
            }
            log::info!("resumed at step {step} (epoch {epoch})");
        }
    }

    let mut log_file = match &opts.log_path {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let meta = |step: u64, epoch: u64, early: &EarlyStopState| TrainMeta {
        model: model_cfg.clone(),
        step,
        epochs_done: epoch,
        best_score: early.best_score,
        failures: early.consecutive_failures,
        languages: vocab.languages().to_vec(),
    };

    let mut stopped_early = false;
    let mut history = Vec::new();
    let mut recent_loss = 0.0f64;
    let mut recent_count = 0u64;

    'outer: loop {
        if opts.max_epochs.map(|m| epoch >= m).unwrap_or(false) {
            break;
        }
        let batches = make_batches(
            train_examples,
            opts.token_budget,
            opts.seed ^ crate::rng::mix64(epoch),
            opts.bucket_size,
        );
        for batch in batches {
            step += 1;
            let examples: Vec<TrainingExample> =
                batch.iter().map(|&i| train_examples[i].clone()).collect();
            let noise = TrainNoise {
                rng: SplitMix64::stream(opts.seed, step),
            };
            let (loss, mut grads, _) = batch_loss_and_gradients(&params, &examples, Some(noise))?;
            clip_global_norm(&mut grads, opts.clip_norm)?;
            adam_step(&mut params, &grads, &mut adam)?;
            smoothed.update(&params);
            recent_loss += loss;
            recent_count += 1;

            if step % opts.validation_every == 0 {
                let bleu = validation_bleu(smoothed.params(), dev, vocab)?;
                let improved = early.best_score.map(|b| bleu > b).unwrap_or(true);
                let stop = early.update(bleu);
                let mean_loss = recent_loss / recent_count.max(1) as f64;
                recent_loss = 0.0;
                recent_count = 0;
                history.push(ValidationPoint {
                    step,
                    loss: mean_loss,
                    bleu,
                    failures: early.consecutive_failures,
                });
                if let Some(f) = log_file.as_mut() {
                    writeln!(
                        f,
                        "{step}\t{mean_loss}\t{bleu}\t{}",
                        early.consecutive_failures
                    )
                    .map_err(|e| Error::io(opts.log_path.as_ref().expect("set"), e))?;
                }
                log::info!(
                    "step {step}: loss {mean_loss:.4}, dev BLEU {bleu:.2}, failures {}",
                    early.consecutive_failures
                );
                if improved {
                    best_params = Some(smoothed.params().clone());
                    if let Some(dir) = &opts.checkpoint_dir {
                        checkpoint::save_params(
                            smoothed.params(),
                            &meta(step, epoch, &early),
                            dir.join(BEST_CKPT),
                        )?;
                    }
                }
                if let Some(dir) = &opts.checkpoint_dir {
                    save_full_state(&params, &adam, &smoothed, &meta(step, epoch, &early), dir)?;
                }
                if stop {
                    stopped_early = true;
                    break 'outer;
                }
            }
            if opts.max_steps.map(|m| step >= m).unwrap_or(false) {
                break 'outer;
            }
        }
        epoch += 1;
    }

    if let Some(dir) = &opts.checkpoint_dir {
        save_full_state(&params, &adam, &smoothed, &meta(step, epoch, &early), dir)?;
        if best_params.is_none() {
            checkpoint::save_params(
                smoothed.params(),
                &meta(step, epoch, &early),
                dir.join(BEST_CKPT),
            )?;
        }
    }

    Ok(TrainOutcome {
        best: best_params.unwrap_or_else(|| smoothed.params().clone()),
        best_score: early.best_score,
        steps: step,
        stopped_early,
        history,
    })
}

fn save_full_state(
    params: &ParameterSet<f32>,
    adam: &AdamState<f32>,
    smoothed: &SmoothedParams<f32>,
    meta: &TrainMeta,
    dir: &std::path::Path,
) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    for (name, t) in params.iter() {
        ckpt.tensors.insert(format!("param.{name}"), t.clone());
    }
    let (m, v) = adam.moments();
    for (name, t) in m {
        ckpt.tensors.insert(format!("adam.m.{name}"), t.clone());
    }
    for (name, t) in v {
        ckpt.tensors.insert(format!("adam.v.{name}"), t.clone());
    }
    for (name, t) in smoothed.params().iter() {
        ckpt.tensors.insert(format!("shadow.{name}"), t.clone());
    }
    let path = dir.join(LAST_CKPT);
    ckpt.save(&path)?;
    checkpoint::save_meta(meta, &path)
}
