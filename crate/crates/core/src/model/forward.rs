//! Forward computation, built on the autodiff tape.
//!
//! Every code path (training loss, teacher-forced scoring, stepwise
//! decoding) goes through the same graph-building functions here, so
//! scores agree with training losses by construction. GRU convention:
//! `z = sigma(Wz x + Uz h + bz)`, `r = sigma(Wr x + Ur h + br)`,
//! `hb = tanh(W x + U (r*h) + b)`, `h' = (1-z)*h + z*hb`, with layer
//! normalization (when enabled) applied to each gate's pre-activation.
//! Dropout during training: inverted dropout on source embeddings, on
//! each target input embedding, and on the attention context; word
//! dropout replaces non-special input ids with the unknown id.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::bpe::{BOS_ID, UNK_ID};
use crate::corpus::TrainingExample;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::ParameterSet;

/// Training-time noise: one generator drives word dropout and all
/// dropout masks, so a batch is reproducible from its seed.
#[derive(Debug, Clone)]
pub struct TrainNoise {
    pub rng: SplitMix64,
}

pub struct ModelGraph<'a, S: Real> {
    pub tape: Tape<S>,
    params: &'a ParameterSet<S>,
    bound: HashMap<String, Var>,
    noise: Option<TrainNoise>,
}

impl<'a, S: Real> ModelGraph<'a, S> {
    pub fn new(params: &'a ParameterSet<S>, noise: Option<TrainNoise>) -> Self {
        ModelGraph {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            noise,
        }
    }

    pub fn is_training(&self) -> bool {
        self.noise.is_some()
    }

    /// Tape handle of a named parameter, registering it on first use.
    fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.tape.leaf(self.params.get(name).clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Registered parameters in name order.
    pub fn bound_params(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self
            .bound
            .iter()
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn word_dropout(&mut self, ids: &[u32], rate: f64, skip_first: bool) -> Vec<u32> {
        match (&mut self.noise, rate > 0.0) {
            (Some(noise), true) => ids
                .iter()
                .enumerate()
                .map(|(i, &id)| {
                    let special = id < 4 || (skip_first && i == 0);
                    if !special && noise.rng.next_f64() < rate {
                        UNK_ID
                    } else {
                        id
                    }
                })
                .collect(),
            _ => ids.to_vec(),
        }
    }

    fn feature_dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.params.config().rnn_dropout;
        match &mut self.noise {
            Some(noise) if rate > 0.0 => {
                let mut rng = noise.rng.clone();
                let out = self.tape.dropout(x, rate, &mut rng)?;
                if let Some(noise) = &mut self.noise {
                    noise.rng = rng;
                }
                Ok(out)
            }
            _ => Ok(x),
        }
    }

    /// One GRU step; `cell` selects the parameter group.
    fn gru_cell(&mut self, cell: &str, x: Var, h: Var) -> Result<Var> {
        let z = self.gate(cell, "z", x, h)?;
        let z = self.tape.sigmoid(z)?;
        let r = self.gate(cell, "r", x, h)?;
        let r = self.tape.sigmoid(r)?;
        let rh = self.tape.mul(r, h)?;
        let pre = self.gate(cell, "h", x, rh)?;
        let candidate = self.tape.tanh(pre)?;
        let keep = self.tape.one_minus(z)?;
        let kept = self.tape.mul(keep, h)?;
        let new = self.tape.mul(z, candidate)?;
        self.tape.add(kept, new)
    }

    /// Gate pre-activation `x W + h U + b`, layer-normalized if enabled.
    fn gate(&mut self, cell: &str, gate: &str, x: Var, h: Var) -> Result<Var> {
        let w = self.p(&format!("{cell}.w_{gate}"));
        let u = self.p(&format!("{cell}.u_{gate}"));
        let b = self.p(&format!("{cell}.b_{gate}"));
        let xw = self.tape.matmul(x, w)?;
        let hu = self.tape.matmul(h, u)?;
        let sum = self.tape.add(xw, hu)?;
        let pre = self.tape.add(sum, b)?;
        if self.params.config().layer_norm {
            let g = self.p(&format!("{cell}.ln_{gate}.g"));
            let beta = self.p(&format!("{cell}.ln_{gate}.b"));
            self.tape.layer_norm(pre, g, beta)
        } else {
            Ok(pre)
        }
    }

    /// Bidirectional encoding of a source id sequence (flag included) into
    /// a `T x 2*rnn_dim` annotation matrix.
    pub fn encode(&mut self, src_ids: &[u32]) -> Result<Var> {
        if src_ids.is_empty() {
            return Err(Error::Domain("cannot encode an empty sequence".into()));
        }
        let rate = self.params.config().word_dropout_src;
        let ids = self.word_dropout(src_ids, rate, true);
        let table = self.p("emb.src");
        let emb = self.tape.embedding(table, &ids)?;
        let emb = self.feature_dropout(emb)?;

        let t_len = ids.len();
        let r = self.params.config().rnn_dim;
        let mut fwd = Vec::with_capacity(t_len);
        let mut h = self.tape.leaf(Tensor::zeros(&[1, r]));
        for t in 0..t_len {
            let x = self.tape.slice_rows(emb, t, t + 1)?;
            h = self.gru_cell("enc.fwd", x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![Var(0); t_len];
        let mut h = self.tape.leaf(Tensor::zeros(&[1, r]));
        for t in (0..t_len).rev() {
            let x = self.tape.slice_rows(emb, t, t + 1)?;
            h = self.gru_cell("enc.bwd", x, h)?;
            bwd[t] = h;
        }
        let rows: Vec<Var> = (0..t_len)
            .map(|t| self.tape.concat_cols(fwd[t], bwd[t]))
            .collect::<Result<_>>()?;
        self.tape.concat_rows(rows)
    }

    /// Initial decoder state from the mean annotation.
    pub fn init_state(&mut self, annotations: Var) -> Result<Var> {
        let mean = self.tape.mean_rows(annotations)?;
        let w = self.p("dec.init.w");
        let b = self.p("dec.init.b");
        let lin = self.tape.matmul(mean, w)?;
        let lin = self.tape.add(lin, b)?;
        self.tape.tanh(lin)
    }

    /// Projection of the annotation matrix into attention space; computed
    /// once per sequence and reused by every step.
    pub fn annotation_proj(&mut self, annotations: Var) -> Result<Var> {
        let wa = self.p("att.w");
        self.tape.matmul(annotations, wa)
    }

    /// Additive attention over a precomputed annotation projection:
    /// returns (context row, weight row).
    pub fn attend(&mut self, state: Var, annotations: Var, ann_proj: Var) -> Result<(Var, Var)> {
        let ua = self.p("att.u");
        let va = self.p("att.v");
        let sp = self.tape.matmul(state, ua)?;
        let summed = self.tape.add(ann_proj, sp)?;
        let scores = self.tape.tanh(summed)?;
        let e = self.tape.matmul(scores, va)?;
        let e_row = self.tape.transpose(e)?;
        let weights = self.tape.softmax(e_row)?;
        let context = self.tape.matmul(weights, annotations)?;
        Ok((context, weights))
    }

    /// One conditional-GRU decoder step; returns the next state and the
    /// raw output logits (`1 x vocab`).
    pub fn decode_step(
        &mut self,
        prev_state: Var,
        prev_id: u32,
        annotations: Var,
        ann_proj: Var,
    ) -> Result<(Var, Var)> {
        let rate = self.params.config().word_dropout_tgt;
        let id = self.word_dropout(&[prev_id], rate, false)[0];
        let table = self.p("emb.tgt");
        let emb = self.tape.embedding(table, &[id])?;
        let emb = self.feature_dropout(emb)?;

        let s1 = self.gru_cell("dec.b1", emb, prev_state)?;
        let (context, _) = self.attend(s1, annotations, ann_proj)?;
        let context = self.feature_dropout(context)?;
        let next_state = self.gru_cell("dec.b2", context, s1)?;

        let ro_emb = self.p("out.ro_emb");
        let ro_state = self.p("out.ro_state");
        let ro_ctx = self.p("out.ro_ctx");
        let ro_b = self.p("out.ro_b");
        let a = self.tape.matmul(emb, ro_emb)?;
        let b = self.tape.matmul(next_state, ro_state)?;
        let c = self.tape.matmul(context, ro_ctx)?;
        let ab = self.tape.add(a, b)?;
        let abc = self.tape.add(ab, c)?;
        let pre = self.tape.add(abc, ro_b)?;
        let readout = self.tape.tanh(pre)?;

        let w_out = self.p("out.w");
        let b_out = self.p("out.b");
        let logits = self.tape.matmul(readout, w_out)?;
        let logits = self.tape.add(logits, b_out)?;
        Ok((next_state, logits))
    }

    /// Teacher-forced per-token negative log-likelihood column
    /// (`len(tgt) x 1`, end-of-sentence included).
    pub fn sequence_nll(&mut self, example: &TrainingExample) -> Result<Var> {
        if example.tgt_tokens.is_empty() {
            return Err(Error::Domain("empty target sequence".into()));
        }
        let annotations = self.encode(&example.src_tokens)?;
        let ann_proj = self.annotation_proj(annotations)?;
        let mut state = self.init_state(annotations)?;
        let mut inputs = vec![BOS_ID];
        inputs.extend(&example.tgt_tokens[..example.tgt_tokens.len() - 1]);
        let mut logit_rows = Vec::with_capacity(inputs.len());
        for &prev in &inputs {
            let (next_state, logits) = self.decode_step(state, prev, annotations, ann_proj)?;
            state = next_state;
            logit_rows.push(logits);
        }
        let logits = self.tape.concat_rows(logit_rows)?;
        self.tape.cross_entropy(logits, &example.tgt_tokens)
    }

    /// Mean cross-entropy over all target tokens of a batch.
    pub fn batch_loss(&mut self, examples: &[TrainingExample]) -> Result<(Var, usize)> {
        if examples.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let mut nlls = Vec::with_capacity(examples.len());
        let mut tokens = 0;
        for ex in examples {
            nlls.push(self.sequence_nll(ex)?);
            tokens += ex.tgt_tokens.len();
        }
        let all = self.tape.concat_rows(nlls)?;
        let total = self.tape.sum_all(all)?;
        let loss = self.tape.scale(total, 1.0 / tokens as f64)?;
        Ok((loss, tokens))
    }
}

/// A batch graph ready for backward passes and gradient checks.
pub struct BuiltBatch<'a, S: Real> {
    pub graph: ModelGraph<'a, S>,
    pub loss: Var,
    pub token_count: usize,
}

pub fn build_batch_graph<'a, S: Real>(
    params: &'a ParameterSet<S>,
    examples: &[TrainingExample],
    noise: Option<TrainNoise>,
) -> Result<BuiltBatch<'a, S>> {
    let mut graph = ModelGraph::new(params, noise);
    let (loss, token_count) = graph.batch_loss(examples)?;
    Ok(BuiltBatch {
        graph,
        loss,
        token_count,
    })
}

/// Forward-backward over one batch: returns (loss, gradients by name,
/// token count). Parameters never touched by the batch get zero
/// gradients.
pub fn batch_loss_and_gradients<S: Real>(
    params: &ParameterSet<S>,
    examples: &[TrainingExample],
    noise: Option<TrainNoise>,
) -> Result<(f64, BTreeMap<String, Tensor<S>>, usize)> {
    let mut built = build_batch_graph(params, examples, noise)?;
    built.graph.tape.backward(built.loss)?;
    let mut grads: BTreeMap<String, Tensor<S>> = params
        .iter()
        .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
        .collect();
    for (name, var) in built.graph.bound_params() {
        if let Some(g) = built.graph.tape.grad(var) {
            grads.insert(name, g.clone());
        }
    }
    let loss = built.graph.tape.value(built.loss).item().as_f64();
    Ok((loss, grads, built.token_count))
}

// ---- tensor-level inference entry points ------------------------------------

/// Annotation matrix for a source sequence (evaluation mode).
pub fn encode<S: Real>(params: &ParameterSet<S>, src_ids: &[u32]) -> Result<Tensor<S>> {
    let mut graph = ModelGraph::new(params, None);
    let ann = graph.encode(src_ids)?;
    Ok(graph.tape.value(ann).clone())
}

/// Initial decoder state for a fixed annotation matrix.
pub fn decode_start<S: Real>(params: &ParameterSet<S>, annotations: &Tensor<S>) -> Result<Tensor<S>> {
    let mut graph = ModelGraph::new(params, None);
    let ann = graph.tape.leaf(annotations.clone());
    let s0 = graph.init_state(ann)?;
    Ok(graph.tape.value(s0).clone())
}

/// Attention read for a frozen state (evaluation mode): context vector
/// and the weight distribution over source positions.
pub fn attend<S: Real>(
    params: &ParameterSet<S>,
    state: &Tensor<S>,
    annotations: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut graph = ModelGraph::new(params, None);
    let s = graph.tape.leaf(state.clone());
    let ann = graph.tape.leaf(annotations.clone());
    let proj = graph.annotation_proj(ann)?;
    let (ctx, weights) = graph.attend(s, ann, proj)?;
    Ok((
        graph.tape.value(ctx).clone(),
        graph.tape.value(weights).clone(),
    ))
}

/// Attention-space projection of a frozen annotation matrix, reusable
/// across decoding steps of one sentence.
pub fn annotation_projection<S: Real>(
    params: &ParameterSet<S>,
    annotations: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut graph = ModelGraph::new(params, None);
    let ann = graph.tape.leaf(annotations.clone());
    let proj = graph.annotation_proj(ann)?;
    Ok(graph.tape.value(proj).clone())
}

/// One decoding step on frozen tensors: next state and the log-probability
/// row over the vocabulary.
pub fn decode_step<S: Real>(
    params: &ParameterSet<S>,
    prev_state: &Tensor<S>,
    prev_id: u32,
    annotations: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let proj = annotation_projection(params, annotations)?;
    decode_step_cached(params, prev_state, prev_id, annotations, &proj)
}

/// Like [`decode_step`] but with the annotation projection precomputed.
pub fn decode_step_cached<S: Real>(
    params: &ParameterSet<S>,
    prev_state: &Tensor<S>,
    prev_id: u32,
    annotations: &Tensor<S>,
    ann_proj: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut graph = ModelGraph::new(params, None);
    let s = graph.tape.leaf(prev_state.clone());
    let ann = graph.tape.leaf(annotations.clone());
    let proj = graph.tape.leaf(ann_proj.clone());
    let (next, logits) = graph.decode_step(s, prev_id, ann, proj)?;
    let logits_t = graph.tape.value(logits);
    Ok((
        graph.tape.value(next).clone(),
        log_softmax_row(logits_t),
    ))
}

/// Teacher-forced per-token log-probabilities (evaluation mode); entry i
/// is `log p(tgt_i | tgt_<i, src)` and the end-of-sentence token is the
/// last entry.
pub fn sequence_logprob<S: Real>(
    params: &ParameterSet<S>,
    example: &TrainingExample,
) -> Result<Vec<f64>> {
    let mut graph = ModelGraph::new(params, None);
    let nll = graph.sequence_nll(example)?;
    Ok(graph
        .tape
        .value(nll)
        .data()
        .iter()
        .map(|v| -v.as_f64())
        .collect())
}

fn log_softmax_row<S: Real>(logits: &Tensor<S>) -> Tensor<S> {
    let row = logits.row(0);
    let mut max = row[0];
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    let lse = max + sum.ln();
    logits.map(|v| v - lse)
}
