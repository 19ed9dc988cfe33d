//! Attentional encoder-decoder: bidirectional GRU encoder, additive
//! attention, and a two-block conditional-GRU decoder with attention read
//! between the blocks.

mod forward;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub use forward::{
    annotation_projection, attend, batch_loss_and_gradients, build_batch_graph, decode_start,
    decode_step, decode_step_cached, encode, sequence_logprob, BuiltBatch, ModelGraph, TrainNoise,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub emb_dim: usize,
    pub rnn_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rnn_dropout")]
    pub rnn_dropout: f64,
    #[serde(default = "default_word_dropout")]
    pub word_dropout_src: f64,
    #[serde(default = "default_word_dropout")]
    pub word_dropout_tgt: f64,
    #[serde(default = "default_true")]
    pub layer_norm: bool,
    #[serde(default = "default_layers")]
    pub layers: usize,
}

fn default_rnn_dropout() -> f64 {
    0.2
}
fn default_word_dropout() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_layers() -> usize {
    1
}

impl ModelConfig {
    /// Full-scale setting: 512-dimensional embeddings, 1024-dimensional
    /// RNN state, layer normalization on, one layer per side.
    pub fn full_scale(vocab_size: usize) -> Self {
        ModelConfig {
            emb_dim: 512,
            rnn_dim: 1024,
            vocab_size,
            rnn_dropout: 0.2,
            word_dropout_src: 0.1,
            word_dropout_tgt: 0.1,
            layer_norm: true,
            layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.rnn_dim == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        for (name, rate) in [
            ("rnn_dropout", self.rnn_dropout),
            ("word_dropout_src", self.word_dropout_src),
            ("word_dropout_tgt", self.word_dropout_tgt),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} {rate} outside [0,1)")));
            }
        }
        if self.layers != 1 {
            return Err(Error::Config("only single-layer RNNs are supported".into()));
        }
        Ok(())
    }

    /// Attention dimensionality, tied to the RNN state size.
    pub fn att_dim(&self) -> usize {
        self.rnn_dim
    }

    /// Names, shapes and init kinds of every parameter, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (e, r, v, a) = (self.emb_dim, self.rnn_dim, self.vocab_size, self.att_dim());
        let mut specs = vec![
            ParamSpec::weight("emb.src", v, e),
            ParamSpec::weight("emb.tgt", v, e),
        ];
        for (cell, input_dim) in [
            ("enc.fwd", e),
            ("enc.bwd", e),
            ("dec.b1", e),
            ("dec.b2", 2 * r),
        ] {
            for gate in ["z", "r", "h"] {
                specs.push(ParamSpec::weight(&format!("{cell}.w_{gate}"), input_dim, r));
                specs.push(ParamSpec::weight(&format!("{cell}.u_{gate}"), r, r));
                specs.push(ParamSpec::bias(&format!("{cell}.b_{gate}"), r));
                if self.layer_norm {
                    specs.push(ParamSpec::ln_gain(&format!("{cell}.ln_{gate}.g"), r));
                    specs.push(ParamSpec::ln_bias(&format!("{cell}.ln_{gate}.b"), r));
                }
            }
        }
        specs.push(ParamSpec::weight("att.w", 2 * r, a));
        specs.push(ParamSpec::weight("att.u", r, a));
        specs.push(ParamSpec::weight("att.v", a, 1));
        specs.push(ParamSpec::weight("dec.init.w", 2 * r, r));
        specs.push(ParamSpec::bias("dec.init.b", r));
        specs.push(ParamSpec::weight("out.ro_emb", e, e));
        specs.push(ParamSpec::weight("out.ro_state", r, e));
        specs.push(ParamSpec::weight("out.ro_ctx", 2 * r, e));
        specs.push(ParamSpec::bias("out.ro_b", e));
        specs.push(ParamSpec::weight("out.w", e, v));
        specs.push(ParamSpec::bias("out.b", v));
        specs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    LnGain,
    LnBias,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
    pub kind: ParamKind,
}

impl ParamSpec {
    fn weight(name: &str, fan_in: usize, fan_out: usize) -> Self {
        ParamSpec {
            name: name.to_string(),
            shape: [fan_in, fan_out],
            kind: ParamKind::Weight,
        }
    }
    fn bias(name: &str, dim: usize) -> Self {
        ParamSpec {
            name: name.to_string(),
            shape: [1, dim],
            kind: ParamKind::Bias,
        }
    }
    fn ln_gain(name: &str, dim: usize) -> Self {
        ParamSpec {
            name: name.to_string(),
            shape: [1, dim],
            kind: ParamKind::LnGain,
        }
    }
    fn ln_bias(name: &str, dim: usize) -> Self {
        ParamSpec {
            name: name.to_string(),
            shape: [1, dim],
            kind: ParamKind::LnBias,
        }
    }

    /// Glorot-uniform bound for weight matrices.
    pub fn glorot_bound(&self) -> f64 {
        (6.0 / (self.shape[0] + self.shape[1]) as f64).sqrt()
    }
}

/// All learned weights of one model, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<S: Real> {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Real> ParameterSet<S> {
    /// Glorot-uniform matrices, zero biases, unit layer-norm gains;
    /// bitwise deterministic per seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::stream(seed, 0x1217);
        let mut tensors = BTreeMap::new();
        for spec in config.param_specs() {
            let n = spec.shape[0] * spec.shape[1];
            let data: Vec<S> = match spec.kind {
                ParamKind::Weight => {
                    let bound = spec.glorot_bound();
                    (0..n)
                        .map(|_| S::from_f64(rng.uniform(-bound, bound)))
                        .collect()
                }
                ParamKind::Bias | ParamKind::LnBias => vec![S::zero(); n],
                ParamKind::LnGain => vec![S::one(); n],
            };
            tensors.insert(spec.name.clone(), Tensor::from_vec(&spec.shape, data)?);
        }
        Ok(ParameterSet {
            config: config.clone(),
            tensors,
        })
    }

    /// All-zero parameters (degenerate but well-defined; useful as the
    /// uniform-distribution reference point).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for spec in config.param_specs() {
            tensors.insert(spec.name.clone(), Tensor::zeros(&spec.shape));
        }
        Ok(ParameterSet {
            config: config.clone(),
            tensors,
        })
    }

    /// Rebuilds a parameter set from named tensors, verifying the shape
    /// inventory matches the configuration exactly.
    pub fn from_tensors(config: &ModelConfig, tensors: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for spec in &specs {
            let t = tensors
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", spec.name)))?;
            if t.shape() != spec.shape {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(ParameterSet {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.tensors.iter_mut()
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor<S>> {
        self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<T: Real>(&self) -> ParameterSet<T> {
        ParameterSet {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}
