//! A small pre-norm decoder transformer over a synthetic interface screenshot.
//!
//! The input sequence is `[soft prompt | visual patches | profile | instruction | answer cue]`.
//! The model emits one answer token per interface slot; the answer logits
//! combine a static read-out with a pointer term, the log of the attention
//! mass the answer position puts on each slot's patches in the last layer
//! plus the mean mass over slots.
//! The click prediction therefore points at slots through attention.
//!
//! Visual tokens attend only to the soft prompt and to themselves, so each
//! patch is encoded independently of the other patches but conditioned on the
//! prompt. All later tokens see the full prefix under the causal mask.

mod forward;
mod sequence;
mod warmup;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::numerics::{NumericsError, Tape, Tensor, Var};

pub use forward::{predict_slot, target_scalar, AttentionRecord, ForwardOptions, ForwardResult, SlotPrediction, TapeForward};
pub use sequence::{build_sequence, Segment, TokenSequence};
pub use warmup::{warm_up, WarmupConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds model capacity {max}")]
    Capacity { len: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    /// One answer token per interface slot.
    pub num_answer_tokens: usize,
    /// Instruction, answer-cue and profile marker symbols.
    pub num_symbols: usize,
    pub feature_dim: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub max_soft_tokens: usize,
    pub profile_tokens: usize,
    pub instruction_tokens: usize,
    /// Learned patch-position embeddings and slot-specific answer read-out.
    /// Turning this off gives a model that cannot tell slots apart by position.
    pub positional_encoding: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            embed_dim: 32,
            mlp_dim: 64,
            num_answer_tokens: 15,
            num_symbols: 32,
            feature_dim: 8,
            patch_rows: 6,
            patch_cols: 10,
            max_soft_tokens: 32,
            profile_tokens: 2,
            instruction_tokens: 3,
            positional_encoding: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn vocab_size(&self) -> usize {
        self.num_answer_tokens + self.num_symbols
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn num_patches(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn max_sequence_len(&self) -> usize {
        self.max_soft_tokens + self.num_patches() + self.profile_tokens + self.instruction_tokens + 1
    }

    /// Vocabulary id of the answer cue that closes every sequence.
    pub fn answer_cue_token(&self) -> usize {
        self.num_answer_tokens + self.instruction_tokens
    }

    pub fn profile_token(&self, k: usize) -> usize {
        self.num_answer_tokens + self.instruction_tokens + 1 + k
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.num_layers == 0 || self.num_heads == 0 || self.embed_dim == 0 || self.mlp_dim == 0 {
            return fail("layer, head, embedding and MLP sizes must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_answer_tokens == 0 || self.feature_dim == 0 || self.num_patches() == 0 {
            return fail("answer tokens, feature dimension and patch grid must be nonempty".into());
        }
        let needed = self.instruction_tokens + 1 + self.profile_tokens;
        if self.num_symbols < needed {
            return fail(format!("need at least {needed} symbols, have {}", self.num_symbols));
        }
        Ok(())
    }
}

/// Names and shapes of all parameter tensors in storage order.
fn parameter_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v, f) = (c.embed_dim, c.vocab_size(), c.feature_dim);
    let mut out = vec![
        ("token_embedding".to_string(), vec![v, d]),
        ("item_projection".into(), vec![f, d]),
        ("background".into(), vec![1, d]),
        ("patch_row".into(), vec![c.patch_rows, d]),
        ("patch_col".into(), vec![c.patch_cols, d]),
        ("profile_projection".into(), vec![f, c.profile_tokens.max(1) * d]),
        ("null_token".into(), vec![1, d]),
    ];
    for l in 0..c.num_layers {
        for (name, shape) in [
            ("norm1_gain", vec![d]),
            ("norm1_bias", vec![d]),
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("norm2_gain", vec![d]),
            ("norm2_bias", vec![d]),
            ("w1", vec![d, c.mlp_dim]),
            ("b1", vec![c.mlp_dim]),
            ("w2", vec![c.mlp_dim, d]),
            ("b2", vec![d]),
        ] {
            out.push((format!("layer{l}.{name}"), shape));
        }
    }
    out.push(("final_gain".into(), vec![d]));
    out.push(("final_bias".into(), vec![d]));
    out.push(("output".into(), vec![d, v]));
    out
}

pub(crate) const GLOBAL_PARAMS: usize = 7;
pub(crate) const LAYER_PARAMS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// A micro vision-language model: configuration plus parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroVlm {
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

impl MicroVlm {
    /// Randomly initialised model; deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let depth_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let params = parameter_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let base = name.rsplit('.').next().unwrap_or(&name);
                let tensor = match base {
                    "norm1_gain" | "norm2_gain" | "final_gain" => Tensor::full(&shape, 1.0),
                    "norm1_bias" | "norm2_bias" | "final_bias" | "b1" | "b2" => Tensor::zeros(&shape),
                    _ => {
                        let std = match base {
                            "token_embedding" | "background" | "patch_row" | "patch_col" | "null_token" => 0.5,
                            "wo" | "w2" => depth_scale / (shape[0] as f64).sqrt(),
                            _ => 1.0 / (shape[0] as f64).sqrt(),
                        };
                        let n: usize = shape.iter().product();
                        let data = (0..n)
                            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                            .collect();
                        Tensor::new(shape, data).expect("shape matches data")
                    }
                };
                NamedTensor { name, tensor }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub(crate) fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    pub fn null_token(&self) -> &Tensor {
        &self.params[6].tensor
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        tape.leaf(p.tensor.clone())
                    } else {
                        tape.constant(p.tensor.clone())
                    }
                })
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        };
        let text = serde_json::to_string(&ck).expect("checkpoint serialises");
        fs::write(path, text).map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let err = |message: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported format version {}", ck.format_version)));
        }
        ck.config.validate()?;
        let expected = parameter_layout(&ck.config);
        if expected.len() != ck.params.len() {
            return Err(err(format!("expected {} tensors, found {}", expected.len(), ck.params.len())));
        }
        for ((name, shape), p) in expected.iter().zip(&ck.params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(err(format!("tensor {} does not match {name} {shape:?}", p.name)));
            }
            if !p.tensor.is_finite() {
                return Err(err(format!("tensor {} has non-finite entries", p.name)));
            }
        }
        Ok(Self {
            config: ck.config,
            params: ck.params,
        })
    }
}

/// Parameter handles on one tape, in storage order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    fn global(&self, k: usize) -> Var {
        self.0[k]
    }

    fn layer(&self, l: usize, k: usize) -> Var {
        self.0[GLOBAL_PARAMS + l * LAYER_PARAMS + k]
    }

    fn tail(&self, k: usize) -> Var {
        self.0[self.0.len() - 3 + k]
    }
}
