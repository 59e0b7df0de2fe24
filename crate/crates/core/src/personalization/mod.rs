//! Factorised soft prompts: a shared basis of `M` prompt blocks and one
//! logit vector per user. A user's prompt is the softmax-weighted mixture of
//! the basis blocks, so every user prompt lies in their convex hull.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{softmax_rows, NumericsError, Tape, Tensor, Var};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum PersonalizationError {
    #[error("invalid prompt configuration: {0}")]
    Config(String),
    #[error("user {0} is not registered")]
    UnknownUser(String),
    #[error("user {0} is already registered")]
    DuplicateUser(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `M` prompt blocks of `N_soft` tokens each, stored as `[M, N_soft, d]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBasis {
    pub blocks: Tensor,
}

impl PromptBasis {
    /// Entries i.i.d. `N(0, 0.02²)`, deterministic per seed.
    pub fn init(num_prompts: usize, num_tokens: usize, dim: usize, seed: u64) -> Result<Self, PersonalizationError> {
        if num_prompts == 0 || num_tokens == 0 || dim == 0 {
            return Err(PersonalizationError::Config(format!(
                "basis sizes must be positive, got M={num_prompts}, N_soft={num_tokens}, d={dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let data = (0..num_prompts * num_tokens * dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            blocks: Tensor::new(vec![num_prompts, num_tokens, dim], data)?,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.blocks.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.blocks.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.blocks.shape()[2]
    }

    /// Basis block `m` as `[N_soft, d]`.
    pub fn block(&self, m: usize) -> Tensor {
        let k = self.num_tokens() * self.dim();
        Tensor::new(vec![self.num_tokens(), self.dim()], self.blocks.data()[m * k..(m + 1) * k].to_vec())
            .expect("block shape")
    }

    /// The basis as one `[M, N_soft·d]` matrix.
    pub fn flat(&self) -> Tensor {
        self.blocks
            .clone()
            .reshape(&[self.num_prompts(), self.num_tokens() * self.dim()])
            .expect("same size")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonalPrompt {
    /// `[N_soft, d]`.
    pub prompt: Tensor,
    pub alpha: Vec<f64>,
}

/// `softmax(z)`.
pub fn mixing_coefficients(z: &[f64]) -> Result<Vec<f64>, PersonalizationError> {
    Ok(softmax_rows(&Tensor::vector(z.to_vec()), 1.0)?.into_data())
}

/// `Σ_m α_m B_m`.
pub fn compose_prompt(basis: &PromptBasis, alpha: &[f64]) -> Result<PersonalPrompt, PersonalizationError> {
    if alpha.len() != basis.num_prompts() {
        return Err(PersonalizationError::Config(format!(
            "{} mixing weights for a basis of {}",
            alpha.len(),
            basis.num_prompts()
        )));
    }
    let mut tape = Tape::new();
    let b = tape.constant(basis.flat());
    let a = tape.constant(Tensor::new(vec![1, alpha.len()], alpha.to_vec())?);
    let p = mix(&mut tape, b, a, basis.num_tokens(), basis.dim())?;
    Ok(PersonalPrompt {
        prompt: tape.value(p).clone(),
        alpha: alpha.to_vec(),
    })
}

fn mix(tape: &mut Tape, basis: Var, alpha: Var, tokens: usize, dim: usize) -> Result<Var, PersonalizationError> {
    let p = tape.matmul(alpha, basis)?;
    Ok(tape.reshape(p, &[tokens, dim])?)
}

/// Records `P_u` on a tape from a `[M, N_soft·d]` basis and `[1, M]` logits.
/// Returns `(prompt [N_soft, d], alpha [1, M])`.
pub fn compose_on_tape(
    tape: &mut Tape,
    basis: Var,
    logits: Var,
    tokens: usize,
    dim: usize,
) -> Result<(Var, Var), PersonalizationError> {
    let alpha = tape.softmax_rows(logits, 1.0)?;
    let p = mix(tape, basis, alpha, tokens, dim)?;
    Ok((p, alpha))
}

/// Trainable prompt state: the shared basis and every user's logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub basis: PromptBasis,
    pub logits: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format_version: u32,
    basis: PromptBasis,
    logits: BTreeMap<String, Vec<f64>>,
}

impl PromptState {
    pub fn new(basis: PromptBasis) -> Self {
        Self {
            basis,
            logits: BTreeMap::new(),
        }
    }

    /// Adds a user with zero logits, i.e. a uniform mixture.
    pub fn register_user(&mut self, user: &str) -> Result<(), PersonalizationError> {
        if self.logits.contains_key(user) {
            return Err(PersonalizationError::DuplicateUser(user.into()));
        }
        self.logits.insert(user.into(), vec![0.0; self.basis.num_prompts()]);
        Ok(())
    }

    pub fn user_logits(&self, user: &str) -> Result<&[f64], PersonalizationError> {
        self.logits
            .get(user)
            .map(Vec::as_slice)
            .ok_or_else(|| PersonalizationError::UnknownUser(user.into()))
    }

    pub fn alpha(&self, user: &str) -> Result<Vec<f64>, PersonalizationError> {
        mixing_coefficients(self.user_logits(user)?)
    }

    pub fn prompt_for(&self, user: &str) -> Result<PersonalPrompt, PersonalizationError> {
        compose_prompt(&self.basis, &self.alpha(user)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PersonalizationError> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            basis: self.basis.clone(),
            logits: self.logits.clone(),
        };
        fs::write(path, serde_json::to_string(&ck).expect("checkpoint serialises")).map_err(|e| {
            PersonalizationError::Checkpoint {
                path: path.display().to_string(),
                message: e.to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, PersonalizationError> {
        let err = |message: String| PersonalizationError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported format version {}", ck.format_version)));
        }
        if ck.basis.blocks.rank() != 3 || !ck.basis.blocks.is_finite() {
            return Err(err("basis must be a finite [M, N_soft, d] tensor".into()));
        }
        let m = ck.basis.num_prompts();
        if let Some((u, z)) = ck.logits.iter().find(|(_, z)| z.len() != m || z.iter().any(|v| !v.is_finite())) {
            return Err(err(format!("user {u} has {} logits, expected {m} finite values", z.len())));
        }
        Ok(Self {
            basis: ck.basis,
            logits: ck.logits,
        })
    }
}
