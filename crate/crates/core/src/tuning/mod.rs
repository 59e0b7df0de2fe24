//! Gaze-aligned prompt tuning: the fixation-alignment and click losses, the
//! training loop over prompt parameters, ablation switches and evaluation.

mod eval;
mod experiment;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::microvlm::ModelError;
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::personalization::PersonalizationError;
use crate::probing::ProbeError;

pub use eval::evaluate;
pub use experiment::{initial_state, pretrain_backbone, run_protocol, PretrainConfig, ProtocolRun};
pub use train::{prepare, sample_gradients, train, EpochLog, PreparedSession, SampleGrad, TrainOutcome};

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch} at session {session}")]
    NonFiniteLoss { epoch: usize, session: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Prompt(#[from] PersonalizationError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}")]
    Callback(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Power on the gaze distribution in the slot weights.
    pub gamma: f64,
    /// Weight of the alignment loss.
    pub lambda: f64,
    pub epsilon: f64,
    pub use_attn_loss: bool,
    pub use_ntp_loss: bool,
    /// `false` replaces the power weights by ones, giving plain KL.
    pub use_importance_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            lambda: 1.0,
            epsilon: 1e-8,
            use_attn_loss: true,
            use_ntp_loss: true,
            use_importance_weights: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TuningError> {
        if !self.use_attn_loss && !self.use_ntp_loss {
            return Err(TuningError::Config("at least one of the two losses must be enabled".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TuningError::Config(format!(
                "gamma and lambda must be finite and non-negative, got {} and {}",
                self.gamma, self.lambda
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(TuningError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub learning_rate: f64,
    /// Learning rate of the user logits; defaults to `learning_rate`.
    pub logit_learning_rate: Option<f64>,
    pub seed: u64,
    pub num_prompts: usize,
    pub soft_tokens: usize,
    pub train_basis: bool,
    pub train_logits: bool,
    pub probe: crate::probing::ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            grad_accum_steps: 2,
            learning_rate: 1e-3,
            logit_learning_rate: None,
            seed: 0,
            num_prompts: 8,
            soft_tokens: 16,
            train_basis: true,
            train_logits: true,
            probe: Default::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TuningError> {
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(TuningError::Config("batch_size and grad_accum_steps must be at least 1".into()));
        }
        if self.num_prompts == 0 || self.soft_tokens == 0 {
            return Err(TuningError::Config("num_prompts and soft_tokens must be at least 1".into()));
        }
        let lrs = [self.learning_rate, self.logit_learning_rate.unwrap_or(self.learning_rate)];
        if lrs.iter().any(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(TuningError::Config("learning rates must be positive".into()));
        }
        self.probe.validate()?;
        Ok(())
    }
}

/// Named variants that switch off one ingredient of the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Random untrained basis with uniform mixing.
    RandSp,
    /// All users share one mixture; only the basis is trained.
    SharedZ,
    /// Unweighted KL instead of the power-weighted alignment loss.
    NoOmega,
    NoAttn,
    NoNtp,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::RandSp,
        Ablation::SharedZ,
        Ablation::NoOmega,
        Ablation::NoAttn,
        Ablation::NoNtp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::RandSp => "rand-sp",
            Ablation::SharedZ => "shared-z",
            Ablation::NoOmega => "no-omega",
            Ablation::NoAttn => "no-attn",
            Ablation::NoNtp => "no-ntp",
        }
    }

    pub fn apply(self, train: &mut TrainConfig, loss: &mut LossConfig) {
        match self {
            Ablation::RandSp => {
                train.train_basis = false;
                train.train_logits = false;
            }
            Ablation::SharedZ => train.train_logits = false,
            Ablation::NoOmega => loss.use_importance_weights = false,
            Ablation::NoAttn => loss.use_attn_loss = false,
            Ablation::NoNtp => loss.use_ntp_loss = false,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}"))
    }
}

/// `g = d / (‖d‖₁ + ε)`.
pub fn normalize_fixation(dwell: &[f64], eps: f64) -> Result<Vec<f64>, TuningError> {
    if let Some((slot, &value)) = dwell.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(TuningError::Data(DataError::NegativeDwell {
            file: "<memory>".into(),
            line: 0,
            slot,
            value,
        }));
    }
    Ok(crate::numerics::l1_normalize(dwell, eps)?)
}

/// `ω_n = (g_n + ε)^γ / Σ (g + ε)^γ`.
pub fn importance_weights(g: &[f64], gamma: f64, eps: f64) -> Vec<f64> {
    let raw: Vec<f64> = g.iter().map(|v| (v + eps).powf(gamma)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// `Σ ω_n g_n log(g_n / max(a_n, ε))` on a tape, with `0·log 0 = 0`.
/// `a` is a `[1, N]` variable.
pub fn attn_loss(tape: &mut Tape, a: Var, g: &[f64], cfg: &LossConfig) -> Result<Var, TuningError> {
    let n = tape.value(a).len();
    if n != g.len() {
        return Err(TuningError::Config(format!("slot distribution of {n} vs gaze of {}", g.len())));
    }
    let omega = if cfg.use_importance_weights {
        importance_weights(g, cfg.gamma, cfg.epsilon)
    } else {
        vec![1.0; n]
    };
    let coef: Vec<f64> = omega.iter().zip(g).map(|(w, gn)| w * gn).collect();
    let mut fixed = Vec::with_capacity(n);
    for (c, gn) in coef.iter().zip(g) {
        fixed.push(if *c == 0.0 { 0.0 } else { c * gn.ln() });
    }
    let floored = tape.clamp_min(a, cfg.epsilon)?;
    let log_a = tape.log(floored)?;
    let weights = tape.constant(Tensor::new(vec![1, n], coef)?);
    let weighted = tape.mul(log_a, weights)?;
    let cross = tape.sum(weighted)?;
    let entropy = tape.constant(Tensor::scalar(fixed.iter().sum()));
    Ok(tape.sub(entropy, cross)?)
}

/// `−log p(click)` with `p` the softmax over the first `num_slots` logits.
pub fn ntp_loss(tape: &mut Tape, logits: Var, click: usize, num_slots: usize) -> Result<Var, TuningError> {
    if click >= num_slots {
        return Err(TuningError::Config(format!("click {click} outside {num_slots} slots")));
    }
    let answers = tape.slice_cols(logits, 0, num_slots)?;
    let logp = tape.log_softmax_rows(answers)?;
    let picked = tape.gather(logp, &[click])?;
    let picked = tape.sum(picked)?;
    Ok(tape.scale(picked, -1.0)?)
}

/// `ntp + λ·attn` with disabled terms left out.
pub fn total_loss(tape: &mut Tape, ntp: Option<Var>, attn: Option<Var>, lambda: f64) -> Result<Var, TuningError> {
    let attn = attn.map(|a| tape.scale(a, lambda)).transpose()?;
    match (ntp, attn) {
        (Some(n), Some(a)) => Ok(tape.add(n, a)?),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => Err(TuningError::Config("no loss term enabled".into())),
    }
}

/// Value-only alignment loss.
pub fn attn_loss_value(a: &[f64], g: &[f64], cfg: &LossConfig) -> Result<f64, TuningError> {
    let mut tape = Tape::new();
    let av = tape.constant(Tensor::new(vec![1, a.len()], a.to_vec())?);
    let l = attn_loss(&mut tape, av, g, cfg)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests;
