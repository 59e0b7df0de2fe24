//! Relevance probing: maps recorded attention (and, for the gradient-based
//! operators, its gradient) to a token-to-token relevance matrix, reads the
//! answer row over the visual tokens and pools it into a slot distribution.
//!
//! Three operators are provided:
//!
//! * **Rollout**: `E_l = RowNorm(½·mean_h A + ½·I)`, `R = E_L ⋯ E_1`.
//! * **AttnLRP**: `E_l = mean_h SignedRowNorm(A ⊙ G)`, `R = I + Σ β_l E_l` with `β_l ∝ l`.
//! * **GLIMPSE**: heads weighted by `softmax(σ/τ_head)` where `σ_h` measures
//!   how much positive gradient falls on attended entries;
//!   `R⁽ˡ⁾ = R⁽ˡ⁻¹⁾ + α_l E_l R⁽ˡ⁻¹⁾` with `α_l ∝ Σ|G⁽ˡ⁾| · softmax(τ_depth·l)`.
//!
//! The functions in [`graph`] record the same computations on a tape.

pub mod graph;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Layout};
use crate::microvlm::{AttentionRecord, TokenSequence};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("{0}")]
    Usage(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("visual token {0} is not covered by any slot")]
    UnmappedPatch(usize),
    #[error(transparent)]
    Layout(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Rollout,
    #[serde(rename = "attnlrp")]
    AttnLrp,
    Glimpse,
}

impl Operator {
    pub const ALL: [Operator; 3] = [Operator::Rollout, Operator::AttnLrp, Operator::Glimpse];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Rollout => "rollout",
            Operator::AttnLrp => "attnlrp",
            Operator::Glimpse => "glimpse",
        }
    }

    pub fn needs_gradients(self) -> bool {
        self != Operator::Rollout
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rollout" => Ok(Operator::Rollout),
            "attnlrp" => Ok(Operator::AttnLrp),
            "glimpse" => Ok(Operator::Glimpse),
            other => Err(format!("unknown operator {other:?} (expected rollout, attnlrp or glimpse)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub operator: Operator,
    pub epsilon: f64,
    /// Head temperature, GLIMPSE only.
    pub tau_head: f64,
    /// Depth temperature, GLIMPSE only.
    pub tau_depth: f64,
    /// Keep the slot distribution differentiable with respect to the attention.
    pub differentiable: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            operator: Operator::Glimpse,
            epsilon: 1e-8,
            tau_head: 1.0,
            tau_depth: 0.5,
            differentiable: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if !(self.epsilon > 0.0) {
            return Err(ProbeError::Usage(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.operator == Operator::Glimpse && !(self.tau_head > 0.0 && self.tau_depth.is_finite()) {
            return Err(ProbeError::Usage("tau_head must be positive and tau_depth finite".into()));
        }
        Ok(())
    }
}

/// Propagated relevance together with the per-layer matrices it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMatrix {
    pub r: Tensor,
    pub layers: Vec<Tensor>,
}

/// Non-negative slot weights summing to one (up to `ε`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotDistribution {
    pub layout: String,
    pub values: Vec<f64>,
}

fn constants(tape: &mut Tape, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

pub fn rollout_layer(heads: &[Tensor]) -> Result<Tensor, ProbeError> {
    let mut tape = Tape::new();
    let hs = constants(&mut tape, heads);
    let e = graph::rollout_layer(&mut tape, &hs)?;
    Ok(tape.value(e).clone())
}

pub fn attnlrp_layer(heads: &[Tensor], grads: &[Tensor], eps: f64) -> Result<Tensor, ProbeError> {
    let mut tape = Tape::new();
    let hs = constants(&mut tape, heads);
    let e = graph::attnlrp_layer(&mut tape, &hs, grads, eps)?;
    Ok(tape.value(e).clone())
}

/// Returns the layer matrix and the layer's total absolute gradient.
pub fn glimpse_layer(heads: &[Tensor], grads: &[Tensor], tau_head: f64, eps: f64) -> Result<(Tensor, f64), ProbeError> {
    let mut tape = Tape::new();
    let hs = constants(&mut tape, heads);
    let (e, mass) = graph::glimpse_layer(&mut tape, &hs, grads, tau_head, eps)?;
    Ok((tape.value(e).clone(), mass))
}

fn check_square(layers: &[Tensor]) -> Result<(), ProbeError> {
    let Some(first) = layers.first() else {
        return Err(ProbeError::Usage("no layers to propagate".into()));
    };
    let n = first.rows();
    if layers.iter().any(|e| e.shape() != [n, n]) {
        return Err(ProbeError::Usage("layer matrices must be square and equally sized".into()));
    }
    Ok(())
}

fn propagate(
    layers: &[Tensor],
    rule: impl FnOnce(&mut Tape, &[Var]) -> Result<Var, ProbeError>,
) -> Result<RelevanceMatrix, ProbeError> {
    check_square(layers)?;
    let mut tape = Tape::new();
    let es = constants(&mut tape, layers);
    let r = rule(&mut tape, &es)?;
    Ok(RelevanceMatrix {
        r: tape.value(r).clone(),
        layers: layers.to_vec(),
    })
}

pub fn rollout_propagate(layers: &[Tensor]) -> Result<RelevanceMatrix, ProbeError> {
    propagate(layers, graph::rollout_propagate)
}

pub fn attnlrp_propagate(layers: &[Tensor]) -> Result<RelevanceMatrix, ProbeError> {
    propagate(layers, graph::attnlrp_propagate)
}

/// `masses[l]` is the total absolute gradient of layer `l`.
pub fn glimpse_propagate(layers: &[Tensor], masses: &[f64], tau_depth: f64) -> Result<RelevanceMatrix, ProbeError> {
    if masses.len() != layers.len() {
        return Err(ProbeError::Usage("one gradient mass per layer required".into()));
    }
    let alphas = graph::glimpse_depth_weights(masses, tau_depth);
    propagate(layers, |tape, es| graph::glimpse_propagate(tape, es, &alphas))
}

pub use graph::{attnlrp_depth_weights, glimpse_depth_weights};

/// `R[answer, V]`, in the order of the visual positions.
pub fn extract_visual_relevance(r: &Tensor, seq: &TokenSequence) -> Result<Vec<f64>, ProbeError> {
    if seq.visual_positions.is_empty() {
        return Err(ProbeError::Usage("sequence has no visual tokens".into()));
    }
    if r.rank() != 2 || r.rows() <= seq.answer_position || seq.visual_positions.iter().any(|&p| p >= r.cols()) {
        return Err(ProbeError::Usage(format!("relevance of shape {:?} does not cover the sequence", r.shape())));
    }
    let row = r.row(seq.answer_position);
    Ok(seq.visual_positions.iter().map(|&p| row[p]).collect())
}

/// Pools patch relevance (row-major over the layout's patch grid) into slots.
pub fn aggregate_to_slots(r_vis: &[f64], layout: &Layout, eps: f64) -> Result<SlotDistribution, ProbeError> {
    let map = layout.patch_slot_map()?;
    if map.len() != r_vis.len() {
        return Err(ProbeError::Usage(format!(
            "{} visual relevances for {} patches of layout {}",
            r_vis.len(),
            map.len(),
            layout.id
        )));
    }
    let mut tape = Tape::new();
    let row = tape.constant(Tensor::new(vec![1, r_vis.len()], r_vis.to_vec())?);
    let positions: Vec<usize> = (0..r_vis.len()).collect();
    let a = graph::aggregate_to_slots(&mut tape, row, &positions, &map, layout.num_slots(), eps)?;
    Ok(SlotDistribution {
        layout: layout.id.clone(),
        values: tape.value(a).data().to_vec(),
    })
}

/// Full probe of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub relevance: RelevanceMatrix,
    pub visual: Vec<f64>,
    pub slots: SlotDistribution,
}

/// Per-layer matrices for the configured operator.
pub fn layer_matrices(record: &AttentionRecord, cfg: &ProbeConfig) -> Result<(Vec<Tensor>, Vec<f64>), ProbeError> {
    let grads = if cfg.operator.needs_gradients() {
        Some(
            record
                .gradients
                .as_ref()
                .ok_or_else(|| ProbeError::Usage(format!("{} needs attention gradients", cfg.operator)))?,
        )
    } else {
        None
    };
    let mut layers = Vec::with_capacity(record.num_layers());
    let mut masses = Vec::new();
    for (l, heads) in record.attention.iter().enumerate() {
        let e = match cfg.operator {
            Operator::Rollout => rollout_layer(heads)?,
            Operator::AttnLrp => attnlrp_layer(heads, &grads.expect("checked")[l], cfg.epsilon)?,
            Operator::Glimpse => {
                let (e, m) = glimpse_layer(heads, &grads.expect("checked")[l], cfg.tau_head, cfg.epsilon)?;
                masses.push(m);
                e
            }
        };
        layers.push(e);
    }
    Ok((layers, masses))
}

/// Probes a recorded forward pass and pools the answer row into slots.
pub fn probe(record: &AttentionRecord, seq: &TokenSequence, layout: &Layout, cfg: &ProbeConfig) -> Result<Probe, ProbeError> {
    cfg.validate()?;
    let (layers, masses) = layer_matrices(record, cfg)?;
    let relevance = match cfg.operator {
        Operator::Rollout => rollout_propagate(&layers)?,
        Operator::AttnLrp => attnlrp_propagate(&layers)?,
        Operator::Glimpse => glimpse_propagate(&layers, &masses, cfg.tau_depth)?,
    };
    let visual = extract_visual_relevance(&relevance.r, seq)?;
    let slots = aggregate_to_slots(&visual, layout, cfg.epsilon)?;
    Ok(Probe {
        relevance,
        visual,
        slots,
    })
}

/// Slot distribution of a recorded forward pass, using the slot map carried
/// by the sequence.
pub fn slot_distribution(record: &AttentionRecord, seq: &TokenSequence, cfg: &ProbeConfig) -> Result<Vec<f64>, ProbeError> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let att: Vec<Vec<Var>> = record
        .attention
        .iter()
        .map(|l| l.iter().map(|a| tape.constant(a.clone())).collect())
        .collect();
    let a = probe_on_tape(&mut tape, &att, record.gradients.as_deref(), seq, cfg)?;
    Ok(tape.value(a).data().to_vec())
}

/// Slot distribution `[1, num_slots]` recorded on `tape` from attention
/// variables. Gradient-based operators take `grads` as constants.
pub fn probe_on_tape(
    tape: &mut Tape,
    attention: &[Vec<Var>],
    grads: Option<&[Vec<Tensor>]>,
    seq: &TokenSequence,
    cfg: &ProbeConfig,
) -> Result<Var, ProbeError> {
    if attention.is_empty() {
        return Err(ProbeError::Usage("no attention layers".into()));
    }
    let need = |l: usize| -> Result<&[Tensor], ProbeError> {
        grads
            .and_then(|g| g.get(l))
            .map(Vec::as_slice)
            .ok_or_else(|| ProbeError::Usage(format!("{} needs attention gradients", cfg.operator)))
    };
    let mut layers = Vec::with_capacity(attention.len());
    let mut masses = Vec::new();
    for (l, heads) in attention.iter().enumerate() {
        layers.push(match cfg.operator {
            Operator::Rollout => graph::rollout_layer(tape, heads)?,
            Operator::AttnLrp => graph::attnlrp_layer(tape, heads, need(l)?, cfg.epsilon)?,
            Operator::Glimpse => {
                let (e, m) = graph::glimpse_layer(tape, heads, need(l)?, cfg.tau_head, cfg.epsilon)?;
                masses.push(m);
                e
            }
        });
    }
    let pos = seq.answer_position;
    let row = match cfg.operator {
        Operator::Rollout => graph::rollout_row(tape, &layers, pos)?,
        Operator::AttnLrp => graph::attnlrp_row(tape, &layers, pos)?,
        Operator::Glimpse => {
            let alphas = graph::glimpse_depth_weights(&masses, cfg.tau_depth);
            graph::glimpse_row(tape, &layers, &alphas, pos)?
        }
    };
    graph::aggregate_to_slots(tape, row, &seq.visual_positions, &seq.visual_slots, seq.num_slots, cfg.epsilon)
}

#[cfg(test)]
mod tests;
