//! Probing operators recorded on a tape, so the slot distribution stays
//! differentiable with respect to whatever produced the attention.
//!
//! Attention gradients enter as constants: relevance is differentiated
//! through the attention values and the operator algebra only.

use super::ProbeError;
use crate::numerics::{Tape, Tensor, Var};

fn check_finite(gs: &[Tensor]) -> Result<(), ProbeError> {
    if gs.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(ProbeError::NonFinite("attention gradient"))
    }
}

fn check_heads(tape: &Tape, heads: &[Var], grads: Option<&[Tensor]>) -> Result<usize, ProbeError> {
    let Some(&first) = heads.first() else {
        return Err(ProbeError::Usage("layer has no attention heads".into()));
    };
    let n = tape.value(first).rows();
    for &h in heads {
        let s = tape.value(h).shape();
        if s != [n, n] {
            return Err(ProbeError::Usage(format!("attention head of shape {s:?}, expected [{n}, {n}]")));
        }
    }
    if let Some(gs) = grads {
        if gs.len() != heads.len() || gs.iter().any(|g| g.shape() != [n, n]) {
            return Err(ProbeError::Usage("attention gradients do not match the attention heads".into()));
        }
        check_finite(gs)?;
    }
    Ok(n)
}

fn head_mean(tape: &mut Tape, parts: &[Var]) -> Result<Var, ProbeError> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, 1.0 / parts.len() as f64)?)
}

/// `RowNorm(½·mean_h A + ½·I)`.
pub fn rollout_layer(tape: &mut Tape, heads: &[Var]) -> Result<Var, ProbeError> {
    let n = check_heads(tape, heads, None)?;
    let mean = head_mean(tape, heads)?;
    let half = tape.scale(mean, 0.5)?;
    let eye = tape.constant(Tensor::eye(n).map(|v| 0.5 * v));
    let mixed = tape.add(half, eye)?;
    Ok(tape.row_normalize(mixed)?)
}

/// Head mean of the signed row-normalised `A ⊙ G`.
pub fn attnlrp_layer(tape: &mut Tape, heads: &[Var], grads: &[Tensor], eps: f64) -> Result<Var, ProbeError> {
    check_heads(tape, heads, Some(grads))?;
    let mut parts = Vec::with_capacity(heads.len());
    for (&a, g) in heads.iter().zip(grads) {
        let g = tape.constant(g.clone());
        let w = tape.mul(a, g)?;
        parts.push(tape.signed_row_normalize(w, eps)?);
    }
    head_mean(tape, &parts)
}

/// Gradient-aligned head mixture; also returns the layer's `Σ|G|`.
pub fn glimpse_layer(
    tape: &mut Tape,
    heads: &[Var],
    grads: &[Tensor],
    tau_head: f64,
    eps: f64,
) -> Result<(Var, f64), ProbeError> {
    check_heads(tape, heads, Some(grads))?;
    if !(tau_head > 0.0) {
        return Err(ProbeError::Usage(format!("tau_head must be positive, got {tau_head}")));
    }
    let mut aligned = Vec::with_capacity(heads.len());
    let mut scores = Vec::with_capacity(heads.len());
    let mut mass = 0.0;
    for (&a, g) in heads.iter().zip(grads) {
        let positive: f64 = g.data().iter().map(|v| v.max(0.0)).sum();
        mass += g.data().iter().map(|v| v.abs()).sum::<f64>();
        let gv = tape.constant(g.clone());
        let w = tape.mul(gv, a)?;
        let gh = tape.relu(w)?;
        let total = tape.sum(gh)?;
        scores.push(tape.scale(total, 1.0 / (positive + eps))?);
        aligned.push(gh);
    }
    let rows = scores
        .iter()
        .map(|&s| tape.reshape(s, &[1, 1]))
        .collect::<Result<Vec<_>, _>>()?;
    let scores = tape.concat_cols(&rows)?;
    let weights = tape.softmax_rows(scores, tau_head)?;
    let mut mix = None;
    for (h, &gh) in aligned.iter().enumerate() {
        let wh = tape.gather(weights, &[h])?;
        let term = tape.scale_by(wh, gh)?;
        mix = Some(match mix {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let e = tape.row_normalize(mix.expect("at least one head"))?;
    Ok((e, mass))
}

/// `β_l = l / Σ l'` for `l = 1..=layers`.
pub fn attnlrp_depth_weights(layers: usize) -> Vec<f64> {
    let total = (layers * (layers + 1) / 2) as f64;
    (1..=layers).map(|l| l as f64 / total).collect()
}

/// `α_l ∝ mass_l · softmax(τ_depth·l)_l`, scaled to sum to one. All zero
/// when no layer carries gradient mass.
pub fn glimpse_depth_weights(masses: &[f64], tau_depth: f64) -> Vec<f64> {
    let logits: Vec<f64> = (1..=masses.len()).map(|l| tau_depth * l as f64).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let raw: Vec<f64> = masses.iter().zip(&e).map(|(m, p)| m * p / z).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.into_iter().map(|v| v / total).collect()
    } else {
        vec![0.0; masses.len()]
    }
}

/// `E_L ⋯ E_1`.
pub fn rollout_propagate(tape: &mut Tape, layers: &[Var]) -> Result<Var, ProbeError> {
    let mut r = *layers.first().ok_or_else(|| ProbeError::Usage("no layers to propagate".into()))?;
    for &e in &layers[1..] {
        r = tape.matmul(e, r)?;
    }
    Ok(r)
}

/// `I + Σ β_l E_l`.
pub fn attnlrp_propagate(tape: &mut Tape, layers: &[Var]) -> Result<Var, ProbeError> {
    let first = *layers.first().ok_or_else(|| ProbeError::Usage("no layers to propagate".into()))?;
    let n = tape.value(first).rows();
    let mut r = tape.constant(Tensor::eye(n));
    for (&e, b) in layers.iter().zip(attnlrp_depth_weights(layers.len())) {
        let t = tape.scale(e, b)?;
        r = tape.add(r, t)?;
    }
    Ok(r)
}

/// `R⁽⁰⁾ = I`, `R⁽ˡ⁾ = R⁽ˡ⁻¹⁾ + α_l E_l R⁽ˡ⁻¹⁾`.
pub fn glimpse_propagate(tape: &mut Tape, layers: &[Var], alphas: &[f64]) -> Result<Var, ProbeError> {
    let first = *layers.first().ok_or_else(|| ProbeError::Usage("no layers to propagate".into()))?;
    if alphas.len() != layers.len() {
        return Err(ProbeError::Usage("one depth weight per layer required".into()));
    }
    let n = tape.value(first).rows();
    let mut r = tape.constant(Tensor::eye(n));
    for (&e, &a) in layers.iter().zip(alphas) {
        let er = tape.matmul(e, r)?;
        let er = tape.scale(er, a)?;
        r = tape.add(r, er)?;
    }
    Ok(r)
}

/// Row `position` of each propagation rule, without forming the full matrix.
pub fn rollout_row(tape: &mut Tape, layers: &[Var], position: usize) -> Result<Var, ProbeError> {
    let last = *layers.last().ok_or_else(|| ProbeError::Usage("no layers to propagate".into()))?;
    let mut r = tape.slice_rows(last, position, 1)?;
    for &e in layers[..layers.len() - 1].iter().rev() {
        r = tape.matmul(r, e)?;
    }
    Ok(r)
}

pub fn attnlrp_row(tape: &mut Tape, layers: &[Var], position: usize) -> Result<Var, ProbeError> {
    let first = *layers.first().ok_or_else(|| ProbeError::Usage("no layers to propagate".into()))?;
    let n = tape.value(first).rows();
    let mut unit = Tensor::zeros(&[1, n]);
    unit.data_mut()[position] = 1.0;
    let mut r = tape.constant(unit);
    for (&e, b) in layers.iter().zip(attnlrp_depth_weights(layers.len())) {
        let row = tape.slice_rows(e, position, 1)?;
        let row = tape.scale(row, b)?;
        r = tape.add(r, row)?;
    }
    Ok(r)
}

pub fn glimpse_row(tape: &mut Tape, layers: &[Var], alphas: &[f64], position: usize) -> Result<Var, ProbeError> {
    let first = *layers.first().ok_or_else(|| ProbeError::Usage("no layers to propagate".into()))?;
    if alphas.len() != layers.len() {
        return Err(ProbeError::Usage("one depth weight per layer required".into()));
    }
    let n = tape.value(first).rows();
    let mut unit = Tensor::zeros(&[1, n]);
    unit.data_mut()[position] = 1.0;
    let mut r = tape.constant(unit);
    // R = (I + α_L E_L) ⋯ (I + α_1 E_1), applied to the row from the left
    for (&e, &a) in layers.iter().zip(alphas).rev() {
        let re = tape.matmul(r, e)?;
        let re = tape.scale(re, a)?;
        r = tape.add(r, re)?;
    }
    Ok(r)
}

/// Sums patch relevance per slot, clamps negatives and ℓ1-normalises.
/// `row` is `[1, n]` over sequence positions.
pub fn aggregate_to_slots(
    tape: &mut Tape,
    row: Var,
    visual_positions: &[usize],
    visual_slots: &[Option<usize>],
    num_slots: usize,
    eps: f64,
) -> Result<Var, ProbeError> {
    if visual_positions.is_empty() {
        return Err(ProbeError::Usage("sequence has no visual tokens".into()));
    }
    let n = tape.value(row).len();
    let mut assign = Tensor::zeros(&[n, num_slots]);
    for (k, (&pos, slot)) in visual_positions.iter().zip(visual_slots).enumerate() {
        let s = slot.ok_or(ProbeError::UnmappedPatch(k))?;
        if s >= num_slots || pos >= n {
            return Err(ProbeError::Usage(format!("visual token {k} maps outside the relevance row")));
        }
        assign.data_mut()[pos * num_slots + s] = 1.0;
    }
    let assign = tape.constant(assign);
    let sums = tape.matmul(row, assign)?;
    let clamped = tape.clamp_min(sums, 0.0)?;
    Ok(tape.l1_normalize(clamped, eps)?)
}
