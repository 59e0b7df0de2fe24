use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{attn_loss, normalize_fixation, ntp_loss, total_loss, LossConfig, TrainConfig, TuningError};
use crate::data::{Corpus, GazeSession};
use crate::microvlm::{build_sequence, predict_slot, target_scalar, ForwardOptions, MicroVlm, ModelError, TokenSequence};
use crate::numerics::{Adam, NumericsError, Tape, Tensor};
use crate::personalization::{compose_on_tape, PromptState};
use crate::probing::{probe_on_tape, ProbeError};

/// A session with its token layout and gaze target precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSession {
    pub user: String,
    pub session: String,
    /// Laid out for a prompt of the training length (zeros as placeholder).
    pub seq: TokenSequence,
    pub gaze: Vec<f64>,
    pub click: usize,
}

/// Builds sequences with room for `soft_tokens` prompt rows.
pub fn prepare(
    model: &MicroVlm,
    corpus: &Corpus,
    sessions: &[GazeSession],
    soft_tokens: usize,
    eps: f64,
) -> Result<Vec<PreparedSession>, TuningError> {
    let placeholder = (soft_tokens > 0).then(|| Tensor::zeros(&[soft_tokens, model.config().embed_dim]));
    sessions
        .iter()
        .map(|s| {
            let layout = corpus
                .layout(&s.layout)
                .ok_or_else(|| TuningError::Config(format!("session {}: unknown layout {}", s.session, s.layout)))?;
            let user = corpus
                .user(&s.user)
                .ok_or_else(|| TuningError::Config(format!("session {}: unknown user {}", s.session, s.user)))?;
            if s.click >= s.num_slots() {
                return Err(TuningError::Config(format!("session {}: click outside the layout", s.session)));
            }
            Ok(PreparedSession {
                user: s.user.clone(),
                session: s.session.clone(),
                seq: build_sequence(model.config(), placeholder.as_ref(), s, layout, user)?,
                gaze: normalize_fixation(&s.dwell_ms, eps)?,
                click: s.click,
            })
        })
        .collect()
}

/// Mean losses of one epoch; `None` for a disabled term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_NTP")]
    pub ntp: Option<f64>,
    #[serde(rename = "L_Attn")]
    pub attn: Option<f64>,
    #[serde(rename = "L_total")]
    pub total: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trace: Vec<EpochLog>,
    pub steps: u64,
}

/// Losses and prompt-parameter gradients for one session.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub ntp: Option<f64>,
    pub attn: Option<f64>,
    pub total: f64,
    /// `[M, N_soft·d]`.
    pub basis: Tensor,
    /// `[M]`.
    pub logits: Vec<f64>,
}

/// Forward, probe and backward for one session under prompt `(basis, z)`.
/// Any NaN or infinity on the way is reported as a non-finite loss of this session.
pub fn sample_gradients(
    model: &MicroVlm,
    sess: &PreparedSession,
    basis: &Tensor,
    z: &[f64],
    tc: &TrainConfig,
    lc: &LossConfig,
) -> Result<SampleGrad, TuningError> {
    sample_gradients_inner(model, sess, basis, z, tc, lc).map_err(|e| {
        if is_non_finite(&e) {
            TuningError::NonFiniteLoss {
                epoch: 0,
                session: sess.session.clone(),
            }
        } else {
            e
        }
    })
}

fn is_non_finite(e: &TuningError) -> bool {
    let numerics = |n: &NumericsError| matches!(n, NumericsError::NonFinite(_));
    match e {
        TuningError::NonFiniteLoss { .. } => true,
        TuningError::Numerics(n) | TuningError::Model(ModelError::Numerics(n)) => numerics(n),
        TuningError::Probe(ProbeError::NonFinite(_)) => true,
        TuningError::Probe(ProbeError::Numerics(n)) => numerics(n),
        _ => false,
    }
}

fn sample_gradients_inner(
    model: &MicroVlm,
    sess: &PreparedSession,
    basis: &Tensor,
    z: &[f64],
    tc: &TrainConfig,
    lc: &LossConfig,
) -> Result<SampleGrad, TuningError> {
    let soft = sess.seq.soft_len();
    let dim = model.config().embed_dim;
    let mut tape = Tape::new();
    let params = model.register(&mut tape, false);
    let b = if tc.train_basis {
        tape.leaf(basis.clone())
    } else {
        tape.constant(basis.clone())
    };
    let zt = Tensor::new(vec![1, z.len()], z.to_vec())?;
    let zv = if tc.train_logits { tape.leaf(zt) } else { tape.constant(zt) };
    let (prompt, _) = compose_on_tape(&mut tape, b, zv, soft, dim)?;

    let op = tc.probe.operator;
    let need_grads = lc.use_attn_loss && op.needs_gradients();
    let out = model.forward_on_tape(
        &mut tape,
        &params,
        &sess.seq,
        Some(prompt),
        ForwardOptions {
            watch_attention: need_grads,
            ..Default::default()
        },
    )?;

    let mut attn = None;
    if lc.use_attn_loss {
        let grads = if need_grads {
            let token = predict_slot(tape.value(out.logits).data(), sess.seq.num_slots).slot;
            let s = target_scalar(&mut tape, out.logits, token)?;
            tape.backward(s)?;
            let g: Vec<Vec<Tensor>> = out
                .attention
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|&a| tape.grad(a).unwrap_or_else(|| Tensor::zeros(tape.value(a).shape())))
                        .collect()
                })
                .collect();
            tape.zero_grad();
            Some(g)
        } else {
            None
        };
        let a = probe_on_tape(&mut tape, &out.attention, grads.as_deref(), &sess.seq, &tc.probe)?;
        attn = Some(attn_loss(&mut tape, a, &sess.gaze, lc)?);
    }
    let ntp = if lc.use_ntp_loss {
        Some(ntp_loss(&mut tape, out.logits, sess.click, sess.seq.num_slots)?)
    } else {
        None
    };
    let total = total_loss(&mut tape, ntp, attn, lc.lambda)?;
    let value = tape.value(total).item();
    if !value.is_finite() {
        return Err(TuningError::NonFiniteLoss {
            epoch: 0,
            session: sess.session.clone(),
        });
    }
    tape.backward(total)?;
    let grad_b = tape.grad(b).unwrap_or_else(|| Tensor::zeros(basis.shape()));
    let grad_z = tape.grad(zv).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; z.len()]);
    Ok(SampleGrad {
        ntp: ntp.map(|v| tape.value(v).item()),
        attn: attn.map(|v| tape.value(v).item()),
        total: value,
        basis: grad_b,
        logits: grad_z,
    })
}

/// Optimises the basis and user logits in `state`; the model is only read.
///
/// Each effective batch of `batch_size × grad_accum_steps` sessions yields
/// one Adam step on the mean gradient. `on_epoch` sees every epoch's log and
/// the current prompt state.
pub fn train(
    model: &MicroVlm,
    data: &[PreparedSession],
    state: &mut PromptState,
    tc: &TrainConfig,
    lc: &LossConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &PromptState) -> Result<(), String>,
) -> Result<TrainOutcome, TuningError> {
    tc.validate()?;
    lc.validate()?;
    if lc.use_attn_loss && !tc.probe.differentiable {
        return Err(TuningError::Config("the alignment loss needs a differentiable probe".into()));
    }
    let m = state.basis.num_prompts();
    if state.basis.num_tokens() != tc.soft_tokens || state.basis.dim() != model.config().embed_dim {
        return Err(TuningError::Config(format!(
            "basis is {:?}, training expects {} tokens of width {}",
            state.basis.blocks.shape(),
            tc.soft_tokens,
            model.config().embed_dim
        )));
    }
    let users: BTreeMap<String, usize> = state.logits.keys().cloned().enumerate().map(|(i, u)| (u, i)).collect();
    for s in data {
        if !users.contains_key(&s.user) {
            return Err(TuningError::Prompt(crate::personalization::PersonalizationError::UnknownUser(
                s.user.clone(),
            )));
        }
        if s.seq.soft_len() != tc.soft_tokens {
            return Err(TuningError::Config(format!("session {} laid out for a different prompt length", s.session)));
        }
    }
    if !tc.train_basis && !tc.train_logits {
        return Ok(TrainOutcome {
            trace: Vec::new(),
            steps: 0,
        });
    }

    let mut basis = state.basis.flat();
    let mut zmat = Tensor::new(vec![users.len(), m], state.logits.values().flatten().copied().collect())?;
    let mut opt = Adam::new(tc.learning_rate);
    let z_scale = tc.logit_learning_rate.unwrap_or(tc.learning_rate) / tc.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let window = tc.batch_size * tc.grad_accum_steps;
    let mut trace = Vec::with_capacity(tc.epochs);
    let mut steps = 0;

    for epoch in 1..=tc.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut ntp_sum, mut attn_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(window) {
            let mut gb = Tensor::zeros(basis.shape());
            let mut gz = Tensor::zeros(zmat.shape());
            let w = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let sess = &data[i];
                let u = users[&sess.user];
                let z = &zmat.data()[u * m..(u + 1) * m];
                let g = sample_gradients(model, sess, &basis, z, tc, lc).map_err(|e| match e {
                    TuningError::NonFiniteLoss { session, .. } => TuningError::NonFiniteLoss { epoch, session },
                    other => other,
                })?;
                ntp_sum += g.ntp.unwrap_or(0.0);
                attn_sum += g.attn.unwrap_or(0.0);
                total_sum += g.total;
                for (a, b) in gb.data_mut().iter_mut().zip(g.basis.data()) {
                    *a += w * b;
                }
                for (a, b) in gz.data_mut()[u * m..(u + 1) * m].iter_mut().zip(&g.logits) {
                    *a += w * b;
                }
            }
            let mut params: Vec<&mut Tensor> = Vec::with_capacity(2);
            let mut grads = Vec::with_capacity(2);
            let mut scales = Vec::with_capacity(2);
            if tc.train_basis {
                params.push(&mut basis);
                grads.push(gb);
                scales.push(1.0);
            }
            if tc.train_logits {
                params.push(&mut zmat);
                grads.push(gz);
                scales.push(z_scale);
            }
            opt.step_scaled(&mut params, &grads, &scales);
            steps += 1;
        }
        let n = data.len().max(1) as f64;
        state.basis.blocks = basis.clone().reshape(state.basis.blocks.shape())?;
        for (u, i) in &users {
            state.logits.insert(u.clone(), zmat.data()[i * m..(i + 1) * m].to_vec());
        }
        let log = EpochLog {
            epoch,
            ntp: lc.use_ntp_loss.then_some(ntp_sum / n),
            attn: lc.use_attn_loss.then_some(attn_sum / n),
            total: total_sum / n,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&log, state).map_err(TuningError::Callback)?;
        trace.push(log);
    }
    Ok(TrainOutcome { trace, steps })
}
