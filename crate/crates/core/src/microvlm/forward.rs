use super::{MicroVlm, ModelConfig, ModelError, ParamVars, Segment, TokenSequence};
use crate::numerics::{softmax_rows, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;
const POINTER_FLOOR: f64 = 1e-12;

/// Attention weights of one forward pass, `attention[layer][head]` is `[n, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub attention: Vec<Vec<Tensor>>,
    /// `∂s/∂A` for every recorded matrix, when requested.
    pub gradients: Option<Vec<Vec<Tensor>>>,
}

impl AttentionRecord {
    pub fn num_layers(&self) -> usize {
        self.attention.len()
    }

    pub fn num_heads(&self) -> usize {
        self.attention.first().map_or(0, Vec::len)
    }

    pub fn seq_len(&self) -> usize {
        self.attention.first().and_then(|l| l.first()).map_or(0, Tensor::rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    /// Logits over the whole vocabulary at the answer position.
    pub logits: Tensor,
    pub record: AttentionRecord,
    /// Vocabulary id the target scalar was read from (the greedy answer).
    pub answer_token: usize,
    /// Logit of `answer_token`.
    pub target: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Wrap each attention matrix in a watched node so its gradient can be read.
    pub watch_attention: bool,
    /// Constant added to each attention matrix after the softmax, for
    /// differentiating through the attention values directly.
    pub attention_offset: Option<&'a [Vec<Tensor>]>,
}

/// Handles produced by [`MicroVlm::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    /// `[1, vocab]` logits at the answer position.
    pub logits: Var,
    /// `attention[layer][head]`.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotPrediction {
    pub slot: usize,
    pub probs: Vec<f64>,
}

/// Mean over answer rows of `logits[:, token]`; with a single answer row this
/// is just the answer-token logit.
pub fn target_scalar(tape: &mut Tape, logits: Var, token: usize) -> Result<Var, ModelError> {
    let v = tape.value(logits);
    let (rows, cols) = (v.rows(), v.cols());
    if token >= cols {
        return Err(ModelError::Config(format!("answer token {token} outside vocabulary of {cols}")));
    }
    let picked = tape.gather(logits, &(0..rows).map(|r| r * cols + token).collect::<Vec<_>>())?;
    Ok(tape.mean(picked)?)
}

/// Softmax over the first `num_slots` logits; ties go to the lowest slot.
pub fn predict_slot(logits: &[f64], num_slots: usize) -> SlotPrediction {
    let probs = softmax_rows(&Tensor::vector(logits[..num_slots].to_vec()), 1.0)
        .expect("finite logits")
        .into_data();
    let mut slot = 0;
    for (n, &p) in probs.iter().enumerate() {
        if p > probs[slot] {
            slot = n;
        }
    }
    SlotPrediction { slot, probs }
}

fn one_hot(rows: usize, cols: usize, hot: impl Fn(usize) -> usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        t.data_mut()[r * cols + hot(r)] = 1.0;
    }
    t
}

fn affine_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var, ModelError> {
    let n = tape.layer_norm_rows(x, NORM_EPS)?;
    let n = tape.mul_row(n, gain)?;
    Ok(tape.add_row(n, bias)?)
}

/// Input embeddings `[len, d]`.
pub(super) fn embed(
    tape: &mut Tape,
    c: &ModelConfig,
    p: &ParamVars,
    seq: &TokenSequence,
    prompt: Option<Var>,
) -> Result<Var, ModelError> {
    let patches = seq.visual_positions.len();
    let feats = tape.constant(seq.patch_features.clone());
    let mut visual = tape.matmul(feats, p.global(1))?;
    let bg = tape.constant(seq.background.clone());
    let bg = tape.matmul(bg, p.global(2))?;
    visual = tape.add(visual, bg)?;
    if c.positional_encoding {
        let rows = tape.constant(one_hot(patches, c.patch_rows, |k| k / c.patch_cols));
        let cols = tape.constant(one_hot(patches, c.patch_cols, |k| k % c.patch_cols));
        let re = tape.matmul(rows, p.global(3))?;
        let ce = tape.matmul(cols, p.global(4))?;
        visual = tape.add(visual, re)?;
        visual = tape.add(visual, ce)?;
    }

    let mut parts = Vec::with_capacity(4);
    if let Some(prompt) = prompt {
        parts.push(prompt);
    }
    parts.push(visual);
    if c.profile_tokens > 0 {
        let pref = tape.constant(seq.preference.clone());
        let proj = tape.matmul(pref, p.global(5))?;
        let proj = tape.reshape(proj, &[c.profile_tokens, c.embed_dim])?;
        let marks = tape.constant(one_hot(c.profile_tokens, c.vocab_size(), |k| c.profile_token(k)));
        let marks = tape.matmul(marks, p.global(0))?;
        parts.push(tape.add(proj, marks)?);
    }
    let tail = tape.constant(one_hot(c.instruction_tokens + 1, c.vocab_size(), |k| c.num_answer_tokens + k));
    parts.push(tape.matmul(tail, p.global(0))?);
    Ok(tape.concat_rows(&parts)?)
}

impl MicroVlm {
    /// Runs the model on `tape`. `prompt` overrides the prompt stored in `seq`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        seq: &TokenSequence,
        prompt: Option<Var>,
        options: ForwardOptions<'_>,
    ) -> Result<TapeForward, ModelError> {
        let c = &self.config;
        let prompt = match prompt {
            Some(v) => Some(v),
            None => seq.prompt.clone().map(|t| tape.constant(t)),
        };
        let soft = prompt.map_or(0, |v| tape.value(v).rows());
        if soft != seq.soft_len() {
            return Err(ModelError::Config(format!(
                "prompt has {soft} rows, sequence was laid out for {}",
                seq.soft_len()
            )));
        }
        let n = seq.len();
        if n > c.max_sequence_len() {
            return Err(ModelError::Capacity {
                len: n,
                max: c.max_sequence_len(),
            });
        }

        // Soft tokens equal to the null token are invisible to every other position.
        let mut hidden_key = vec![false; n];
        if let Some(pv) = prompt {
            let null = self.null_token().data();
            let pt = tape.value(pv);
            for (r, h) in hidden_key.iter_mut().enumerate().take(soft) {
                *h = pt.row(r) == null;
            }
        }
        let visual: Vec<bool> = seq.segments.iter().map(|s| *s == Segment::Visual).collect();
        let allowed = |i: usize, j: usize| {
            j == i || (j < i && !hidden_key[j] && !(visual[i] && visual[j]))
        };

        let mut x = embed(tape, c, p, seq, prompt)?;
        let dh = c.head_dim();
        let temperature = (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let h = affine_norm(tape, x, p.layer(l, 0), p.layer(l, 1))?;
            let q = tape.matmul(h, p.layer(l, 2))?;
            let k = tape.matmul(h, p.layer(l, 3))?;
            let v = tape.matmul(h, p.layer(l, 4))?;
            let mut heads = Vec::with_capacity(c.num_heads);
            let mut outs = Vec::with_capacity(c.num_heads);
            for hd in 0..c.num_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let mut a = tape.softmax_rows_masked(scores, temperature, allowed)?;
                if let Some(off) = options.attention_offset {
                    let o = tape.constant(off[l][hd].clone());
                    a = tape.add(a, o)?;
                }
                if options.watch_attention {
                    a = tape.watch(a)?;
                }
                heads.push(a);
                outs.push(tape.matmul(a, vh)?);
            }
            let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let proj = tape.matmul(cat, p.layer(l, 5))?;
            x = tape.add(x, proj)?;

            let h = affine_norm(tape, x, p.layer(l, 6), p.layer(l, 7))?;
            let u = tape.matmul(h, p.layer(l, 8))?;
            let u = tape.add_row(u, p.layer(l, 9))?;
            let u = tape.gelu(u)?;
            let o = tape.matmul(u, p.layer(l, 10))?;
            let o = tape.add_row(o, p.layer(l, 11))?;
            x = tape.add(x, o)?;
            attention.push(heads);
        }

        let fin = affine_norm(tape, x, p.tail(0), p.tail(1))?;
        let ans = tape.slice_rows(fin, seq.answer_position, 1)?;
        let fixed = tape.matmul(ans, p.tail(2))?;

        // Pointer term: log of the answer position's last-layer attention
        // mass on each slot, averaged over heads and smoothed by the mean slot
        // mass so that a slot the answer ignores keeps a finite logit.
        let slots = seq.num_slots;
        let mut gather = Tensor::zeros(&[n, slots]);
        for (&pos, slot) in seq.visual_positions.iter().zip(&seq.visual_slots) {
            if let Some(s) = *slot {
                gather.data_mut()[pos * slots + s] = 1.0;
            }
        }
        let last = attention.last().ok_or_else(|| ModelError::Config("model has no layers".into()))?;
        let mut row = tape.slice_rows(last[0], seq.answer_position, 1)?;
        for &a in &last[1..] {
            let r = tape.slice_rows(a, seq.answer_position, 1)?;
            row = tape.add(row, r)?;
        }
        let row = tape.scale(row, 1.0 / last.len() as f64)?;
        let gather = tape.constant(gather);
        let mass = tape.matmul(row, gather)?;
        let mean = tape.constant(Tensor::full(&[slots, slots], 1.0 / slots as f64));
        let spread = tape.matmul(mass, mean)?;
        let smooth = tape.add(mass, spread)?;
        let smooth = tape.clamp_min(smooth, POINTER_FLOOR)?;
        let pointer = tape.log(smooth)?;

        let vocab = c.vocab_size();
        let logits = if c.positional_encoding {
            let pad = tape.constant(Tensor::zeros(&[1, vocab - slots]));
            let pointer = tape.concat_cols(&[pointer, pad])?;
            tape.add(fixed, pointer)?
        } else {
            let rest = tape.slice_cols(fixed, slots, vocab - slots)?;
            tape.concat_cols(&[pointer, rest])?
        };
        Ok(TapeForward { logits, attention })
    }

    /// Evaluates the frozen model. With `want_grads`, also backpropagates the
    /// greedy answer logit to every attention matrix.
    pub fn forward(&self, seq: &TokenSequence, want_grads: bool) -> Result<ForwardResult, ModelError> {
        let mut tape = Tape::new();
        let p = self.register(&mut tape, false);
        let out = self.forward_on_tape(
            &mut tape,
            &p,
            seq,
            None,
            ForwardOptions {
                watch_attention: want_grads,
                ..Default::default()
            },
        )?;
        let logits = tape.value(out.logits).clone().reshape(&[self.config.vocab_size()])?;
        let answer_token = predict_slot(logits.data(), seq.num_slots).slot;
        let s = target_scalar(&mut tape, out.logits, answer_token)?;
        let gradients = if want_grads {
            tape.backward(s)?;
            Some(
                out.attention
                    .iter()
                    .map(|layer| {
                        layer
                            .iter()
                            .map(|&a| tape.grad(a).unwrap_or_else(|| Tensor::zeros(tape.value(a).shape())))
                            .collect()
                    })
                    .collect(),
            )
        } else {
            None
        };
        let attention = out
            .attention
            .iter()
            .map(|layer| layer.iter().map(|&a| tape.value(a).clone()).collect())
            .collect();
        Ok(ForwardResult {
            target: tape.value(s).item(),
            logits,
            record: AttentionRecord { attention, gradients },
            answer_token,
        })
    }
}
