use super::{PreparedSession, TuningError};
use crate::metrics::SessionEval;
use crate::microvlm::{predict_slot, MicroVlm};
use crate::personalization::PromptState;
use crate::probing::{slot_distribution, ProbeConfig};

/// Runs the frozen model on each session, with the user's prompt when
/// `prompts` is given and without any prompt otherwise.
pub fn evaluate(
    model: &MicroVlm,
    data: &[PreparedSession],
    prompts: Option<&PromptState>,
    probe: &ProbeConfig,
) -> Result<Vec<SessionEval>, TuningError> {
    data.iter()
        .map(|sess| {
            let prompt = prompts.map(|p| p.prompt_for(&sess.user)).transpose()?.map(|p| p.prompt);
            let seq = sess.seq.with_prompt(prompt);
            let out = model.forward(&seq, probe.operator.needs_gradients())?;
            let relevance = slot_distribution(&out.record, &seq, probe)?;
            let pred = predict_slot(out.logits.data(), seq.num_slots);
            Ok(SessionEval {
                user: sess.user.clone(),
                session: sess.session.clone(),
                relevance,
                gaze: sess.gaze.clone(),
                click: sess.click,
                probs: pred.probs,
                predicted: pred.slot,
            })
        })
        .collect()
}
