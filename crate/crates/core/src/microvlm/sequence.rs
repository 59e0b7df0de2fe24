use serde::Serialize;

use super::{MicroVlm, ModelConfig, ModelError};
use crate::data::{GazeSession, Layout, UserProfile};
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Soft,
    Visual,
    Profile,
    Instruction,
    Answer,
}

/// Model input for one session, before embedding.
///
/// The soft prompt is carried by value here; training passes it to the
/// forward pass as a tape variable instead.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub prompt: Option<Tensor>,
    /// `[patches, feature_dim]`: features of the item under each patch, zero for background.
    pub patch_features: Tensor,
    /// `[patches, 1]`: 1 for background patches.
    pub background: Tensor,
    pub preference: Tensor,
    pub segments: Vec<Segment>,
    /// Sequence positions of the visual tokens, in patch row-major order.
    pub visual_positions: Vec<usize>,
    /// Slot under each visual token.
    pub visual_slots: Vec<Option<usize>>,
    pub num_slots: usize,
    pub answer_position: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn soft_len(&self) -> usize {
        self.prompt.as_ref().map_or(0, |p| p.rows())
    }

    /// Replaces the soft prompt, shifting every later position.
    pub fn with_prompt(&self, prompt: Option<Tensor>) -> Self {
        let old = self.soft_len();
        let new = prompt.as_ref().map_or(0, |p| p.rows());
        let mut segments = vec![Segment::Soft; new];
        segments.extend_from_slice(&self.segments[old..]);
        Self {
            prompt,
            segments,
            visual_positions: self.visual_positions.iter().map(|p| p - old + new).collect(),
            answer_position: self.answer_position - old + new,
            ..self.clone()
        }
    }

    /// Input embeddings `[len, d]` under the given model.
    pub fn embeddings(&self, model: &MicroVlm) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let params = model.register(&mut tape, false);
        let prompt = self.prompt.clone().map(|p| tape.constant(p));
        let x = super::forward::embed(&mut tape, model.config(), &params, self, prompt)?;
        Ok(tape.value(x).clone())
    }
}

/// Lays out the token sequence for one session.
pub fn build_sequence(
    config: &ModelConfig,
    prompt: Option<&Tensor>,
    session: &GazeSession,
    layout: &Layout,
    profile: &UserProfile,
) -> Result<TokenSequence, ModelError> {
    let cfg_err = |m: String| Err(ModelError::Config(m));
    if layout.patch_grid != [config.patch_rows, config.patch_cols] {
        return cfg_err(format!(
            "layout {} has patch grid {:?}, model expects [{}, {}]",
            layout.id, layout.patch_grid, config.patch_rows, config.patch_cols
        ));
    }
    let n = layout.num_slots();
    if n > config.num_answer_tokens {
        return cfg_err(format!("layout {} has {n} slots, model has {} answer tokens", layout.id, config.num_answer_tokens));
    }
    if session.items.len() != n || session.num_slots() != n {
        return cfg_err(format!("session {} does not match layout {}", session.session, layout.id));
    }
    let f = config.feature_dim;
    if let Some(bad) = session.items.iter().find(|it| it.len() != f) {
        return cfg_err(format!("session {}: item feature length {} != {f}", session.session, bad.len()));
    }
    if profile.preference.len() != f {
        return cfg_err(format!("user {}: preference length {} != {f}", profile.user, profile.preference.len()));
    }
    if let Some(p) = prompt {
        if p.rank() != 2 || p.cols() != config.embed_dim {
            return cfg_err(format!("prompt shape {:?} does not have width {}", p.shape(), config.embed_dim));
        }
    }

    let map = layout.patch_slot_map()?;
    let patches = map.len();
    let mut features = Vec::with_capacity(patches * f);
    let mut background = Vec::with_capacity(patches);
    for slot in &map {
        match slot {
            Some(s) => {
                features.extend_from_slice(&session.items[*s]);
                background.push(0.0);
            }
            None => {
                features.extend(std::iter::repeat_n(0.0, f));
                background.push(1.0);
            }
        }
    }

    let soft = prompt.map_or(0, |p| p.rows());
    let mut segments = vec![Segment::Soft; soft];
    segments.extend(std::iter::repeat_n(Segment::Visual, patches));
    segments.extend(std::iter::repeat_n(Segment::Profile, config.profile_tokens));
    segments.extend(std::iter::repeat_n(Segment::Instruction, config.instruction_tokens));
    segments.push(Segment::Answer);
    let max = config.max_sequence_len();
    if segments.len() > max {
        return Err(ModelError::Capacity {
            len: segments.len(),
            max,
        });
    }

    Ok(TokenSequence {
        prompt: prompt.cloned(),
        patch_features: Tensor::new(vec![patches, f], features)?,
        background: Tensor::new(vec![patches, 1], background)?,
        preference: Tensor::new(vec![1, f], profile.preference.clone())?,
        answer_position: segments.len() - 1,
        visual_positions: (soft..soft + patches).collect(),
        visual_slots: map,
        num_slots: n,
        segments,
    })
}
