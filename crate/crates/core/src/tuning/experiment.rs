use serde::{Deserialize, Serialize};

use super::{evaluate, prepare, train, EpochLog, LossConfig, TrainConfig, TuningError};
use crate::data::synthetic::{generate_population, SyntheticPopulationConfig};
use crate::data::{leave_one_out_split, Corpus, Split};
use crate::metrics::SessionEval;
use crate::microvlm::{warm_up, MicroVlm, ModelConfig, WarmupConfig};
use crate::personalization::{PromptBasis, PromptState};

/// How the frozen backbone is obtained: click pre-training on a separate
/// synthetic population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub population: SyntheticPopulationConfig,
    pub warmup: WarmupConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            population: SyntheticPopulationConfig {
                seed: 1000,
                user_prefix: "w".into(),
                ..Default::default()
            },
            warmup: WarmupConfig::default(),
        }
    }
}

/// Builds and warms up a backbone. Returns the model and its warm-up loss trace.
pub fn pretrain_backbone(model: &ModelConfig, cfg: &PretrainConfig) -> Result<(MicroVlm, Vec<f64>), TuningError> {
    let (corpus, _) = generate_population(&cfg.population).map_err(TuningError::Config)?;
    let mut vlm = MicroVlm::new(model.clone())?;
    let trace = warm_up(&mut vlm, &corpus, &cfg.warmup)?;
    Ok((vlm, trace))
}

/// Everything one seed of the train/evaluate protocol produces.
#[derive(Clone, Debug)]
pub struct ProtocolRun {
    pub split: Split,
    pub state: PromptState,
    pub trace: Vec<EpochLog>,
    /// Test sessions under the frozen backbone without a prompt.
    pub backbone: Vec<SessionEval>,
    /// Test sessions under each user's trained prompt.
    pub tuned: Vec<SessionEval>,
}

/// Fresh prompt parameters for every user in `corpus`, seeded by `tc.seed`.
pub fn initial_state(model: &MicroVlm, corpus: &Corpus, tc: &TrainConfig) -> Result<PromptState, TuningError> {
    let basis = PromptBasis::init(tc.num_prompts, tc.soft_tokens, model.config().embed_dim, tc.seed)?;
    let mut state = PromptState::new(basis);
    for u in &corpus.users {
        state.register_user(&u.user)?;
    }
    Ok(state)
}

/// Leave-one-out split, prompt training on the train part and evaluation of
/// backbone and prompts on the held-out part. `tc.seed` drives the split,
/// the basis initialisation and the batch order.
pub fn run_protocol(
    model: &MicroVlm,
    corpus: &Corpus,
    tc: &TrainConfig,
    lc: &LossConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &PromptState) -> Result<(), String>,
) -> Result<ProtocolRun, TuningError> {
    let split = leave_one_out_split(corpus, tc.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus.sessions[i].clone()).collect::<Vec<_>>();
    let eps = lc.epsilon;
    let train_set = prepare(model, corpus, &pick(&split.train), tc.soft_tokens, eps)?;
    let test_set = prepare(model, corpus, &pick(&split.test), tc.soft_tokens, eps)?;
    let mut state = initial_state(model, corpus, tc)?;
    let outcome = train(model, &train_set, &mut state, tc, lc, on_epoch)?;
    let backbone = evaluate(model, &test_set, None, &tc.probe)?;
    let tuned = evaluate(model, &test_set, Some(&state), &tc.probe)?;
    Ok(ProtocolRun {
        split,
        state,
        trace: outcome.trace,
        backbone,
        tuned,
    })
}
