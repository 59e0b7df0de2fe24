use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sequence::build_sequence;
use super::{ForwardOptions, MicroVlm, ModelError};
use crate::data::Corpus;
use crate::numerics::{Adam, Tape, Tensor};

/// Click-prediction pre-training that gives a fresh backbone nonuniform behaviour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Trains every backbone parameter on the corpus clicks without any soft
/// prompt. Returns the mean click log-loss of each epoch.
pub fn warm_up(model: &mut MicroVlm, corpus: &Corpus, cfg: &WarmupConfig) -> Result<Vec<f64>, ModelError> {
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("warm-up batch size must be positive".into()));
    }
    let mut seqs = Vec::with_capacity(corpus.sessions.len());
    for s in &corpus.sessions {
        let layout = corpus
            .layout(&s.layout)
            .ok_or_else(|| ModelError::Config(format!("session {}: unknown layout {}", s.session, s.layout)))?;
        let user = corpus
            .user(&s.user)
            .ok_or_else(|| ModelError::Config(format!("session {}: unknown user {}", s.session, s.user)))?;
        seqs.push((build_sequence(&model.config, None, s, layout, user)?, s.click));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Tensor> = model.params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
            for &i in batch {
                let (seq, click) = &seqs[i];
                let mut tape = Tape::new();
                let p = model.register(&mut tape, true);
                let out = model.forward_on_tape(&mut tape, &p, seq, None, ForwardOptions::default())?;
                let answers = tape.slice_cols(out.logits, 0, seq.num_slots)?;
                let logp = tape.log_softmax_rows(answers)?;
                let picked = tape.gather(logp, &[*click])?;
                let loss = tape.scale(picked, -1.0)?;
                let loss = tape.sum(loss)?;
                total += tape.value(loss).item();
                tape.backward(loss)?;
                for (g, v) in grads.iter_mut().zip(&p.0) {
                    if let Some(d) = tape.grad(*v) {
                        for (a, b) in g.data_mut().iter_mut().zip(d.data()) {
                            *a += b / batch.len() as f64;
                        }
                    }
                }
            }
            let mut params: Vec<&mut Tensor> = model.parameters_mut().collect();
            opt.step(&mut params, &grads);
        }
        trace.push(total / seqs.len().max(1) as f64);
    }
    Ok(trace)
}
