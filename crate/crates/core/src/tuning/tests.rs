use super::*;
use crate::data::synthetic::{generate_population, SyntheticPopulationConfig};
use crate::microvlm::{predict_slot, target_scalar, ForwardOptions, MicroVlm, ModelConfig};
use crate::personalization::{compose_on_tape, PromptBasis, PromptState};
use crate::probing::{probe_on_tape, Operator};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

struct Fixture {
    model: MicroVlm,
    data: Vec<PreparedSession>,
    state: PromptState,
}

fn fixture(users: usize, sessions: usize, soft: usize, prompts: usize) -> Fixture {
    let (corpus, _) = generate_population(&SyntheticPopulationConfig {
        num_users: users,
        num_sessions: sessions,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let model = MicroVlm::new(ModelConfig::default()).unwrap();
    let data = prepare(&model, &corpus, &corpus.sessions, soft, 1e-8).unwrap();
    let mut state = PromptState::new(PromptBasis::init(prompts, soft, 32, 5).unwrap());
    for u in &corpus.users {
        state.register_user(&u.user).unwrap();
    }
    Fixture { model, data, state }
}

fn small_train(soft: usize, prompts: usize) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        soft_tokens: soft,
        num_prompts: prompts,
        ..Default::default()
    }
}

fn no_callback() -> impl FnMut(&EpochLog, &PromptState) -> Result<(), String> {
    |_, _| Ok(())
}

#[test]
fn fixation_normalization() {
    let g = normalize_fixation(&[2.0, 1.0, 1.0, 0.0], 1e-12).unwrap();
    for (x, y) in g.iter().zip([0.5, 0.25, 0.25, 0.0]) {
        assert!(close(*x, y, 1e-12));
    }
    assert_eq!(normalize_fixation(&[0.0; 5], 1e-8).unwrap(), vec![0.0; 5]);
    let g = normalize_fixation(&[1.0], 1e-8).unwrap();
    assert!(1.0 - g[0] > 0.0 && 1.0 - g[0] < 1e-6);
    assert!(matches!(
        normalize_fixation(&[1.0, -2.0], 1e-8),
        Err(TuningError::Data(crate::data::DataError::NegativeDwell { slot: 1, .. }))
    ));
}

#[test]
fn importance_weight_examples() {
    let w = importance_weights(&[0.5, 0.25, 0.25], 2.0, 0.0);
    // 0.25 / (0.25 + 2·0.0625)
    assert!(close(w[0], 2.0 / 3.0, 1e-15) && close(w[1], 1.0 / 6.0, 1e-15) && close(w[2], 1.0 / 6.0, 1e-15));
    assert_eq!(importance_weights(&[0.7, 0.2, 0.1], 0.0, 1e-8), vec![1.0 / 3.0; 3]);
    let sharp = importance_weights(&[0.4, 0.35, 0.25], 200.0, 1e-8);
    assert!(sharp[0] > 1.0 - 1e-9);
}

#[test]
fn attn_loss_examples() {
    let cfg = LossConfig::default();
    let g = [0.5, 0.3, 0.2, 0.0];
    assert_eq!(attn_loss_value(&g, &g, &cfg).unwrap(), 0.0);

    let a = [0.1, 0.2, 0.3, 0.4];
    let flat = LossConfig { gamma: 0.0, ..cfg.clone() };
    let oracle: f64 = g.iter().zip(&a).filter(|(gn, _)| **gn > 0.0).map(|(gn, an)| gn * (gn / an).ln()).sum();
    assert!(close(attn_loss_value(&a, &g, &flat).unwrap(), oracle / 4.0, 1e-12));
    let plain = LossConfig {
        use_importance_weights: false,
        ..cfg.clone()
    };
    assert!(close(attn_loss_value(&a, &g, &plain).unwrap(), oracle, 1e-12));

    // the ε floor keeps a zero attention slot finite
    let v = attn_loss_value(&[0.0, 0.5, 0.5, 0.0], &g, &plain).unwrap();
    assert!(v.is_finite() && v > 0.0);
    assert!(matches!(attn_loss_value(&a[..3], &g, &cfg), Err(TuningError::Config(_))));
}

#[test]
fn ntp_and_total_loss() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[1, 47]));
    let l = ntp_loss(&mut tape, logits, 3, 15).unwrap();
    assert!(close(tape.value(l).item(), 15f64.ln(), 1e-12));

    let raw: Vec<f64> = (0..47).map(|i| ((i * 7919) % 13) as f64 * 0.3 - 1.0).collect();
    let pred = predict_slot(&raw, 15);
    let logits = tape.constant(Tensor::new(vec![1, 47], raw).unwrap());
    for c in [0, 6, 14] {
        let l = ntp_loss(&mut tape, logits, c, 15).unwrap();
        assert!(close(tape.value(l).item(), -pred.probs[c].ln(), 1e-12));
    }
    assert!(ntp_loss(&mut tape, logits, 15, 15).is_err());

    let mut hot = vec![0.0; 47];
    hot[2] = 800.0;
    let logits = tape.constant(Tensor::new(vec![1, 47], hot).unwrap());
    let l = ntp_loss(&mut tape, logits, 2, 15).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let n = tape.constant(Tensor::scalar(1.0));
    let a = tape.constant(Tensor::scalar(0.5));
    let t = total_loss(&mut tape, Some(n), Some(a), 2.0).unwrap();
    assert_eq!(tape.value(t).item(), 2.0);
    let t = total_loss(&mut tape, Some(n), Some(a), 0.0).unwrap();
    assert_eq!(tape.value(t).item(), 1.0);
    assert!(total_loss(&mut tape, None, None, 1.0).is_err());

    let off = LossConfig {
        use_attn_loss: false,
        use_ntp_loss: false,
        ..Default::default()
    };
    assert!(matches!(off.validate(), Err(TuningError::Config(_))));
}

#[test]
fn ablation_switches() {
    for a in Ablation::ALL {
        assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        let (mut t, mut l) = (TrainConfig::default(), LossConfig::default());
        a.apply(&mut t, &mut l);
        let changed = [
            !t.train_basis,
            !t.train_logits,
            !l.use_importance_weights,
            !l.use_attn_loss,
            !l.use_ntp_loss,
        ];
        assert_eq!(changed.iter().filter(|c| **c).count(), if a == Ablation::RandSp { 2 } else { 1 });
    }
    assert!("w/o-omega".parse::<Ablation>().is_err());
}

/// Raw slot relevance → normalised distribution → loss, with answer logits.
fn fixed_point_grads(g: &[f64], click: usize, cfg: &LossConfig) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let r = tape.leaf(Tensor::new(vec![1, g.len()], g.iter().map(|v| 100.0 * v).collect()).unwrap());
    let clamped = tape.clamp_min(r, 0.0).unwrap();
    let a = tape.l1_normalize(clamped, 1e-8).unwrap();
    let mut raw = vec![0.0; 47];
    raw[click] = 60.0;
    let logits = tape.leaf(Tensor::new(vec![1, 47], raw).unwrap());
    let attn = attn_loss(&mut tape, a, g, cfg).unwrap();
    let ntp = ntp_loss(&mut tape, logits, click, g.len()).unwrap();
    let total = total_loss(&mut tape, Some(ntp), Some(attn), cfg.lambda).unwrap();
    tape.backward(total).unwrap();
    (tape.grad(r).unwrap(), tape.grad(logits).unwrap())
}

#[test]
fn zero_loss_fixed_point() {
    let g = [0.4, 0.3, 0.2, 0.1, 0.0];
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    // unweighted and γ = 0: a = g with a certain click is stationary
    for cfg in [
        LossConfig {
            use_importance_weights: false,
            ..Default::default()
        },
        LossConfig {
            gamma: 0.0,
            ..Default::default()
        },
    ] {
        let (gr, gl) = fixed_point_grads(&g, 1, &cfg);
        assert!(norm(&gr) < 1e-9 && norm(&gl) < 1e-9, "{} {}", norm(&gr), norm(&gl));
    }
    // one-hot gaze is stationary under any power
    let hot = [0.0, 0.0, 1.0, 0.0];
    let (gr, gl) = fixed_point_grads(&hot, 2, &LossConfig::default());
    assert!(norm(&gr) < 1e-9 && norm(&gl) < 1e-9);
    // the power weights move the optimum away from a = g for graded gaze
    let (gr, _) = fixed_point_grads(&g, 1, &LossConfig::default());
    assert!(norm(&gr) > 1e-3);
}

#[test]
fn single_sample_descent_and_frozen_backbone() {
    let f = fixture(1, 1, 4, 2);
    let before: Vec<_> = f.model.parameters().to_vec();
    for op in Operator::ALL {
        let mut tc = small_train(4, 2);
        tc.probe.operator = op;
        tc.learning_rate = 1e-4;
        let lc = LossConfig::default();
        let mut state = f.state.clone();
        let z0 = state.user_logits(&f.data[0].user).unwrap().to_vec();
        let l0 = sample_gradients(&f.model, &f.data[0], &state.basis.flat(), &z0, &tc, &lc).unwrap().total;
        let out = train(&f.model, &f.data, &mut state, &tc, &lc, &mut no_callback()).unwrap();
        assert_eq!(out.steps, 1);
        let z1 = state.user_logits(&f.data[0].user).unwrap().to_vec();
        let l1 = sample_gradients(&f.model, &f.data[0], &state.basis.flat(), &z1, &tc, &lc).unwrap().total;
        assert!(l1 <= l0, "{op}: {l1} > {l0}");
        assert_ne!(state, f.state);
    }
    assert_eq!(f.model.parameters(), &before[..]);
}

#[test]
fn first_step_matches_adam_oracle_and_accumulation() {
    let f = fixture(2, 8, 4, 2);
    let lc = LossConfig::default();
    let mut tc = small_train(4, 2);
    tc.batch_size = 8;
    tc.grad_accum_steps = 1;

    // mean per-sample gradient, then the first Adam step: Δ = −lr·g/(|g| + ε)
    let basis0 = f.state.basis.flat();
    let mut mean = vec![0.0; basis0.len()];
    for s in &f.data {
        let z = f.state.user_logits(&s.user).unwrap();
        let g = sample_gradients(&f.model, s, &basis0, z, &tc, &lc).unwrap();
        for (m, v) in mean.iter_mut().zip(g.basis.data()) {
            *m += v / 8.0;
        }
    }
    let mut one = f.state.clone();
    train(&f.model, &f.data, &mut one, &tc, &lc, &mut no_callback()).unwrap();
    let moved = one.basis.flat();
    for ((b1, b0), g) in moved.data().iter().zip(basis0.data()).zip(&mean) {
        let expect = b0 - tc.learning_rate * g / (g.abs() + 1e-8);
        assert!(close(*b1, expect, 1e-12), "{b1} vs {expect}");
    }

    let mut two = f.state.clone();
    tc.batch_size = 4;
    tc.grad_accum_steps = 2;
    let out = train(&f.model, &f.data, &mut two, &tc, &lc, &mut no_callback()).unwrap();
    assert_eq!(out.steps, 1);
    for (a, b) in one.basis.flat().data().iter().zip(two.basis.flat().data()) {
        assert!(close(*a, *b, 1e-9));
    }
    for (u, z) in &one.logits {
        for (a, b) in z.iter().zip(&two.logits[u]) {
            assert!(close(*a, *b, 1e-9));
        }
    }
}

#[test]
fn training_is_deterministic_and_traced() {
    let f = fixture(2, 6, 4, 2);
    let mut tc = small_train(4, 2);
    tc.epochs = 2;
    tc.probe.operator = Operator::Rollout;
    let lc = LossConfig::default();
    let run = || {
        let mut s = f.state.clone();
        let mut seen = Vec::new();
        let out = train(&f.model, &f.data, &mut s, &tc, &lc, &mut |log, _| {
            seen.push(log.epoch);
            Ok(())
        })
        .unwrap();
        (s, out.trace, seen)
    };
    let (s1, t1, seen) = run();
    let (s2, t2, _) = run();
    assert_eq!(s1, s2);
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(t1.len(), 2);
    for (a, b) in t1.iter().zip(&t2) {
        assert_eq!((a.ntp, a.attn, a.total), (b.ntp, b.attn, b.total));
        assert!(close(a.total, a.ntp.unwrap() + a.attn.unwrap(), 1e-9));
    }
    let json = serde_json::to_value(&t1[0]).unwrap();
    for key in ["epoch", "L_NTP", "L_Attn", "L_total", "wall_ms"] {
        assert!(json.get(key).is_some(), "{key}");
    }

    let mut s = f.state.clone();
    let err = train(&f.model, &f.data, &mut s, &tc, &lc, &mut |_, _| Err("disk full".into())).unwrap_err();
    assert!(matches!(err, TuningError::Callback(m) if m == "disk full"));
}

#[test]
fn training_rejects_bad_inputs() {
    let f = fixture(2, 4, 4, 2);
    let tc = small_train(4, 2);
    let lc = LossConfig::default();

    let mut s = f.state.clone();
    s.basis.blocks.data_mut()[3] = f64::NAN;
    match train(&f.model, &f.data, &mut s, &tc, &lc, &mut no_callback()) {
        Err(TuningError::NonFiniteLoss { epoch, session }) => {
            assert_eq!(epoch, 1);
            assert!(f.data.iter().any(|d| d.session == session));
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }

    let mut lonely = PromptState::new(f.state.basis.clone());
    lonely.register_user(&f.data[0].user).unwrap();
    let other = f.data.iter().find(|d| d.user != f.data[0].user).unwrap().user.clone();
    let err = train(&f.model, &f.data, &mut lonely, &tc, &lc, &mut no_callback()).unwrap_err();
    assert!(err.to_string().contains(&other));

    let mut s = f.state.clone();
    let wrong = small_train(5, 2);
    assert!(matches!(
        train(&f.model, &f.data, &mut s, &wrong, &lc, &mut no_callback()),
        Err(TuningError::Config(_))
    ));

    let mut frozen = tc.clone();
    frozen.probe.differentiable = false;
    assert!(train(&f.model, &f.data, &mut s, &frozen, &lc, &mut no_callback()).is_err());

    let mut rand_sp = tc.clone();
    let mut lc2 = lc.clone();
    Ablation::RandSp.apply(&mut rand_sp, &mut lc2);
    let out = train(&f.model, &f.data, &mut s, &rand_sp, &lc2, &mut no_callback()).unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(s, f.state);
}

#[test]
fn shared_mixture_leaves_logits_untouched() {
    let f = fixture(2, 4, 4, 2);
    let (mut tc, mut lc) = (small_train(4, 2), LossConfig::default());
    Ablation::SharedZ.apply(&mut tc, &mut lc);
    let mut s = f.state.clone();
    train(&f.model, &f.data, &mut s, &tc, &lc, &mut no_callback()).unwrap();
    assert_eq!(s.logits, f.state.logits);
    assert_ne!(s.basis, f.state.basis);
}

/// Alignment loss at `basis`, with the answer-token gradients either taken
/// from this forward pass or held at `fixed`.
fn attn_only(
    f: &Fixture,
    basis: &Tensor,
    z: &[f64],
    op: Operator,
    fixed: Option<&[Vec<Tensor>]>,
) -> (f64, Vec<Vec<Tensor>>) {
    let sess = &f.data[0];
    let cfg = crate::probing::ProbeConfig {
        operator: op,
        ..Default::default()
    };
    let mut tape = Tape::new();
    let params = f.model.register(&mut tape, false);
    let b = tape.constant(basis.clone());
    let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec()).unwrap());
    let (prompt, _) = compose_on_tape(&mut tape, b, zv, sess.seq.soft_len(), 32).unwrap();
    let out = f
        .model
        .forward_on_tape(
            &mut tape,
            &params,
            &sess.seq,
            Some(prompt),
            ForwardOptions {
                watch_attention: true,
                ..Default::default()
            },
        )
        .unwrap();
    let token = predict_slot(tape.value(out.logits).data(), 15).slot;
    let s = target_scalar(&mut tape, out.logits, token).unwrap();
    tape.backward(s).unwrap();
    let grads: Vec<Vec<Tensor>> = out
        .attention
        .iter()
        .map(|l| l.iter().map(|&a| tape.grad(a).unwrap()).collect())
        .collect();
    let use_grads = fixed.map(<[_]>::to_vec).unwrap_or_else(|| grads.clone());
    let a = probe_on_tape(&mut tape, &out.attention, Some(&use_grads), &sess.seq, &cfg).unwrap();
    let l = attn_loss(&mut tape, a, &sess.gaze, &LossConfig::default()).unwrap();
    (tape.value(l).item(), grads)
}

#[test]
fn alignment_gradient_matches_finite_differences() {
    let f = fixture(1, 1, 3, 2);
    let lc = LossConfig {
        use_ntp_loss: false,
        ..Default::default()
    };
    let basis = f.state.basis.flat();
    let z = vec![0.3, -0.2];
    for op in Operator::ALL {
        let mut tc = small_train(3, 2);
        tc.probe.operator = op;
        let an = sample_gradients(&f.model, &f.data[0], &basis, &z, &tc, &lc).unwrap();
        let (_, g0) = attn_only(&f, &basis, &z, op, None);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in [0, 7, 40, 95, 131, 190] {
            let mut p = basis.clone();
            p.data_mut()[idx] += h;
            let mut m = basis.clone();
            m.data_mut()[idx] -= h;
            let fd = (attn_only(&f, &p, &z, op, Some(&g0)).0 - attn_only(&f, &m, &z, op, Some(&g0)).0) / (2.0 * h);
            let a = an.basis.data()[idx];
            worst = worst.max((a - fd).abs() / fd.abs().max(a.abs()).max(1e-6));
        }
        for k in 0..2 {
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            let fd = (attn_only(&f, &basis, &zp, op, Some(&g0)).0 - attn_only(&f, &basis, &zm, op, Some(&g0)).0) / (2.0 * h);
            let a = an.logits[k];
            worst = worst.max((a - fd).abs() / fd.abs().max(a.abs()).max(1e-6));
        }
        assert!(worst < 1e-3, "{op}: relative error {worst}");
    }
}
