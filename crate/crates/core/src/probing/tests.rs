use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{GazeSession, Layout, Rect, UserProfile};
use crate::microvlm::{build_sequence, ForwardOptions, MicroVlm, ModelConfig, Segment};
use crate::numerics::gradcheck::{check_gradient, random_tensor};

fn row_stochastic(rng: &mut impl Rng, n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = row.iter().sum();
        for j in 0..n {
            t.data_mut()[i * n + j] = row[j] / s;
        }
    }
    t
}

fn close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] = (0..n).map(|k| a.at(i, k) * b.at(k, j)).sum();
        }
    }
    out
}

/// Sums the products along every path `i = k_L → k_{L-1} → … → k_0 = j`.
fn path_sum(layers: &[Tensor], i: usize, j: usize) -> f64 {
    fn walk(layers: &[Tensor], depth: usize, at: usize, j: usize) -> f64 {
        let e = &layers[depth];
        let n = e.rows();
        if depth == 0 {
            return e.at(at, j);
        }
        (0..n).map(|k| e.at(at, k) * walk(layers, depth - 1, k, j)).sum()
    }
    walk(layers, layers.len() - 1, i, j)
}

#[test]
fn rollout_layer_closed_forms() {
    let eye = Tensor::eye(5);
    assert_eq!(rollout_layer(&[eye.clone(), eye.clone()]).unwrap(), eye);

    let n = 4;
    let e = rollout_layer(&[Tensor::full(&[n, n], 0.25)]).unwrap();
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { 0.5 + 0.125 } else { 0.125 };
            assert!((e.at(i, j) - want).abs() < 1e-15);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let heads = [row_stochastic(&mut rng, 7), row_stochastic(&mut rng, 7)];
    let e = rollout_layer(&heads).unwrap();
    for i in 0..7 {
        let s: f64 = e.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        for j in 0..7 {
            let raw = 0.25 * (heads[0].at(i, j) + heads[1].at(i, j)) + if i == j { 0.5 } else { 0.0 };
            assert!((e.at(i, j) - raw).abs() < 1e-12);
        }
    }
}

#[test]
fn rollout_propagation_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert_eq!(rollout_propagate(&[Tensor::eye(3), Tensor::eye(3)]).unwrap().r, Tensor::eye(3));
    let e1 = row_stochastic(&mut rng, 4);
    assert_eq!(rollout_propagate(std::slice::from_ref(&e1)).unwrap().r, e1);
    for _ in 0..100 {
        let l = rng.random_range(1..=3);
        let n = rng.random_range(2..=8);
        let layers: Vec<Tensor> = (0..l).map(|_| row_stochastic(&mut rng, n)).collect();
        let r = rollout_propagate(&layers).unwrap().r;
        for i in 0..n {
            for j in 0..n {
                assert!((r.at(i, j) - path_sum(&layers, i, j)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn attnlrp_layer_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-3;
    let a = row_stochastic(&mut rng, 5);
    let e = attnlrp_layer(std::slice::from_ref(&a), &[Tensor::full(&[5, 5], 1.0)], eps).unwrap();
    close(&e, &a.map(|v| v / (1.0 + eps)), 1e-15);

    let zero = attnlrp_layer(std::slice::from_ref(&a), &[Tensor::zeros(&[5, 5])], eps).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));

    let heads = [row_stochastic(&mut rng, 5), row_stochastic(&mut rng, 5)];
    let grads = [random_tensor(&mut rng, &[5, 5], 1.0), random_tensor(&mut rng, &[5, 5], 1.0)];
    let e = attnlrp_layer(&heads, &grads, eps).unwrap();
    for i in 0..5 {
        let mut want = [0.0; 5];
        for h in 0..2 {
            let w: Vec<f64> = (0..5).map(|j| heads[h].at(i, j) * grads[h].at(i, j)).collect();
            let s: f64 = w.iter().sum();
            let denom = s + eps * if s >= 0.0 { 1.0 } else { -1.0 };
            for j in 0..5 {
                want[j] += 0.5 * w[j] / denom;
            }
        }
        for j in 0..5 {
            assert!((e.at(i, j) - want[j]).abs() < 1e-12);
        }
    }

    let bad = [Tensor::full(&[5, 5], f64::NAN)];
    assert!(matches!(attnlrp_layer(&[a], &bad, eps), Err(ProbeError::NonFinite(_))));
}

#[test]
fn attnlrp_propagation_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(attnlrp_depth_weights(1), vec![1.0]);
    assert_eq!(attnlrp_depth_weights(2), vec![1.0 / 3.0, 2.0 / 3.0]);
    let e1 = random_tensor(&mut rng, &[4, 4], 1.0);
    let r = attnlrp_propagate(std::slice::from_ref(&e1)).unwrap().r;
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(r.at(i, j), e1.at(i, j) + if i == j { 1.0 } else { 0.0 });
        }
    }
    let zeros = vec![Tensor::zeros(&[4, 4]); 3];
    assert_eq!(attnlrp_propagate(&zeros).unwrap().r, Tensor::eye(4));
}

#[test]
fn attnlrp_relevance_is_linear_in_each_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layers: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, &[5, 5], 1.0)).collect();
    let base = attnlrp_propagate(&layers).unwrap().r;
    let beta = attnlrp_depth_weights(3);
    for l in 0..3 {
        let delta = random_tensor(&mut rng, &[5, 5], 1.0);
        for scale in [0.5, 2.0] {
            let mut moved = layers.clone();
            moved[l] = Tensor::new(
                vec![5, 5],
                layers[l].data().iter().zip(delta.data()).map(|(a, d)| a + scale * d).collect(),
            )
            .unwrap();
            let r = attnlrp_propagate(&moved).unwrap().r;
            for k in 0..25 {
                let response = r.data()[k] - base.data()[k];
                assert!((response - beta[l] * scale * delta.data()[k]).abs() < 1e-12);
            }
        }
    }
}

/// Direct evaluation of the head weights from their definition.
fn head_weights(heads: &[Tensor], grads: &[Tensor], tau: f64, eps: f64) -> Vec<f64> {
    let sigma: Vec<f64> = heads
        .iter()
        .zip(grads)
        .map(|(a, g)| {
            let num: f64 = a.data().iter().zip(g.data()).map(|(x, y)| (x * y).max(0.0)).sum();
            let den: f64 = g.data().iter().map(|y| y.max(0.0)).sum();
            num / (den + eps)
        })
        .collect();
    let e: Vec<f64> = sigma.iter().map(|s| (s / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn glimpse_oracle(heads: &[Tensor], grads: &[Tensor], tau: f64, eps: f64) -> Tensor {
    let w = head_weights(heads, grads, tau, eps);
    let n = heads[0].rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let row: Vec<f64> = (0..n)
            .map(|j| (0..heads.len()).map(|h| w[h] * (heads[h].at(i, j) * grads[h].at(i, j)).max(0.0)).sum())
            .collect();
        let s: f64 = row.iter().sum();
        for j in 0..n {
            out.data_mut()[i * n + j] = if s == 0.0 { 1.0 / n as f64 } else { row[j] / s };
        }
    }
    out
}

#[test]
fn glimpse_layer_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let heads = [row_stochastic(&mut rng, 6), row_stochastic(&mut rng, 6)];
        let grads = [random_tensor(&mut rng, &[6, 6], 1.0), random_tensor(&mut rng, &[6, 6], 1.0)];
        let (e, mass) = glimpse_layer(&heads, &grads, 0.7, 1e-8).unwrap();
        close(&e, &glimpse_oracle(&heads, &grads, 0.7, 1e-8), 1e-12);
        let want: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v.abs()).sum();
        assert!((mass - want).abs() < 1e-12);
    }
}

#[test]
fn glimpse_head_weighting_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = row_stochastic(&mut rng, 5);
    let g = random_tensor(&mut rng, &[5, 5], 1.0);
    let w = head_weights(&[a.clone(), a.clone()], &[g.clone(), g.clone()], 1.0, 1e-8);
    assert_eq!(w[0], w[1]);

    // head 0 has gradient only where it does not attend, head 1 is aligned
    let mut sparse = Tensor::zeros(&[5, 5]);
    let mut ortho = Tensor::zeros(&[5, 5]);
    for i in 0..5 {
        sparse.data_mut()[i * 5 + i] = 1.0;
        ortho.data_mut()[i * 5 + (i + 1) % 5] = 1.0;
    }
    let w = head_weights(&[sparse.clone(), a.clone()], &[ortho, Tensor::full(&[5, 5], 1.0)], 1.0, 1e-8);
    assert!(w[1] > 0.5);

    let heads = [row_stochastic(&mut rng, 5), row_stochastic(&mut rng, 5)];
    let grads = [random_tensor(&mut rng, &[5, 5], 1.0), random_tensor(&mut rng, &[5, 5], 1.0)];
    let (hot, _) = glimpse_layer(&heads, &grads, 1e12, 1e-8).unwrap();
    let uniform = {
        let n = 5;
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|j| (0..2).map(|h| 0.5 * (heads[h].at(i, j) * grads[h].at(i, j)).max(0.0)).sum())
                .collect();
            let s: f64 = row.iter().sum();
            for j in 0..n {
                out.data_mut()[i * n + j] = if s == 0.0 { 0.2 } else { row[j] / s };
            }
        }
        out
    };
    close(&hot, &uniform, 1e-9);

    let pos = g.map(f64::abs);
    let (single, _) = glimpse_layer(std::slice::from_ref(&a), std::slice::from_ref(&pos), 1.0, 1e-8).unwrap();
    for i in 0..5 {
        let s: f64 = (0..5).map(|j| a.at(i, j) * pos.at(i, j)).sum();
        for j in 0..5 {
            assert!((single.at(i, j) - a.at(i, j) * pos.at(i, j) / s).abs() < 1e-12);
        }
    }

    // a row where no gradient is aligned with attention becomes uniform
    let mut g2 = pos.clone();
    for j in 0..5 {
        g2.data_mut()[2 * 5 + j] = -1.0;
    }
    let (e, _) = glimpse_layer(&[a], &[g2], 1.0, 1e-8).unwrap();
    assert!(e.row(2).iter().all(|&v| v == 0.2));

    assert!(glimpse_layer(&heads, &grads, 0.0, 1e-8).is_err());
}

#[test]
fn glimpse_propagation_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let e1 = row_stochastic(&mut rng, 4);
    let e2 = row_stochastic(&mut rng, 4);
    let r = glimpse_propagate(&[e1.clone(), e2.clone()], &[0.0, 0.0], 0.5).unwrap().r;
    assert_eq!(r, Tensor::eye(4));

    let r = glimpse_propagate(std::slice::from_ref(&e1), &[3.7], 0.5).unwrap().r;
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(r.at(i, j), e1.at(i, j) + if i == j { 1.0 } else { 0.0 });
        }
    }

    let masses = [2.0, 0.5];
    let alpha = glimpse_depth_weights(&masses, 0.5);
    let p = [0.5f64.exp(), 1.0f64.exp()];
    let raw = [masses[0] * p[0], masses[1] * p[1]];
    assert!((alpha[0] - raw[0] / (raw[0] + raw[1])).abs() < 1e-15);
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-15);

    let r = glimpse_propagate(&[e1.clone(), e2.clone()], &masses, 0.5).unwrap().r;
    let e21 = naive_matmul(&e2, &e1);
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { 1.0 } else { 0.0 }
                + alpha[0] * e1.at(i, j)
                + alpha[1] * e2.at(i, j)
                + alpha[1] * alpha[0] * e21.at(i, j);
            assert!((r.at(i, j) - want).abs() < 1e-12);
        }
    }
}

fn toy_sequence(n: usize, visual: &[usize], slots: Vec<Option<usize>>, num_slots: usize) -> TokenSequence {
    let mut segments = vec![Segment::Instruction; n];
    for &v in visual {
        segments[v] = Segment::Visual;
    }
    segments[n - 1] = Segment::Answer;
    TokenSequence {
        prompt: None,
        patch_features: Tensor::zeros(&[visual.len(), 1]),
        background: Tensor::zeros(&[visual.len(), 1]),
        preference: Tensor::zeros(&[1, 1]),
        segments,
        visual_positions: visual.to_vec(),
        visual_slots: slots,
        num_slots,
        answer_position: n - 1,
    }
}

#[test]
fn visual_extraction_cases() {
    let seq = toy_sequence(6, &[1, 2, 3], vec![Some(0); 3], 1);
    assert_eq!(extract_visual_relevance(&Tensor::eye(6), &seq).unwrap(), vec![0.0; 3]);
    assert_eq!(
        extract_visual_relevance(&Tensor::full(&[6, 6], 1.0 / 6.0), &seq).unwrap(),
        vec![1.0 / 6.0; 3]
    );
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = random_tensor(&mut rng, &[6, 6], 1.0);
    let v = extract_visual_relevance(&r, &seq).unwrap();
    for (k, &p) in [1, 2, 3].iter().enumerate() {
        assert_eq!(v[k], r.data()[5 * 6 + p]);
    }
    let empty = toy_sequence(3, &[], vec![], 1);
    assert!(matches!(extract_visual_relevance(&Tensor::eye(3), &empty), Err(ProbeError::Usage(_))));
}

#[test]
fn slot_aggregation_cases() {
    let layout = Layout::grid("rec", 3, 5, 6, 10);
    let a = aggregate_to_slots(&[0.5; 60], &layout, 1e-8).unwrap();
    assert_eq!(a.layout, "rec");
    for v in &a.values {
        assert!((v - 1.0 / 15.0).abs() < 1e-9);
    }

    let map = layout.patch_slot_map().unwrap();
    let hot: Vec<f64> = map.iter().map(|s| if *s == Some(3) { 0.7 } else { 0.0 }).collect();
    let a = aggregate_to_slots(&hot, &layout, 1e-8).unwrap();
    assert!((a.values[3] - 1.0).abs() < 1e-8);
    assert_eq!(a.values.iter().filter(|&&v| v == 0.0).count(), 14);

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let signed = random_tensor(&mut rng, &[60], 1.0).into_data();
    let a = aggregate_to_slots(&signed, &layout, 1e-8).unwrap();
    let mut sums = [0.0; 15];
    for (k, s) in map.iter().enumerate() {
        sums[s.unwrap()] += signed[k];
    }
    let clamped: Vec<f64> = sums.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum::<f64>() + 1e-8;
    for n in 0..15 {
        assert!((a.values[n] - clamped[n] / total).abs() < 1e-12);
    }

    let sparse = Layout {
        id: "s".into(),
        slots: vec![Rect { x: 0.0, y: 0.0, w: 0.5, h: 1.0 }],
        patch_grid: [1, 4],
    };
    assert!(matches!(
        aggregate_to_slots(&[1.0; 4], &sparse, 1e-8),
        Err(ProbeError::UnmappedPatch(2))
    ));
}


fn model_fixture(prompt_rows: usize) -> (MicroVlm, TokenSequence, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = MicroVlm::new(ModelConfig::default()).unwrap();
    let layout = Layout::grid("rec", 3, 5, 6, 10);
    let session = GazeSession {
        user: "u".into(),
        session: "s".into(),
        layout: "rec".into(),
        items: (0..15).map(|_| random_tensor(&mut rng, &[8], 1.0).into_data()).collect(),
        dwell_ms: vec![1.0; 15],
        click: 0,
    };
    let profile = UserProfile {
        user: "u".into(),
        preference: random_tensor(&mut rng, &[8], 1.0).into_data(),
    };
    let prompt = random_tensor(&mut rng, &[prompt_rows, 32], 0.5);
    let seq = build_sequence(model.config(), Some(&prompt), &session, &layout, &profile).unwrap();
    (model, seq, layout)
}

fn config(op: Operator) -> ProbeConfig {
    ProbeConfig {
        operator: op,
        ..ProbeConfig::default()
    }
}

#[test]
fn answer_row_path_matches_full_propagation() {
    let (model, seq, layout) = model_fixture(16);
    let out = model.forward(&seq, true).unwrap();
    for op in Operator::ALL {
        let cfg = config(op);
        let full = probe(&out.record, &seq, &layout, &cfg).unwrap();
        let s: f64 = full.slots.values.iter().sum();
        assert!(full.slots.values.iter().all(|&v| v >= 0.0) && (s - 1.0).abs() < 1e-6, "{op}");

        let mut tape = Tape::new();
        let att: Vec<Vec<Var>> = out
            .record
            .attention
            .iter()
            .map(|l| l.iter().map(|a| tape.constant(a.clone())).collect())
            .collect();
        let fast = probe_on_tape(&mut tape, &att, out.record.gradients.as_deref(), &seq, &cfg).unwrap();
        for (a, b) in tape.value(fast).data().iter().zip(&full.slots.values) {
            assert!((a - b).abs() < 1e-12, "{op}: {a} vs {b}");
        }
    }
    let mut bare = out.record.clone();
    bare.gradients = None;
    assert!(probe(&bare, &seq, &layout, &config(Operator::Glimpse)).is_err());
    assert!(probe(&bare, &seq, &layout, &config(Operator::Rollout)).is_ok());
}

#[test]
fn visual_order_does_not_change_slot_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 9;
    let visual = [1usize, 2, 3, 4, 5, 6];
    let slots = vec![Some(0), Some(1), Some(2), Some(0), Some(1), Some(2)];
    let perm = [4usize, 0, 5, 2, 1, 3]; // new visual k takes old visual perm[k]
    let mut token_perm: Vec<usize> = (0..n).collect();
    for (k, &p) in perm.iter().enumerate() {
        token_perm[visual[k]] = visual[p];
    }
    let conj = |t: &Tensor| {
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                out.data_mut()[i * n + j] = t.at(token_perm[i], token_perm[j]);
            }
        }
        out
    };
    let heads: Vec<Vec<Tensor>> = (0..2).map(|_| (0..2).map(|_| row_stochastic(&mut rng, n)).collect()).collect();
    let grads: Vec<Vec<Tensor>> = (0..2)
        .map(|_| (0..2).map(|_| random_tensor(&mut rng, &[n, n], 1.0)).collect())
        .collect();
    let heads_p: Vec<Vec<Tensor>> = heads.iter().map(|l| l.iter().map(conj).collect()).collect();
    let grads_p: Vec<Vec<Tensor>> = grads.iter().map(|l| l.iter().map(conj).collect()).collect();
    let seq = toy_sequence(n, &visual, slots.clone(), 3);
    let seq_p = toy_sequence(n, &visual, perm.iter().map(|&p| slots[p]).collect(), 3);

    let run = |h: &[Vec<Tensor>], g: &[Vec<Tensor>], s: &TokenSequence, cfg: &ProbeConfig| {
        let mut tape = Tape::new();
        let att: Vec<Vec<Var>> = h.iter().map(|l| l.iter().map(|a| tape.constant(a.clone())).collect()).collect();
        let v = probe_on_tape(&mut tape, &att, Some(g), s, cfg).unwrap();
        tape.value(v).data().to_vec()
    };
    for op in Operator::ALL {
        let cfg = config(op);
        let a = run(&heads, &grads, &seq, &cfg);
        let b = run(&heads_p, &grads_p, &seq_p, &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{op}: {a:?} vs {b:?}");
        }
    }
}

#[test]
fn slot_distribution_is_differentiable_in_the_prompt() {
    let (model, seq, _) = model_fixture(4);
    let base = model.forward(&seq, true).unwrap();
    let grads = base.record.gradients.clone().unwrap();
    let prompt = seq.prompt.clone().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let weights = random_tensor(&mut rng, &[1, 15], 1.0);
    for op in Operator::ALL {
        let cfg = config(op);
        let err = check_gradient(std::slice::from_ref(&prompt), 1e-5, |tape, vars| {
            let p = model.register(tape, false);
            let out = model
                .forward_on_tape(tape, &p, &seq, Some(vars[0]), ForwardOptions::default())
                .map_err(|e| NumericsError::Usage(e.to_string()))?;
            let a = probe_on_tape(tape, &out.attention, Some(&grads), &seq, &cfg)
                .map_err(|e| NumericsError::Usage(e.to_string()))?;
            let w = tape.constant(weights.clone());
            let wa = tape.mul(a, w)?;
            tape.sum(wa)
        })
        .unwrap();
        assert!(err < 1e-4, "{op}: max rel err {err}");
    }
}

#[test]
fn operator_names_round_trip() {
    for op in Operator::ALL {
        assert_eq!(op.name().parse::<Operator>().unwrap(), op);
        assert_eq!(serde_json::to_string(&op).unwrap(), format!("\"{}\"", op.name()));
    }
    assert!("gradcam".parse::<Operator>().is_err());
    assert!(ProbeConfig {
        epsilon: 0.0,
        ..ProbeConfig::default()
    }
    .validate()
    .is_err());
}

proptest! {
    #[test]
    fn rollout_relevance_rows_sum_to_one(seed in 0u64..10_000, l in 1usize..=3, n in 2usize..=8, h in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<Tensor> = (0..l)
            .map(|_| {
                let heads: Vec<Tensor> = (0..h).map(|_| row_stochastic(&mut rng, n)).collect();
                rollout_layer(&heads).unwrap()
            })
            .collect();
        let r = rollout_propagate(&layers).unwrap().r;
        for i in 0..n {
            let s: f64 = r.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
