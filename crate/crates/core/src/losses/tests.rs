use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{DecoderConfig, SoftPrompt, ToyCausalDecoder};
use crate::params::ParamSet;
use crate::tensor::{Array, Graph};

fn sched(sharpness: f64, midpoint: u64) -> ScheduleParams {
    ScheduleParams {
        sharpness,
        midpoint,
        ..ScheduleParams::default()
    }
}

fn scalar<'g>(g: &'g Graph<f64>, v: f64) -> Tensor<'g, f64> {
    g.variable(Array::scalar(v)).unwrap()
}

#[test]
fn alpha_values() {
    let s = sched(0.1, 100);
    assert_eq!(alpha(100, &s), 0.5);
    assert!((alpha(120, &s) - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
    assert!((alpha(120, &s) - 0.88080).abs() < 1e-5);
    assert!(alpha(240, &s) > 1.0 - 1e-6);
    assert!(alpha(0, &s) < 1e-4);
}

#[test]
fn alpha_is_monotone() {
    for l in [0.01, 0.1, 1.0] {
        let s = sched(l, 1500);
        let mut prev = alpha(0, &s);
        for t in 1..=10_000 {
            let a = alpha(t, &s);
            assert!(a >= prev, "λ={l} t={t}");
            prev = a;
        }
    }
}

#[test]
fn schedule_validation() {
    assert!(ScheduleParams::default().validate().is_ok());
    assert!(sched(0.0, 1).validate().is_err());
    let bad = ScheduleParams {
        balance_weight: -1.0,
        ..ScheduleParams::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn phase1_combination() {
    let g = Graph::<f64>::new();
    let s = sched(0.1, 100);
    let l = phase1_loss(scalar(&g, 2.0), scalar(&g, 4.0), 100, &s).unwrap();
    assert_eq!(l.item(), 4.0);
    let l = phase1_loss(scalar(&g, 1.0), scalar(&g, 1.0), 120, &s).unwrap();
    assert!((l.item() - 1.88080).abs() < 1e-5);
    let early = phase1_loss(scalar(&g, 1.0), scalar(&g, 5.0), 0, &sched(1.0, 100)).unwrap();
    assert!((early.item() - 1.0).abs() < 1e-12);
}

#[test]
fn phase2_combination() {
    let g = Graph::<f64>::new();
    let s = ScheduleParams::default();
    let l = phase2_loss(scalar(&g, 1.0), scalar(&g, 2.0), scalar(&g, 3.0), &s).unwrap();
    assert!((l.item() - 3.03).abs() < 1e-12);
    let zero = ScheduleParams {
        align_weight: 0.0,
        balance_weight: 0.0,
        ..s
    };
    let l = phase2_loss(scalar(&g, 1.5), scalar(&g, 2.0), scalar(&g, 3.0), &zero).unwrap();
    assert_eq!(l.item(), 1.5);
}

#[test]
fn captioning_from_logits_matches_hand_values() {
    let logits: [[f64; 3]; 2] = [[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]];
    let targets = [1usize, 2];
    let mut expected = 0.0;
    for (row, &t) in logits.iter().zip(&targets) {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        expected -= row[t] - z.ln();
    }
    expected /= 2.0;
    let g = Graph::<f64>::new();
    let flat: Vec<f64> = logits.iter().flatten().copied().collect();
    let t = g.variable(Array::new([2, 3], flat).unwrap()).unwrap();
    let l = captioning_loss_from_logits(t, &targets, None).unwrap();
    assert!((l.item() - expected).abs() < 1e-10);
}

#[test]
fn captioning_masks_padding() {
    let g = Graph::<f64>::new();
    let t = g
        .variable(Array::new([3, 3], vec![1.0, 2.0, 0.5, 0.0, -1.0, 3.0, 9.0, 9.0, 9.0]).unwrap())
        .unwrap();
    let with_pad = captioning_loss_from_logits(t, &[1, 2, 0], Some(0)).unwrap();
    let t2 = t.slice(0, 0, 2).unwrap();
    let without = captioning_loss_from_logits(t2, &[1, 2], Some(0)).unwrap();
    assert!((with_pad.item() - without.item()).abs() < 1e-14);
    assert!(captioning_loss_from_logits(t, &[0, 0, 0], Some(0)).is_err());
    assert!(captioning_loss_from_logits(t, &[0, 0], None).is_err());
}

#[test]
fn captioning_uniform_decoder_is_log_v() {
    let mut ps = ParamSet::<f64>::new();
    let cfg = DecoderConfig {
        vocab: 10,
        dim: 8,
        heads: 2,
        layers: 1,
        ffn_mult: 2,
        max_positions: 16,
        eos: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dec = ToyCausalDecoder::new(&mut ps, &mut rng, "dec", cfg);
    let table = ps.get(dec.tokens).clone();
    let prompt = SoftPrompt::from_instruction(&mut ps, "prompt", &table, &[2, 3], 3).unwrap();
    *ps.get_mut(dec.head.weight) = Array::zeros([8, 10]);
    let g = Graph::<f64>::new();
    let cx = Ctx::new(&g, &ps);
    let z = g.constant(crate::params::normal(&mut rng, &[4, 8], 1.0)).unwrap();
    let l = captioning_loss(cx, &dec, &prompt, z, &[4, 5, 6, 0], None).unwrap();
    assert!((l.item() - 10f64.ln()).abs() < 1e-12);
    assert!(captioning_loss(cx, &dec, &prompt, z, &[], None).is_err());
}

#[test]
fn alignment_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let oracle = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 12.0;
    let g = Graph::<f64>::new();
    let ta = g.variable(Array::new([3, 4], a.clone()).unwrap()).unwrap();
    let tb = g.constant(Array::new([3, 4], b).unwrap()).unwrap();
    assert!((alignment_loss(ta, tb).unwrap().item() - oracle).abs() < 1e-12);
    assert_eq!(alignment_loss(ta, ta).unwrap().item(), 0.0);
    let shifted = g.constant(Array::new([3, 4], a.iter().map(|x| x + 1.0).collect()).unwrap()).unwrap();
    assert!((alignment_loss(shifted, ta).unwrap().item() - 1.0).abs() < 1e-12);
    let wrong = g.constant(Array::zeros([4, 3])).unwrap();
    assert!(alignment_loss(ta, wrong).is_err());
}

#[test]
fn merge_balance_values() {
    let g = Graph::<f64>::new();
    let w = g.variable(Array::new([2, 2], vec![0.5, 0.5, 0.8, 0.2]).unwrap()).unwrap();
    let expected = -0.5 * (0.5f64.ln() * 2.0 + 0.8f64.ln() + 0.2f64.ln());
    let l = load_balance_merge(w).unwrap().item();
    assert!((l - expected).abs() < 1e-12);
    // −½·log(0.5·0.5·0.8·0.2) = log 5.
    assert!((l - 5f64.ln()).abs() < 1e-12);

    let u = g.constant(Array::full([4, 3], 1.0 / 3.0)).unwrap();
    assert!((load_balance_merge(u).unwrap().item() - 3.0 * 3f64.ln()).abs() < 1e-12);

    // The log barrier grows without bound as a row approaches one-hot; the
    // per-row value is −Σ log w, which passes 10³ only for w_min well below
    // 1e-6.
    let near = g.constant(Array::new([1, 3], vec![1.0 - 2e-6, 1e-6, 1e-6]).unwrap()).unwrap();
    let closed = -((1.0 - 2e-6f64).ln() + 2.0 * 1e-6f64.ln());
    assert!((load_balance_merge(near).unwrap().item() - closed).abs() < 1e-9);
    assert!(closed > 27.0);
    let nearer = g.constant(Array::new([1, 3], vec![1.0, 1e-300, 1e-300]).unwrap()).unwrap();
    assert!(load_balance_merge(nearer).unwrap().item() > 1e3);

    let zero = g.constant(Array::new([1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    assert!(load_balance_merge(zero).is_err());
}

#[test]
fn merge_balance_lower_bound_on_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::<f64>::new();
    let bound = 3.0 * 3f64.ln();
    for _ in 0..1000 {
        let raw: Vec<f64> = (0..3).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let s: f64 = raw.iter().sum();
        let row: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let w = g.constant(Array::new([1, 3], row).unwrap()).unwrap();
        assert!(load_balance_merge(w).unwrap().item() >= bound - 1e-9);
    }
}

#[test]
fn select_balance_values() {
    let g = Graph::<f64>::new();
    let probs = g
        .variable(Array::new([4, 2], vec![0.9, 0.1, 0.9, 0.1, 0.9, 0.1, 0.2, 0.8]).unwrap())
        .unwrap();
    let l = load_balance_select(&[0, 0, 0, 1], probs).unwrap();
    assert!((l.item() - 1.225).abs() < 1e-12);
    assert_eq!(routing_fractions(&[0, 0, 0, 1], 2).unwrap(), vec![0.75, 0.25]);
    // Gradient reaches the probabilities: ∂L/∂y_{i,k} = (M·f_k − 1)/N, which
    // differs from M·f_k/N by a per-row constant that any softmax upstream
    // annihilates.
    let grads = g.backward(l).unwrap();
    let gp = grads.get(&probs).unwrap();
    assert!((gp.data()[0] - (2.0 * 0.75 - 1.0) / 4.0).abs() < 1e-15);
    assert!((gp.data()[1] - (2.0 * 0.25 - 1.0) / 4.0).abs() < 1e-15);
}

#[test]
fn select_balance_fixed_points_are_exact() {
    let g = Graph::<f64>::new();
    for m in 2..=5usize {
        for per in 1..=4usize {
            let n = m * per;
            let assign: Vec<usize> = (0..n).map(|i| i % m).collect();
            let logits = g.constant(Array::zeros([n, m])).unwrap();
            let uniform = logits.softmax(1).unwrap();
            assert_eq!(load_balance_select(&assign, uniform).unwrap().item(), 1.0, "M={m} N={n}");

            let mut hot = vec![0.0; n * m];
            for i in 0..n {
                hot[i * m] = 1.0;
            }
            let collapsed = g.constant(Array::new([n, m], hot).unwrap()).unwrap();
            assert_eq!(load_balance_select(&vec![0; n], collapsed).unwrap().item(), m as f64);
        }
    }
}

#[test]
fn select_balance_errors() {
    let g = Graph::<f64>::new();
    let p = g.constant(Array::full([2, 3], 1.0 / 3.0)).unwrap();
    assert!(load_balance_select(&[0, 3], p).is_err());
    assert!(load_balance_select(&[0], p).is_err());
    assert!(routing_fractions(&[], 3).is_err());
}

#[test]
fn per_row_shares_sum_to_batch_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, m) = (5, 3);
    let mut rows = Vec::new();
    for _ in 0..n {
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        rows.extend(raw.iter().map(|x| x / s));
    }
    let assign = [0usize, 2, 2, 1, 0];
    let g = Graph::<f64>::new();
    let batch = g.constant(Array::new([n, m], rows.clone()).unwrap()).unwrap();
    let merge = load_balance_merge(batch).unwrap().item();
    let select = load_balance_select(&assign, batch).unwrap().item();
    let coeffs = select_coefficients(&assign, m).unwrap();
    let (mut ms, mut ss) = (0.0, 0.0);
    for i in 0..n {
        let r = g.constant(Array::vector(rows[i * m..(i + 1) * m].to_vec())).unwrap();
        ms += merge_balance_row(r, n).unwrap().item();
        ss += select_balance_row(r, &coeffs, n).unwrap().item();
    }
    assert!((ms - merge).abs() < 1e-12);
    assert!((ss - select).abs() < 1e-12);
}

#[test]
fn select_balance_logit_gradient_matches_textbook_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let assign = [0usize, 1, 1, 2];
    let coeffs = select_coefficients(&assign, 3).unwrap();

    let g1 = Graph::<f64>::new();
    let x1 = g1.variable(Array::new([4, 3], logits.clone()).unwrap()).unwrap();
    let l1 = load_balance_select(&assign, x1.softmax(1).unwrap()).unwrap();
    let d1 = g1.backward(l1).unwrap().get(&x1).unwrap().clone();

    let g2 = Graph::<f64>::new();
    let x2 = g2.variable(Array::new([4, 3], logits).unwrap()).unwrap();
    let c = g2.constant(Array::vector(coeffs)).unwrap();
    let l2 = x2.softmax(1).unwrap().mean_axis(0).unwrap().mul(&c).unwrap().sum().unwrap();
    let d2 = g2.backward(l2).unwrap().get(&x2).unwrap().clone();

    assert!((l1.item() - l2.item()).abs() < 1e-14);
    for (a, b) in d1.data().iter().zip(d2.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}
