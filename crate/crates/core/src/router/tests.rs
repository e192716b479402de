use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::Ctx;
use crate::params::ParamSet;
use crate::tensor::{Array, Graph};

fn softmax_ref(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn router(ps: &mut ParamSet<f64>, seed: u64) -> RouterParams {
    RouterParams::new(ps, &mut ChaCha8Rng::seed_from_u64(seed), "router", 6, 8, 3, 4).unwrap()
}

fn zero_gate(ps: &mut ParamSet<f64>, r: &RouterParams) {
    *ps.get_mut(r.gate_out.weight) = Array::zeros([8, 3]);
    *ps.get_mut(r.gate_out.bias.unwrap()) = Array::zeros([3]);
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
    }
    assert!("argmax".parse::<Strategy>().is_err());
    assert!(Strategy::SimilarityMerge.is_merge());
    assert!(!Strategy::HardSelect.is_merge());
}

#[test]
fn soft_merge_is_a_distribution() {
    let mut ps = ParamSet::new();
    let r = router(&mut ps, 1);
    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    for seed in 0..5u64 {
        let b = g
            .constant(crate::params::normal(&mut ChaCha8Rng::seed_from_u64(seed), &[6], 1.0))
            .unwrap();
        let d = soft_merge(cx, &r, b).unwrap();
        let w = d.weight_values();
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|&x| x > 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_gate_gives_uniform_weights() {
    let mut ps = ParamSet::new();
    let r = router(&mut ps, 2);
    zero_gate(&mut ps, &r);
    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    let b = g.constant(Array::vector(vec![0.3, -1.0, 2.0, 0.0, 0.5, 1.5])).unwrap();
    for w in soft_merge(cx, &r, b).unwrap().weight_values() {
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn gumbel_softmax_matches_reference() {
    let l = [0.5f64, 0.3, 0.2];
    let noise = [0.5, -0.3, 0.1];
    let tau = 0.5;
    let scaled: Vec<f64> = l.iter().zip(&noise).map(|(p, g)| (p.ln() + g) / tau).collect();
    let expected = softmax_ref(&scaled);

    let g = Graph::new();
    let logp = g.constant(Array::vector(l.iter().map(|p| p.ln()).collect())).unwrap();
    let y = gumbel_softmax(logp, &noise, tau).unwrap();
    for (a, b) in y.to_vec().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    let (w, k) = straight_through_top1(y).unwrap();
    let top = (0..3).max_by(|&a, &b| expected[a].total_cmp(&expected[b])).unwrap();
    assert_eq!(k, top);
    let mut hard = vec![0.0; 3];
    hard[top] = 1.0;
    assert_eq!(w.to_vec(), hard);
}

#[test]
fn low_temperature_without_noise_picks_mode() {
    let g = Graph::new();
    let logp = g.constant(Array::vector(vec![0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()])).unwrap();
    let y = gumbel_softmax(logp, &[0.0; 3], 1e-3).unwrap();
    assert!((y.to_vec()[0] - 1.0).abs() < 1e-12);
    let (w, k) = straight_through_top1(y).unwrap();
    assert_eq!(k, 0);
    assert_eq!(w.to_vec(), vec![1.0, 0.0, 0.0]);
}

#[test]
fn hard_select_is_exact_one_hot_with_soft_gradient() {
    let mut ps = ParamSet::new();
    let r = router(&mut ps, 3);
    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    let b = g.variable(Array::vector(vec![1.0, -0.5, 0.2, 0.9, -1.1, 0.4])).unwrap();
    let d = hard_select(cx, &r, b, 0.7, &[0.1, -0.2, 0.3]).unwrap();
    let w = d.weight_values();
    let k = d.selected.unwrap();
    for (i, x) in w.iter().enumerate() {
        assert_eq!(*x, if i == k { 1.0 } else { 0.0 });
    }
    // Weighting by a constant vector c gives ∂/∂y = c through the estimator.
    let c = g.constant(Array::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let loss = d.weights.mul(&c).unwrap().sum().unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(&d.relaxed.unwrap()).unwrap().data(), &[1.0, 2.0, 3.0]);
    assert!(grads.get(&b).unwrap().norm() > 0.0);
}

#[test]
fn hard_select_rejects_bad_temperature_and_noise() {
    let mut ps = ParamSet::new();
    let r = router(&mut ps, 4);
    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    let b = g.constant(Array::zeros([6])).unwrap();
    assert!(hard_select(cx, &r, b, 0.0, &[0.0; 3]).is_err());
    assert!(hard_select(cx, &r, b, -1.0, &[0.0; 3]).is_err());
    assert!(hard_select(cx, &r, b, 1.0, &[0.0; 2]).is_err());
}

#[test]
fn similarity_weights_match_reference() {
    let g = Graph::new();
    let q = g.constant(Array::vector(vec![1.0, 0.0])).unwrap();
    let keys = g.constant(Array::new([2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let d = similarity_weights(q, keys, Strategy::SimilarityMerge).unwrap();
    let w = d.weight_values();
    let e = 1f64.exp();
    assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    assert!((w[0] - 0.73106).abs() < 1e-5);
}

#[test]
fn similarity_merge_checks_key_width() {
    let mut ps = ParamSet::new();
    let r = router(&mut ps, 5);
    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    let b = g.constant(Array::zeros([6])).unwrap();
    assert!(similarity_merge(cx, &r, b, g.constant(Array::zeros([3, 5])).unwrap()).is_err());
    let d = similarity_merge(cx, &r, b, g.constant(Array::zeros([3, 4])).unwrap()).unwrap();
    for w in d.weight_values() {
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn fuse_is_weighted_sum() {
    let g = Graph::new();
    let w = g.constant(Array::vector(vec![0.5, 0.5])).unwrap();
    let p1 = g.constant(Array::vector(vec![4.0, 2.0])).unwrap();
    let p2 = g.constant(Array::vector(vec![2.0, 0.0])).unwrap();
    let h = fuse(w, stack(&[p1, p2]).unwrap()).unwrap();
    assert_eq!(h.to_vec(), vec![3.0, 1.0]);

    let one_hot = g.constant(Array::vector(vec![0.0, 1.0])).unwrap();
    assert_eq!(fuse(one_hot, stack(&[p1, p2]).unwrap()).unwrap().to_vec(), vec![2.0, 0.0]);
    assert!(fuse(g.constant(Array::vector(vec![1.0; 3])).unwrap(), stack(&[p1, p2]).unwrap()).is_err());
}

#[test]
fn stack_rejects_mixed_shapes() {
    let g = Graph::<f64>::new();
    let a = g.constant(Array::zeros([2, 3])).unwrap();
    let b = g.constant(Array::zeros([3, 2])).unwrap();
    assert!(stack(&[a, b]).is_err());
    assert!(stack::<f64>(&[]).is_err());
    assert_eq!(stack(&[a, a]).unwrap().shape(), vec![2, 6]);
}

#[test]
fn gumbel_samples_have_expected_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs = sample_gumbel(&mut rng, 200_000);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    // Euler–Mascheroni constant.
    assert!((mean - 0.5772156649).abs() < 0.01);
    assert!(xs.iter().all(|x| x.is_finite()));
}

#[test]
fn soft_merge_shift_invariance() {
    let mut ps = ParamSet::new();
    let r = router(&mut ps, 6);
    let b = Array::vector(vec![0.2, -0.7, 1.3, 0.0, 0.4, -1.2]);
    let before = {
        let g = Graph::new();
        let bt = g.constant(b.clone()).unwrap();
        soft_merge(Ctx::new(&g, &ps), &r, bt).unwrap().weight_values()
    };
    let bias = r.gate_out.bias.unwrap();
    *ps.get_mut(bias) = ps.get(bias).map(|x| x + 3.7);
    let g = Graph::new();
    let bt = g.constant(b).unwrap();
    let after = soft_merge(Ctx::new(&g, &ps), &r, bt).unwrap().weight_values();
    for (x, y) in before.iter().zip(&after) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn fuse_is_linear_in_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = Graph::new();
    let w = g.constant(Array::vector(vec![0.2, 0.5, 0.3])).unwrap();
    let a = crate::params::normal::<f64>(&mut rng, &[3, 8], 1.0);
    let b = crate::params::normal::<f64>(&mut rng, &[3, 8], 1.0);
    let (al, be) = (1.7, -0.4);
    let combo = Array::new(
        [3, 8],
        a.data().iter().zip(b.data()).map(|(x, y)| al * x + be * y).collect(),
    )
    .unwrap();
    let lhs = fuse(w, g.constant(combo).unwrap()).unwrap().to_vec();
    let fa = fuse(w, g.constant(a).unwrap()).unwrap().to_vec();
    let fb = fuse(w, g.constant(b).unwrap()).unwrap().to_vec();
    for i in 0..8 {
        assert!((lhs[i] - (al * fa[i] + be * fb[i])).abs() < 1e-12);
    }
}

#[test]
fn weights_sum_to_one_for_every_strategy() {
    let mut ps = ParamSet::new();
    let r = router(&mut ps, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..1000 {
        let g = Graph::new();
        let cx = Ctx::new(&g, &ps);
        let b = g.constant(crate::params::normal(&mut rng, &[6], 2.0)).unwrap();
        let keys = g.constant(crate::params::normal(&mut rng, &[3, 4], 1.0)).unwrap();
        let noise = sample_gumbel(&mut rng, 3);
        for d in [
            soft_merge(cx, &r, b).unwrap(),
            hard_select(cx, &r, b, 0.5, &noise).unwrap(),
            similarity_merge(cx, &r, b, keys).unwrap(),
        ] {
            let w = d.weight_values();
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn identity_at_unit_temperature() {
    let g = Graph::new();
    let l = [0.6f64, 0.3, 0.1];
    let logp = g.constant(Array::vector(l.iter().map(|p| p.ln()).collect())).unwrap();
    let y = gumbel_softmax(logp, &[0.0; 3], 1.0).unwrap().to_vec();
    for (a, b) in y.iter().zip(&l) {
        assert!((a - b).abs() < 1e-15);
    }
}
