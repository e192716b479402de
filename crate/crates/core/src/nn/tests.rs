use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::params::ParamSet;
use crate::tensor::{Array, Graph};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn eye(n: usize) -> Array<f64> {
    let mut a = Array::zeros([n, n]);
    for i in 0..n {
        a.data_mut()[i * n + i] = 1.0;
    }
    a
}

fn small_decoder(ps: &mut ParamSet<f64>, seed: u64) -> ToyCausalDecoder {
    let cfg = DecoderConfig {
        vocab: 12,
        dim: 8,
        heads: 2,
        layers: 2,
        ffn_mult: 2,
        max_positions: 16,
        eos: 0,
    };
    ToyCausalDecoder::new(ps, &mut rng(seed), "dec", cfg)
}

#[test]
fn single_key_attention_is_passthrough() {
    let mut ps = ParamSet::<f64>::new();
    let pooler = CrossAttentionPooler::new(&mut ps, &mut rng(0), "pool", 1, 3);
    for lin in [&pooler.key, &pooler.value, &pooler.output] {
        ps.set(ps.name(lin.weight).to_string().as_str(), eye(3)).unwrap();
    }
    ps.set("pool.queries", Array::from_f64([1, 3], &[1., 0., 0.]).unwrap())
        .unwrap();
    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    let row = [0.5, -1.25, 2.0];
    let seq = g.constant(Array::from_f64([1, 3], &row).unwrap()).unwrap();
    assert_eq!(pooler.pool(cx, seq).unwrap().to_vec(), row.to_vec());

    let dup = g
        .constant(Array::from_f64([2, 3], &[0.5, -1.25, 2.0, 0.5, -1.25, 2.0]).unwrap())
        .unwrap();
    assert_eq!(pooler.pool(cx, dup).unwrap().to_vec(), row.to_vec());
}

#[test]
fn pool_shape_is_fixed() {
    let mut ps = ParamSet::<f64>::new();
    let pooler = CrossAttentionPooler::new(&mut ps, &mut rng(3), "pool", 16, 32);
    for n in [1usize, 5, 64] {
        let g = Graph::new();
        let cx = Ctx::new(&g, &ps);
        let x = g
            .constant(crate::params::normal(&mut rng(n as u64), &[n, 32], 1.0))
            .unwrap();
        let out = pooler.pool(cx, x).unwrap();
        assert_eq!(out.shape(), vec![16, 32]);
        assert!(out.value().is_finite());
    }
}

#[test]
fn pool_rejects_empty_and_wrong_width() {
    let mut ps = ParamSet::<f64>::new();
    let pooler = CrossAttentionPooler::new(&mut ps, &mut rng(3), "pool", 2, 4);
    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    let x = g.constant(Array::zeros([2, 3])).unwrap();
    assert!(pooler.pool(cx, x).is_err());
    assert!(Array::<f64>::new(vec![0, 4], vec![]).is_err());
}

#[test]
fn projector_is_pure_and_checks_dims() {
    let mut ps = ParamSet::<f64>::new();
    let proj = ProjectorEncoder::new(&mut ps, &mut rng(1), "proj", 32, 4, 8, 2, 1, 2);
    let b = crate::params::normal::<f64>(&mut rng(9), &[32], 1.0);
    let run = |b: &Array<f64>| {
        let g = Graph::new();
        let cx = Ctx::new(&g, &ps);
        let bt = g.constant(b.clone()).unwrap();
        proj.project(cx, bt).unwrap().value().as_ref().clone()
    };
    let a = run(&b);
    assert_eq!(a.shape(), &[4, 8]);
    assert_eq!(a, run(&b));
    let zero = run(&Array::zeros([32]));
    assert!(zero.is_finite());
    assert_eq!(zero, run(&Array::zeros([32])));

    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    let wrong = g.constant(Array::zeros([31])).unwrap();
    assert!(proj.project(cx, wrong).is_err());
}

#[test]
fn projector_is_locally_lipschitz() {
    let mut ps = ParamSet::<f64>::new();
    let proj = ProjectorEncoder::new(&mut ps, &mut rng(2), "proj", 32, 4, 8, 2, 1, 2);
    let b = crate::params::normal::<f64>(&mut rng(10), &[32], 1.0);
    let eval = |b: &Array<f64>| {
        let g = Graph::new();
        let cx = Ctx::new(&g, &ps);
        proj.project(cx, g.constant(b.clone()).unwrap())
            .unwrap()
            .value()
            .as_ref()
            .clone()
    };
    let diff = |a: &Array<f64>, b: &Array<f64>| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let base = eval(&b);
    // Empirical local Lipschitz constant from 1e-4 steps.
    let mut k = 0.0f64;
    for i in 0..32 {
        let mut p = b.clone();
        p.data_mut()[i] += 1e-4;
        k = k.max(diff(&eval(&p), &base) / 1e-4);
    }
    let mut r = rng(11);
    let mut delta = crate::params::normal::<f64>(&mut r, &[32], 1.0);
    let scale = 1e-6 / delta.norm();
    delta = delta.map(|x| x * scale);
    let mut p = b.clone();
    p.add_assign(&delta);
    let change = diff(&eval(&p), &base);
    // √32 covers the worst-case alignment of a unit step across axes.
    assert!(change <= k * (32f64).sqrt() * 1e-6, "change {change}, k {k}");
}

#[test]
fn decoder_rows_are_distributions() {
    let mut ps = ParamSet::<f64>::new();
    let dec = small_decoder(&mut ps, 4);
    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    let prefix = g.constant(crate::params::normal(&mut rng(5), &[3, 8], 1.0)).unwrap();
    let logits = dec.logits(cx, prefix, &[3, 4, 5, 0]).unwrap();
    assert_eq!(logits.shape(), vec![4, 12]);
    let probs = logits.softmax(1).unwrap().value();
    for r in 0..4 {
        let s: f64 = probs.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn decoder_is_causal() {
    let mut ps = ParamSet::<f64>::new();
    let dec = small_decoder(&mut ps, 6);
    let prefix = crate::params::normal::<f64>(&mut rng(7), &[3, 8], 1.0);
    let run = |tokens: &[usize]| {
        let g = Graph::new();
        let cx = Ctx::new(&g, &ps);
        let p = g.constant(prefix.clone()).unwrap();
        dec.logits(cx, p, tokens).unwrap().value().as_ref().clone()
    };
    let short = run(&[2, 3, 4]);
    let long = run(&[2, 3, 4, 9, 10]);
    let changed = run(&[2, 3, 4, 11, 5]);
    for r in 0..3 {
        assert_eq!(short.row(r), long.row(r));
        assert_eq!(long.row(r), changed.row(r));
    }
    assert_eq!(long.row(3), changed.row(3));
}

#[test]
fn decoder_rejects_bad_tokens() {
    let mut ps = ParamSet::<f64>::new();
    let dec = small_decoder(&mut ps, 6);
    let g = Graph::new();
    let cx = Ctx::new(&g, &ps);
    let p = g.constant(Array::zeros([2, 8])).unwrap();
    assert!(dec.logits(cx, p, &[12]).is_err());
    assert!(dec.logits(cx, p, &[1; 20]).is_err());
}

#[test]
fn greedy_decoding_bounds_and_determinism() {
    let mut ps = ParamSet::<f64>::new();
    let dec = small_decoder(&mut ps, 8);
    let prefix = crate::params::normal::<f64>(&mut rng(9), &[3, 8], 1.0);
    let one = dec.decode_greedy(&ps, &prefix, 1).unwrap();
    assert_eq!(one.len(), 1);
    let a = dec.decode_greedy(&ps, &prefix, 6).unwrap();
    let b = dec.decode_greedy(&ps, &prefix, 6).unwrap();
    assert_eq!(a, b);
    assert!(!a.is_empty() && a.len() <= 6);
    assert_eq!(a[0], one[0]);
}

#[test]
fn soft_prompt_copies_instruction_rows() {
    let mut ps = ParamSet::<f64>::new();
    let table = Array::from_f64([3, 2], &[0., 1., 2., 3., 4., 5.]).unwrap();
    let sp = SoftPrompt::from_instruction(&mut ps, "prompt", &table, &[2, 0], 5).unwrap();
    assert_eq!(
        ps.get(sp.prompt).data(),
        &[4., 5., 0., 1., 4., 5., 0., 1., 4., 5.]
    );
    assert!(SoftPrompt::from_instruction(&mut ps, "p2", &table, &[7], 2).is_err());
}
