use super::*;
use crate::params::ParamSet;
use crate::router::Strategy;
use crate::synthdata::{generate, split, Splits};
use crate::tensor::{Array, Graph};

fn tiny_config() -> Config {
    Config::from_toml_str(
        r#"
[corpus]
train = 24
val = 4
test = 6

[model]
dim = 8
heads = 2
decoder_layers = 1
router_hidden = 8

[optim]
batch_size = 6
"#,
        &[],
    )
    .unwrap()
}

fn tiny_data(cfg: &Config) -> Splits {
    split(&generate(&cfg.corpus).unwrap()).unwrap()
}

#[test]
fn config_defaults_and_overrides() {
    let d = Config::default();
    d.validate().unwrap();
    assert_eq!(d.optim.batch_size, 32);
    assert_eq!(d.optim.beta1, 0.9);
    assert_eq!(d.optim.beta2, 0.999);
    assert_eq!(d.schedule.balance_weight, 0.01);
    assert_eq!(d.schedule.align_weight, 1.0);
    assert_eq!(d.model.prompt_len, 10);
    assert_eq!(d.model.queries, 16);

    let ov = [
        "optim.lr=1e-4".to_string(),
        "router.strategy=hard_select".to_string(),
        "corpus.proportions=[1.0, 0.0, 0.0]".to_string(),
        "optim.lr = 3e-4".to_string(),
    ];
    let c = Config::from_toml_str("[model]\nseed = 5\n", &ov).unwrap();
    assert_eq!(c.optim.lr, 3e-4);
    assert_eq!(c.router.strategy, Strategy::HardSelect);
    assert_eq!(c.corpus.proportions, vec![1.0, 0.0, 0.0]);
    assert_eq!(c.model.seed, 5);
    // Round trip through the echoed TOML.
    assert_eq!(Config::from_toml_str(&c.to_toml(), &[]).unwrap(), c);
}

#[test]
fn config_errors() {
    let err = Config::from_toml_str("[optim]\nlr = 0.1\nbatch_size = \n", &[]).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
    assert!(Config::from_toml_str("[optim]\nlearning_rate = 0.1\n", &[]).is_err());
    assert!(Config::from_toml_str("", &["optim.lr".into()]).is_err());
    assert!(Config::from_toml_str("", &["optim.lr=-1".into()]).is_err());
    assert!(Config::from_toml_str("", &["router.strategy=argmax".into()]).is_err());
    assert!(Config::from_toml_str("", &["model.queries=7".into()]).is_err());
    assert!(Config::from_toml_str("", &["router.tau=0".into()]).is_err());
}

fn one_param(value: Vec<f64>) -> (ParamSet<f64>, crate::params::ParamId) {
    let mut ps = ParamSet::new();
    let id = ps.add("w", Array::vector(value));
    (ps, id)
}

#[test]
fn adamw_zero_gradient_without_decay_is_identity() {
    let (mut ps, id) = one_param(vec![1.0, -2.0, 3.0]);
    let cfg = OptimConfig {
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut opt = AdamW::new(&cfg, &ps, vec![id]);
    let mut g = ParamGrads::new(1);
    g.set(id, Array::zeros([3]));
    for _ in 0..3 {
        opt.update(&mut ps, &g).unwrap();
    }
    assert_eq!(ps.get(id).data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn adamw_first_step_closed_form() {
    let (mut ps, id) = one_param(vec![0.5, 0.5, 0.5]);
    let cfg = OptimConfig {
        weight_decay: 0.0,
        lr: 0.01,
        ..OptimConfig::default()
    };
    let mut opt = AdamW::new(&cfg, &ps, vec![id]);
    let grad = [0.3, -2.0, 1e-3];
    let mut g = ParamGrads::new(1);
    g.set(id, Array::vector(grad.to_vec()));
    opt.update(&mut ps, &g).unwrap();
    for (p, gi) in ps.get(id).data().iter().zip(grad) {
        let expected = 0.5 - 0.01 * gi / (gi.abs() + 1e-8);
        assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
    }
}

#[test]
fn adamw_decay_and_missing_gradient() {
    let (mut ps, id) = one_param(vec![2.0]);
    let cfg = OptimConfig {
        weight_decay: 0.5,
        lr: 0.1,
        ..OptimConfig::default()
    };
    let mut opt = AdamW::new(&cfg, &ps, vec![id]);
    let mut g = ParamGrads::new(1);
    g.set(id, Array::zeros([1]));
    opt.update(&mut ps, &g).unwrap();
    assert!((ps.get(id).data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    let err = opt.update(&mut ps, &ParamGrads::new(1)).unwrap_err();
    assert!(matches!(err, crate::Error::MissingGrad(ref n) if n == "w"));
}

fn run_log(cfg: &Config, data: &Splits, steps: u64) -> (Vec<StepStats>, Trainer<f64>) {
    let mut t = Trainer::<f64>::phase1(cfg.clone()).unwrap();
    let s = t.run_until(&data.train, steps, &mut std::io::sink()).unwrap();
    (s, t)
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let (a, ta) = run_log(&cfg, &data, 4);
    let (b, tb) = run_log(&cfg, &data, 4);
    assert_eq!(a, b);
    assert_eq!(ta.model.named_values(), tb.model.named_values());
}

#[test]
fn log_lines_have_six_columns() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let mut t = Trainer::<f64>::phase1(cfg).unwrap();
    let mut buf = Vec::new();
    t.run_until(&data.train, 2, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        assert_eq!(line.split('\t').count(), 6);
    }
    assert_eq!(LOG_HEADER.split('\t').count(), 6);
}

#[test]
fn checkpoint_bytes_round_trip() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let (_, t) = run_log(&cfg, &data, 2);
    let ck = Checkpoint::from_trainer(&t);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    let path = std::path::Path::new("mem");
    let back = Checkpoint::<f64>::from_bytes(&bytes, path).unwrap();
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.tensors, ck.tensors);
    assert!(Checkpoint::<f32>::from_bytes(&bytes, path).is_err());
    assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 1], path).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::<f64>::from_bytes(&bad, path).is_err());
}

#[test]
fn resume_is_bitwise_neutral() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p1.ckpt");

    let (straight, t_straight) = run_log(&cfg, &data, 6);
    let (first, t) = run_log(&cfg, &data, 3);
    Checkpoint::from_trainer(&t).save(&path).unwrap();
    let mut resumed = Checkpoint::<f64>::load(&path).unwrap().trainer(&data.train).unwrap();
    let rest = resumed.run_until(&data.train, 6, &mut std::io::sink()).unwrap();
    let joined: Vec<_> = first.into_iter().chain(rest).collect();
    assert_eq!(joined, straight);
    assert_eq!(resumed.model.named_values(), t_straight.model.named_values());

    // Phase 2, hard select: resume mid-run as well.
    let model = t_straight.model.clone();
    let routing = Routing::Router(Strategy::HardSelect);
    let mut a = Trainer::phase2(cfg.clone(), model.clone(), routing, &data.train).unwrap();
    let full = a.run_until(&data.train, 4, &mut std::io::sink()).unwrap();
    let mut b = Trainer::phase2(cfg.clone(), model, routing, &data.train).unwrap();
    let head = b.run_until(&data.train, 2, &mut std::io::sink()).unwrap();
    let p2 = dir.path().join("p2.ckpt");
    Checkpoint::from_trainer(&b).save(&p2).unwrap();
    let mut c = Checkpoint::<f64>::load(&p2).unwrap().trainer(&data.train).unwrap();
    let tail = c.run_until(&data.train, 4, &mut std::io::sink()).unwrap();
    assert_eq!(head.into_iter().chain(tail).collect::<Vec<_>>(), full);
    assert_eq!(c.model.named_values(), a.model.named_values());
}

#[test]
fn router_receives_gradient_for_every_strategy() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let model = Model::<f64>::new(&cfg).unwrap();
    for s in Strategy::ALL {
        let s0 = &data.train[0];
        let g = Graph::new();
        let cx = crate::nn::Ctx::new(&g, &model.params);
        let b = model.brain(cx, s0).unwrap();
        let outs = model.project(cx, b).unwrap();
        let d = model
            .route(cx, Routing::Router(s), b, &outs, 0.5, &[0.3, -0.1, 0.2])
            .unwrap();
        let h = model.fuse(d.weights, &outs).unwrap();
        let loss = crate::losses::captioning_loss(cx, &model.decoder, &model.prompt, h, &s0.targets, None).unwrap();
        let grads = g.backward(loss).unwrap();
        let prefix = if s == Strategy::SimilarityMerge { "router.query" } else { "router.gate" };
        let norm: f64 = g
            .bound_params()
            .iter()
            .filter(|(id, _)| model.params.name(*id).starts_with(prefix))
            .filter_map(|(_, t)| grads.get(t))
            .map(|a| a.norm() * a.norm())
            .sum();
        assert!(norm > 0.0, "{s}");
    }
}

#[test]
fn phase2_rejects_mismatched_model() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let model = Model::<f64>::new(&cfg).unwrap();
    let mut other = cfg.clone();
    other.corpus.modalities = 4;
    other.corpus.proportions = vec![0.25; 4];
    other.corpus.aux_rows = vec![4; 4];
    let err = Trainer::phase2(other, model.clone(), Routing::Router(Strategy::SoftMerge), &data.train);
    assert!(err.is_err());
    assert!(Trainer::phase2(cfg.clone(), model, Routing::Single(3), &data.train).is_err());
}

#[test]
fn phase_freezes_the_right_parameters() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let (_, t) = run_log(&cfg, &data, 1);
    let before = Model::<f64>::new(&cfg).unwrap();
    for id in t.model.params.ids() {
        let name = t.model.params.name(id);
        let changed = t.model.params.get(id) != before.params.get(id);
        if name.starts_with("router.") {
            assert!(!changed, "{name} moved in phase 1");
        }
    }
    let model = t.model.clone();
    let mut p2 = Trainer::phase2(cfg.clone(), model.clone(), Routing::Single(1), &data.train).unwrap();
    p2.run_until(&data.train, 1, &mut std::io::sink()).unwrap();
    for id in model.params.ids() {
        let name = model.params.name(id);
        if name.starts_with("aux.") || name.starts_with("router.") {
            assert_eq!(p2.model.params.get(id), model.params.get(id), "{name}");
        }
    }
}

#[test]
fn evaluation_report_round_trips_weights() {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let model = Model::<f64>::new(&cfg).unwrap();
    let rep = evaluate(&model, &cfg, Routing::Router(Strategy::SoftMerge), "test", &data.test).unwrap();
    assert_eq!(rep.samples.len(), data.test.len());
    assert!((rep.mean_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let vocab = crate::synthdata::Vocabulary::new(cfg.corpus.vocab).unwrap();
    let text = rep.to_text(&vocab);
    assert!(text.starts_with("routing\tsoft_merge\n"));
    let parsed = EvalReport::parse_weights(&text).unwrap();
    assert_eq!(parsed.len(), rep.samples.len());
    for ((id, w), s) in parsed.iter().zip(&rep.samples) {
        assert_eq!(*id, s.id);
        assert_eq!(w, &s.weights);
    }
    let again = evaluate(&model, &cfg, Routing::Router(Strategy::SoftMerge), "test", &data.test).unwrap();
    assert_eq!(again.to_text(&vocab), text);
    // An untrained decoder rarely gets a word right.
    assert!(rep.wer > 50.0);
}

#[test]
fn entropy_values() {
    assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
    assert!((entropy(&[1.0 / 3.0; 3]) - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn composite_objectives_pass_gradient_check() {
    let entries = composite_suite(1e-6, 1e-4).unwrap();
    assert_eq!(entries.len(), 4);
    for e in &entries {
        assert!(e.report.checked > 0, "{}", e.name);
        assert!(e.report.passed, "{}: {:?}", e.name, e.report);
    }
}

fn mean_alignment_of(model: &Model<f64>, samples: &[crate::synthdata::BrainSample]) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let g = Graph::new();
        let cx = crate::nn::Ctx::new(&g, &model.params);
        let outs = model.project(cx, model.brain(cx, s).unwrap()).unwrap();
        for (p, z) in outs.iter().zip(model.aux_embeddings(cx, s).unwrap()) {
            total += crate::losses::alignment_loss(*p, z).unwrap().item();
        }
    }
    total / samples.len() as f64
}

#[test]
fn schedule_extremes_gate_alignment() {
    let mut cfg = tiny_config();
    cfg.schedule.sharpness = 1.0;
    cfg.optim.lr = 1e-2;
    let data = tiny_data(&cfg);
    let initial = mean_alignment_of(&Model::new(&cfg).unwrap(), &data.train);
    let after = |midpoint: u64| {
        let mut c = cfg.clone();
        c.schedule.midpoint = midpoint;
        let mut t = Trainer::<f64>::phase1(c).unwrap();
        t.run_until(&data.train, 40, &mut std::io::sink()).unwrap();
        mean_alignment_of(&t.model, &data.train)
    };
    let never = after(1_000_000);
    let always = after(0);
    // The auxiliary targets still move under the captioning loss, so only
    // the order of magnitude is preserved.
    assert!((0.5..2.0).contains(&(never / initial)), "{initial} -> {never}");
    assert!(always < 0.5 * initial, "{initial} -> {always}");
}
