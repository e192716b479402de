//! Finite-difference checks of the full training objectives.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use super::model::{Model, Routing};
use super::trainer::Trainer;
use crate::error::Result;
use crate::losses::captioning_loss;
use crate::nn::Ctx;
use crate::params::ParamId;
use crate::router::Strategy;
use crate::synthdata::{generate, split, BrainSample, PAD};
use crate::tensor::{check_params, primitive_suite, SuiteEntry};

/// Small enough that every objective evaluates in a few milliseconds.
pub fn toy_config() -> Config {
    let mut c = Config::default();
    c.corpus.train = 8;
    c.corpus.val = 2;
    c.corpus.test = 2;
    c.corpus.brain_dim = 32;
    c.corpus.aux_rows = vec![3, 3, 4];
    c.corpus.raw_dim = 6;
    c.model.dim = 8;
    c.model.heads = 2;
    c.model.queries = 4;
    c.model.prompt_len = 3;
    c.model.decoder_layers = 1;
    c.model.router_hidden = 8;
    c.optim.batch_size = 3;
    c
}

/// Up to `per_tensor` seeded coordinates of every parameter whose name
/// passes `keep`.
fn coords(model: &Model<f64>, per_tensor: usize, seed: u64, keep: impl Fn(&str) -> bool) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for id in model.params.ids() {
        if !keep(model.params.name(id)) {
            continue;
        }
        let n = model.params.get(id).len();
        for i in index::sample(&mut rng, n, per_tensor.min(n)) {
            out.push((id, i));
        }
    }
    out
}

fn objective(name: &str, t: &Trainer<f64>, train: &[BrainSample], step: u64, keep: impl Fn(&str) -> bool, eps: f64, tol: f64) -> Result<SuiteEntry> {
    let cs = coords(&t.model, 3, step, keep);
    let report = check_params(&t.model.params, |g, ps| t.batch_loss(g, ps, train, step), &cs, eps, tol)?;
    Ok(SuiteEntry {
        name: name.to_string(),
        report,
    })
}

/// Captioning loss of a two-token target, then the phase-1 objective and
/// the phase-2 objective under both merge strategies, each on a toy batch.
///
/// Phase 1 aligns against detached auxiliary embeddings, so auxiliary
/// encoder weights are left out there; hard select is left out because its
/// straight-through gradient is not the derivative of its forward pass.
pub fn composite_suite(eps: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let config = toy_config();
    let data = split(&generate(&config.corpus)?)?;
    let train = &data.train;
    let mut out = Vec::new();

    let model = Model::<f64>::new(&config)?;
    let sample = &train[0];
    let targets = [sample.targets[0], crate::synthdata::EOS];
    let cs = coords(&model, 3, 1, |n| n.starts_with("decoder") || n.starts_with("prompt") || n.starts_with("projector"));
    let report = check_params(
        &model.params,
        |g, ps| {
            let cx = Ctx::new(g, ps);
            let b = model.brain(cx, sample)?;
            let z = model.projectors[0].project(cx, b)?;
            captioning_loss(cx, &model.decoder, &model.prompt, z, &targets, Some(PAD))
        },
        &cs,
        eps,
        tol,
    )?;
    out.push(SuiteEntry {
        name: "captioning".into(),
        report,
    });

    let p1 = Trainer::phase1(config.clone())?;
    let mid = config.schedule.midpoint;
    out.push(objective("phase-1 objective", &p1, train, mid, |n| !n.starts_with("aux."), eps, tol)?);

    for s in [Strategy::SoftMerge, Strategy::SimilarityMerge] {
        let t = Trainer::phase2(config.clone(), model.clone(), Routing::Router(s), train)?;
        out.push(objective(&format!("phase-2 objective ({s})"), &t, train, 0, |_| true, eps, tol)?);
    }
    Ok(out)
}

/// Every primitive on `seeds` inputs, then the composite objectives.
pub fn full_suite(seeds: u64, eps: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut all = primitive_suite(seeds, eps, tol)?;
    all.extend(composite_suite(eps, tol)?);
    Ok(all)
}

/// True when every entry passed.
pub fn all_passed(entries: &[SuiteEntry]) -> bool {
    entries.iter().all(|e| e.report.passed)
}

/// Worst entry, for one-line summaries.
pub fn worst(entries: &[SuiteEntry]) -> Option<&SuiteEntry> {
    entries
        .iter()
        .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
}

