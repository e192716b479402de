//! Both training phases: per-sample graphs, deterministic gradient
//! reduction, AdamW updates, logging and the divergence guard.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::Config;
use super::model::{Model, Routing};
use super::optim::{AdamW, ParamGrads};
use crate::error::{Error, Result};
use crate::losses::{
    alignment_loss, captioning_loss, merge_balance_row, phase1_loss, phase2_loss, select_balance_row,
    select_coefficients, ScheduleParams,
};
use crate::nn::Ctx;
use crate::router::{self, Strategy};
use crate::scalar::Scalar;
use crate::synthdata::{BrainSample, PAD};
use crate::tensor::{Array, Graph, Tensor};

/// Samples per sequential chunk. Fixed so that the reduction order, and
/// hence every bit of the result, does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Alignment,
    Routing(Routing),
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Alignment => 1,
            Phase::Routing(_) => 2,
        }
    }

    /// Parameter prefixes held fixed in this phase.
    pub(crate) fn frozen(self) -> &'static [&'static str] {
        match self {
            Phase::Alignment => &["router."],
            Phase::Routing(Routing::Router(_)) => &["aux."],
            Phase::Routing(Routing::Single(_)) => &["aux.", "router."],
        }
    }
}

/// Batch means of the logged loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub l_cap: f64,
    pub l_align: f64,
    /// `α(t)` in phase 1, `λ₁` in phase 2.
    pub align_weight: f64,
    pub l_balance: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step\tl_cap\tl_align\talpha\tl_balance\ttotal";

impl StepStats {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.l_cap, self.l_align, self.align_weight, self.l_balance, self.total
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Parts {
    l_cap: f64,
    l_align: f64,
    l_balance: f64,
    total: f64,
}

impl Parts {
    fn add(&mut self, o: Parts) {
        self.l_cap += o.l_cap;
        self.l_align += o.l_align;
        self.l_balance += o.l_balance;
        self.total += o.total;
    }
}

/// Per-step sampling inputs shared by every sample of a batch.
struct BatchPlan<T> {
    indices: Vec<usize>,
    noise: Vec<Vec<T>>,
    select_coeffs: Option<Vec<f64>>,
}

pub struct Trainer<T: Scalar> {
    pub config: Config,
    pub phase: Phase,
    pub model: Model<T>,
    pub optim: AdamW<T>,
    /// Total loss of the first step, for the divergence guard.
    pub initial_total: Option<f64>,
    /// Frozen auxiliary embeddings per training sample (phase 2).
    targets: Vec<Vec<Array<T>>>,
}

pub(crate) fn step_rng(seed: u64, phase: u8, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase as u64) << 48) | step);
    rng
}

fn mean_alignment<'g, T: Scalar>(outputs: &[Tensor<'g, T>], targets: &[Tensor<'g, T>]) -> Result<Tensor<'g, T>> {
    let mut acc: Option<Tensor<'g, T>> = None;
    for (p, z) in outputs.iter().zip(targets) {
        let l = alignment_loss(*p, *z)?;
        acc = Some(match acc {
            Some(a) => a.add(&l)?,
            None => l,
        });
    }
    acc.expect("at least one modality").scale(T::one() / T::lit(outputs.len() as f64))
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            reason: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

impl<T: Scalar> Trainer<T> {
    fn assemble(config: Config, phase: Phase, model: Model<T>, train: &[BrainSample]) -> Result<Self> {
        let trainable = model.trainable(phase.frozen());
        let optim = AdamW::new(&config.optim, &model.params, trainable);
        let mut t = Self {
            config,
            phase,
            model,
            optim,
            initial_total: None,
            targets: Vec::new(),
        };
        if let Phase::Routing(_) = phase {
            t.targets = t.frozen_targets(train)?;
        }
        Ok(t)
    }

    /// Fresh model for the alignment phase.
    pub fn phase1(config: Config) -> Result<Self> {
        let model = Model::new(&config)?;
        Self::assemble(config, Phase::Alignment, model, &[])
    }

    /// Routing phase starting from a trained alignment-phase model.
    pub fn phase2(config: Config, model: Model<T>, routing: Routing, train: &[BrainSample]) -> Result<Self> {
        if model.modalities != config.corpus.modalities {
            return Err(Error::invalid(format!(
                "model has {} projectors, config expects {}",
                model.modalities, config.corpus.modalities
            )));
        }
        if let Routing::Single(i) = routing {
            if i >= model.modalities {
                return Err(Error::invalid(format!("single projector {i} outside [0, {})", model.modalities)));
            }
        }
        Self::assemble(config, Phase::Routing(routing), model, train)
    }

    pub(crate) fn restore(
        config: Config,
        phase: Phase,
        model: Model<T>,
        optim: AdamW<T>,
        initial_total: Option<f64>,
        train: &[BrainSample],
    ) -> Result<Self> {
        let mut t = Self::assemble(config, phase, model, train)?;
        if optim.trainable != t.optim.trainable {
            return Err(Error::invalid("checkpoint optimizer state does not match the phase's parameters"));
        }
        t.optim = optim;
        t.initial_total = initial_total;
        Ok(t)
    }

    /// Next step index (completed updates).
    pub fn step_index(&self) -> u64 {
        self.optim.step
    }

    pub fn total_steps(&self) -> u64 {
        match self.phase {
            Phase::Alignment => self.config.schedule.phase1_steps,
            Phase::Routing(_) => self.config.schedule.phase2_steps,
        }
    }

    fn frozen_targets(&self, train: &[BrainSample]) -> Result<Vec<Vec<Array<T>>>> {
        train
            .iter()
            .map(|s| {
                let g = Graph::new();
                let cx = Ctx::new(&g, &self.model.params);
                Ok(self
                    .model
                    .aux_embeddings(cx, s)?
                    .iter()
                    .map(|z| (*z.value()).clone())
                    .collect())
            })
            .collect()
    }

    fn sched(&self) -> ScheduleParams {
        self.config.schedule.params()
    }

    fn tau(&self) -> T {
        T::lit(self.config.router.tau)
    }

    fn plan(&self, train: &[BrainSample], step: u64) -> Result<BatchPlan<T>> {
        if train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        if let Phase::Routing(_) = self.phase {
            if self.targets.len() != train.len() {
                return Err(Error::invalid("training split differs from the one the trainer was built with"));
            }
        }
        let mut rng = step_rng(self.config.model.seed, self.phase.number(), step);
        let n = self.config.optim.batch_size.min(train.len());
        let indices = index::sample(&mut rng, train.len(), n).into_vec();
        let m = self.model.modalities;
        let hard = matches!(self.phase, Phase::Routing(Routing::Router(Strategy::HardSelect)));
        let noise: Vec<Vec<T>> = if hard {
            indices
                .iter()
                .map(|_| router::sample_gumbel(&mut rng, m).into_iter().map(T::lit).collect())
                .collect()
        } else {
            vec![Vec::new(); n]
        };
        let select_coeffs = if hard {
            let assignments = indices
                .iter()
                .zip(&noise)
                .map(|(&i, g)| {
                    let graph = Graph::new();
                    let cx = Ctx::new(&graph, &self.model.params);
                    let b = self.model.brain(cx, &train[i])?;
                    Ok(router::hard_select(cx, &self.model.router, b, self.tau(), g)?
                        .selected
                        .expect("hard select picks one"))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(select_coefficients(&assignments, m)?)
        } else {
            None
        };
        Ok(BatchPlan {
            indices,
            noise,
            select_coeffs,
        })
    }

    /// This sample's share of the batch objective, recorded on `cx`.
    fn sample_loss<'g>(
        &self,
        cx: Ctx<'g, T>,
        train: &[BrainSample],
        plan: &BatchPlan<T>,
        slot: usize,
        step: u64,
    ) -> Result<(Tensor<'g, T>, Parts)> {
        let idx = plan.indices[slot];
        let s = &train[idx];
        let n = plan.indices.len();
        let inv_n = T::one() / T::lit(n as f64);
        let sched = self.sched();
        let model = &self.model;
        let g = cx.graph;
        let brain = model.brain(cx, s)?;
        let outputs = model.project(cx, brain)?;
        let (loss, parts) = match self.phase {
            Phase::Alignment => {
                let z = model.aux_embeddings(cx, s)?;
                let l_cap = captioning_loss(cx, &model.decoder, &model.prompt, z[s.oracle], &s.targets, Some(PAD))?;
                let detached: Vec<_> = z.iter().map(|t| t.detach()).collect();
                let l_align = mean_alignment(&outputs, &detached)?;
                let total = phase1_loss(l_cap, l_align, step, &sched)?;
                let parts = Parts {
                    l_cap: l_cap.item().as_f64(),
                    l_align: l_align.item().as_f64(),
                    l_balance: 0.0,
                    total: total.item().as_f64(),
                };
                (total.scale(inv_n)?, parts)
            }
            Phase::Routing(routing) => {
                let z = self.targets[idx]
                    .iter()
                    .map(|a| g.constant(a.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let decision = model.route(cx, routing, brain, &outputs, self.tau(), &plan.noise[slot])?;
                let h = model.fuse(decision.weights, &outputs)?;
                let l_cap = captioning_loss(cx, &model.decoder, &model.prompt, h, &s.targets, Some(PAD))?;
                let l_align = mean_alignment(&outputs, &z)?;
                let share = match routing {
                    Routing::Router(Strategy::HardSelect) => Some(select_balance_row(
                        decision.relaxed.expect("hard select keeps y"),
                        plan.select_coeffs.as_ref().expect("planned"),
                        n,
                    )?),
                    Routing::Router(_) => Some(merge_balance_row(decision.weights, n)?),
                    Routing::Single(_) => None,
                };
                let zero = g.constant(Array::scalar(T::zero()))?;
                let share = share.unwrap_or(zero);
                // Per-sample part of the phase-2 objective: the captioning
                // and alignment means, plus this sample's balance share.
                let scaled = phase2_loss(l_cap.scale(inv_n)?, l_align.scale(inv_n)?, share, &sched)?;
                let balance = share.item().as_f64();
                let parts = Parts {
                    l_cap: l_cap.item().as_f64(),
                    l_align: l_align.item().as_f64(),
                    // Shares already carry 1/N; undo it so that the batch
                    // mean below sums them.
                    l_balance: balance * n as f64,
                    total: scaled.item().as_f64() * n as f64,
                };
                (scaled, parts)
            }
        };
        Ok((loss, parts))
    }

    fn sample_grads(
        &self,
        train: &[BrainSample],
        plan: &BatchPlan<T>,
        slot: usize,
        step: u64,
    ) -> Result<(ParamGrads<T>, Parts)> {
        let model = &self.model;
        let g = Graph::new();
        let (loss, parts) = self.sample_loss(Ctx::new(&g, &model.params), train, plan, slot, step)?;
        let mut grads = g.backward(loss)?;
        let mut out = ParamGrads::new(model.params.len());
        for (id, t) in g.bound_params() {
            if let Some(gr) = grads.take(&t) {
                out.set(id, gr);
            }
        }
        Ok((out, parts))
    }

    /// The objective of the batch drawn at `step`, as one graph over
    /// `params` instead of the trainer's own.
    pub(crate) fn batch_loss<'g>(
        &self,
        graph: &'g Graph<T>,
        params: &'g crate::params::ParamSet<T>,
        train: &[BrainSample],
        step: u64,
    ) -> Result<Tensor<'g, T>> {
        let plan = self.plan(train, step)?;
        let cx = Ctx::new(graph, params);
        let mut total: Option<Tensor<'g, T>> = None;
        for slot in 0..plan.indices.len() {
            let (l, _) = self.sample_loss(cx, train, &plan, slot, step)?;
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        Ok(total.expect("plan is never empty"))
    }

    /// Runs one optimizer step on a sampled batch.
    pub fn step(&mut self, train: &[BrainSample]) -> Result<StepStats> {
        let step = self.optim.step;
        let plan = self.plan(train, step).map_err(|e| diverged(step, e))?;
        let n = plan.indices.len();
        let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|lo| (lo, (lo + CHUNK).min(n))).collect();
        let partials = chunks
            .par_iter()
            .map(|&(lo, hi)| {
                let mut acc = ParamGrads::new(self.model.params.len());
                let mut parts = Parts::default();
                for slot in lo..hi {
                    let (g, p) = self.sample_grads(train, &plan, slot, step)?;
                    acc.merge(&g);
                    parts.add(p);
                }
                Ok((acc, parts))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| diverged(step, e))?;
        let mut grads = ParamGrads::new(self.model.params.len());
        let mut sum = Parts::default();
        for (g, p) in &partials {
            grads.merge(g);
            sum.add(*p);
        }
        let nf = n as f64;
        let stats = StepStats {
            step,
            l_cap: sum.l_cap / nf,
            l_align: sum.l_align / nf,
            align_weight: match self.phase {
                Phase::Alignment => crate::losses::alpha(step, &self.sched()),
                Phase::Routing(_) => self.config.schedule.align_weight,
            },
            l_balance: sum.l_balance / nf,
            total: sum.total / nf,
        };
        if !stats.total.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {} (l_cap {}, l_align {})", stats.total, stats.l_cap, stats.l_align),
            });
        }
        let first = *self.initial_total.get_or_insert(stats.total);
        if stats.total > self.config.optim.divergence_factor * first {
            return Err(Error::Diverged {
                step,
                reason: format!(
                    "loss {} exceeds {}x the initial {}",
                    stats.total, self.config.optim.divergence_factor, first
                ),
            });
        }
        for &id in &self.optim.trainable {
            if grads.get(id).is_none() {
                grads.set(id, Array::zeros(self.model.params.get(id).shape()));
            }
        }
        self.optim.update(&mut self.model.params, &grads)?;
        Ok(stats)
    }

    /// Steps until `until` updates have completed, writing one log line per
    /// step.
    pub fn run_until(&mut self, train: &[BrainSample], until: u64, log: &mut dyn Write) -> Result<Vec<StepStats>> {
        let mut out = Vec::new();
        while self.optim.step < until {
            let s = self.step(train)?;
            writeln!(log, "{}", s.tsv()).map_err(|e| Error::io("<training log>", e))?;
            out.push(s);
        }
        Ok(out)
    }

    /// Runs the configured number of steps for this phase.
    pub fn run(&mut self, train: &[BrainSample], log: &mut dyn Write) -> Result<Vec<StepStats>> {
        self.run_until(train, self.total_steps(), log)
    }
}
