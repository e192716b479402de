//! All trainable components in one parameter set, with the forward passes
//! both phases share.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Config;
use crate::error::{Error, Result};
use crate::nn::{AuxEncoder, Ctx, DecoderConfig, ProjectorEncoder, SoftPrompt, ToyCausalDecoder, INSTRUCTION};
use crate::params::{ParamId, ParamSet};
use crate::router::{self, RouterDecision, RouterParams, Strategy};
use crate::scalar::Scalar;
use crate::synthdata::{BrainSample, Vocabulary, EOS};
use crate::tensor::{Array, Tensor};

/// How phase-2 weights are produced: a router strategy, or a fixed single
/// projector for baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    Router(Strategy),
    Single(usize),
}

impl Routing {
    pub fn label(self) -> String {
        match self {
            Routing::Router(s) => s.name().to_string(),
            Routing::Single(i) => format!("single_{i}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.strip_prefix("single_") {
            Some(i) => i
                .parse()
                .map(Routing::Single)
                .map_err(|_| Error::invalid(format!("bad single-projector label `{s}`"))),
            None => s.parse().map(Routing::Router),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub params: ParamSet<T>,
    pub aux: Vec<AuxEncoder>,
    pub projectors: Vec<ProjectorEncoder>,
    pub router: RouterParams,
    pub decoder: ToyCausalDecoder,
    pub prompt: SoftPrompt,
    pub modalities: usize,
    pub queries: usize,
    pub dim: usize,
}

fn to_array<T: Scalar>(shape: &[usize], data: &[f64]) -> Result<Array<T>> {
    Array::new(shape.to_vec(), data.iter().map(|&x| T::lit(x)).collect())
}

impl<T: Scalar> Model<T> {
    /// Builds every component from `cfg.model.seed`.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let c = &cfg.corpus;
        let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
        let mut ps = ParamSet::new();
        let aux = (0..c.modalities)
            .map(|i| AuxEncoder::new(&mut ps, &mut rng, &format!("aux.{i}"), c.raw_dim, m.dim, m.queries))
            .collect();
        let projectors = (0..c.modalities)
            .map(|i| {
                ProjectorEncoder::new(
                    &mut ps,
                    &mut rng,
                    &format!("projector.{i}"),
                    c.brain_dim,
                    m.queries,
                    m.dim,
                    m.heads,
                    m.projector_layers,
                    m.ffn_mult,
                )
            })
            .collect();
        let router = RouterParams::new(&mut ps, &mut rng, "router", c.brain_dim, m.router_hidden, c.modalities, m.dim)?;
        let decoder = ToyCausalDecoder::new(
            &mut ps,
            &mut rng,
            "decoder",
            DecoderConfig {
                vocab: c.vocab,
                dim: m.dim,
                heads: m.heads,
                layers: m.decoder_layers,
                ffn_mult: m.ffn_mult,
                max_positions: m.max_positions,
                eos: EOS,
            },
        );
        let vocab = Vocabulary::new(c.vocab)?;
        let table = ps.get(decoder.tokens).clone();
        let prompt = SoftPrompt::from_instruction(&mut ps, "prompt", &table, &vocab.instruction_ids(INSTRUCTION)?, m.prompt_len)?;
        Ok(Self {
            params: ps,
            aux,
            projectors,
            router,
            decoder,
            prompt,
            modalities: c.modalities,
            queries: m.queries,
            dim: m.dim,
        })
    }

    /// Parameters whose names start with none of `frozen`.
    pub fn trainable(&self, frozen: &[&str]) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let name = self.params.name(id);
                !frozen.iter().any(|f| name.starts_with(f))
            })
            .collect()
    }

    pub fn brain<'g>(&self, cx: Ctx<'g, T>, s: &BrainSample) -> Result<Tensor<'g, T>> {
        cx.graph.constant(to_array(&[s.brain.len()], &s.brain)?)
    }

    /// Auxiliary embeddings `z_m`, each `[Q, d]`.
    pub fn aux_embeddings<'g>(&self, cx: Ctx<'g, T>, s: &BrainSample) -> Result<Vec<Tensor<'g, T>>> {
        if s.aux.len() != self.modalities {
            return Err(Error::invalid(format!(
                "sample {} has {} auxiliary streams, model expects {}",
                s.id,
                s.aux.len(),
                self.modalities
            )));
        }
        self.aux
            .iter()
            .zip(&s.aux)
            .map(|(enc, raw)| {
                let x = cx.graph.constant(to_array(raw.shape(), raw.data())?)?;
                enc.encode(cx, x)
            })
            .collect()
    }

    /// Projector outputs `P_i(b)`, each `[Q, d]`.
    pub fn project<'g>(&self, cx: Ctx<'g, T>, brain: Tensor<'g, T>) -> Result<Vec<Tensor<'g, T>>> {
        self.projectors.iter().map(|p| p.project(cx, brain)).collect()
    }

    /// Router weights for one sample. `noise` is used by hard select only.
    pub fn route<'g>(
        &self,
        cx: Ctx<'g, T>,
        routing: Routing,
        brain: Tensor<'g, T>,
        outputs: &[Tensor<'g, T>],
        tau: T,
        noise: &[T],
    ) -> Result<RouterDecision<'g, T>> {
        match routing {
            Routing::Router(Strategy::SoftMerge) => router::soft_merge(cx, &self.router, brain),
            Routing::Router(Strategy::HardSelect) => router::hard_select(cx, &self.router, brain, tau, noise),
            Routing::Router(Strategy::SimilarityMerge) => {
                let keys = outputs
                    .iter()
                    .map(|p| p.mean_axis(0)?.reshape(&[1, self.dim]))
                    .collect::<Result<Vec<_>>>()?;
                router::similarity_merge(cx, &self.router, brain, crate::tensor::concat(&keys, 0)?)
            }
            Routing::Single(i) => {
                if i >= self.modalities {
                    return Err(Error::invalid(format!(
                        "single projector {i} outside [0, {})",
                        self.modalities
                    )));
                }
                let mut w = vec![T::zero(); self.modalities];
                w[i] = T::one();
                let weights = cx.graph.constant(Array::vector(w))?;
                Ok(RouterDecision {
                    strategy: Strategy::HardSelect,
                    weights,
                    logits: weights,
                    relaxed: None,
                    noise: None,
                    tau: None,
                    query: None,
                    keys: None,
                    selected: Some(i),
                })
            }
        }
    }

    /// `H = Σ wᵢ Pᵢ(b)` reshaped to `[Q, d]`.
    pub fn fuse<'g>(&self, weights: Tensor<'g, T>, outputs: &[Tensor<'g, T>]) -> Result<Tensor<'g, T>> {
        router::fuse(weights, router::stack(outputs)?)?.reshape(&[self.queries, self.dim])
    }

    /// Named parameter values, in registration order.
    pub fn named_values(&self) -> Vec<(String, Array<T>)> {
        self.params
            .ids()
            .map(|id| (self.params.name(id).to_string(), self.params.get(id).clone()))
            .collect()
    }
}
