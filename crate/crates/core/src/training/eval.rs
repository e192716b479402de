//! Held-out evaluation: greedy captions, text metrics, router weights.

use std::fmt::Write as _;

use super::config::Config;
use super::model::{Model, Routing};
use super::trainer::step_rng;
use crate::error::{Error, Result};
use crate::losses::captioning_loss;
use crate::metrics::{self, bleu, rouge, wer, CovariateAnalysis, Rouge, TokenizedPair};
use crate::nn::Ctx;
use crate::router::{self, Strategy};
use crate::scalar::Scalar;
use crate::synthdata::{BrainSample, Vocabulary, EOS, PAD, TEXT};
use crate::tensor::{concat, Graph};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub id: usize,
    pub oracle: usize,
    pub covariate: f64,
    pub weights: Vec<f64>,
    /// Generated ids without the end token.
    pub hypothesis: Vec<usize>,
    /// Reference ids without the end token.
    pub reference: Vec<usize>,
    pub l_cap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub routing: String,
    pub split: String,
    pub bleu: [f64; 4],
    pub rouge1: f64,
    pub rouge_l: f64,
    pub wer: f64,
    pub l_cap: f64,
    /// Share of samples whose largest weight is on the planted modality.
    pub agreement: f64,
    /// Entropy of the mean routing distribution, in nats.
    pub routing_entropy: f64,
    pub mean_weights: Vec<f64>,
    pub samples: Vec<SampleResult>,
}

/// Entropy in nats of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

fn strip_end(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().take_while(|&t| t != EOS).filter(|&t| t != PAD).collect()
}

/// Greedy-decodes every sample from its fused brain embedding.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    config: &Config,
    routing: Routing,
    split: &str,
    samples: &[BrainSample],
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let vocab = Vocabulary::new(config.corpus.vocab)?;
    let m = model.modalities;
    let tau = T::lit(config.router.tau);
    let noisy = config.router.inference_noise && routing == Routing::Router(Strategy::HardSelect);
    let mut rng = step_rng(config.model.seed, 3, 0);
    let mut results = Vec::with_capacity(samples.len());
    for s in samples {
        let noise: Vec<T> = if noisy {
            router::sample_gumbel(&mut rng, m).into_iter().map(T::lit).collect()
        } else {
            vec![T::zero(); m]
        };
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.params);
        let brain = model.brain(cx, s)?;
        let outputs = model.project(cx, brain)?;
        let decision = model.route(cx, routing, brain, &outputs, tau, &noise)?;
        let h = model.fuse(decision.weights, &outputs)?;
        let l_cap = captioning_loss(cx, &model.decoder, &model.prompt, h, &s.targets, Some(PAD))?
            .item()
            .as_f64();
        let prefix = concat(&[model.prompt.tensor(cx), h], 0)?.value();
        let generated = model.decoder.decode_greedy(&model.params, &prefix, config.model.max_decode)?;
        results.push(SampleResult {
            id: s.id,
            oracle: s.oracle,
            covariate: s.covariate,
            weights: decision.weight_values().into_iter().map(|w| w.as_f64()).collect(),
            hypothesis: strip_end(&generated),
            reference: strip_end(&s.targets),
            l_cap,
        });
    }
    let words = |ids: &[usize]| vocab.tokens(ids).into_iter().map(String::from).collect::<Vec<_>>();
    let pairs = results
        .iter()
        .map(|r| TokenizedPair::from_tokens(words(&r.hypothesis), vec![words(&r.reference)]))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let mut mean_weights = vec![0.0; m];
    for r in &results {
        for (acc, w) in mean_weights.iter_mut().zip(&r.weights) {
            *acc += w / n;
        }
    }
    let agreement = results
        .iter()
        .filter(|r| crate::nn::argmax_index(&r.weights) == r.oracle)
        .count() as f64
        / n;
    Ok(EvalReport {
        routing: routing.label(),
        split: split.to_string(),
        bleu: [bleu(&pairs, 1)?, bleu(&pairs, 2)?, bleu(&pairs, 3)?, bleu(&pairs, 4)?],
        rouge1: rouge(&pairs, Rouge::One),
        rouge_l: rouge(&pairs, Rouge::L),
        wer: wer(&pairs)?,
        l_cap: results.iter().map(|r| r.l_cap).sum::<f64>() / n,
        agreement,
        routing_entropy: entropy(&mean_weights),
        mean_weights,
        samples: results,
    })
}

fn join<I: IntoIterator<Item = D>, D: std::fmt::Display>(xs: I, sep: &str) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

impl EvalReport {
    /// Summary block of `name<TAB>value` lines, a blank line, then one row
    /// per sample.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}\t{v}");
        };
        kv("routing", self.routing.clone());
        kv("split", self.split.clone());
        kv("samples", self.samples.len().to_string());
        for (k, b) in self.bleu.iter().enumerate() {
            kv(&format!("bleu{}", k + 1), b.to_string());
        }
        kv("rouge1", self.rouge1.to_string());
        kv("rougeL", self.rouge_l.to_string());
        kv("wer", self.wer.to_string());
        kv("l_cap", self.l_cap.to_string());
        kv("agreement", self.agreement.to_string());
        kv("routing_entropy", self.routing_entropy.to_string());
        kv("mean_weights", join(&self.mean_weights, ","));
        out.push('\n');
        out.push_str("id\toracle\tcovariate\tweights\tl_cap\thypothesis\treference\n");
        for r in &self.samples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id,
                r.oracle,
                r.covariate,
                join(&r.weights, ","),
                r.l_cap,
                vocab.decode(&r.hypothesis),
                vocab.decode(&r.reference)
            );
        }
        out
    }

    /// Per-sample `(id, weights)` read back from [`EvalReport::to_text`].
    pub fn parse_weights(text: &str) -> Result<Vec<(usize, Vec<f64>)>> {
        let bad = |line: usize, msg: &str| Error::invalid(format!("report line {line}: {msg}"));
        let mut rows = Vec::new();
        let mut in_table = false;
        for (i, line) in text.lines().enumerate() {
            if line.starts_with("id\toracle") {
                in_table = true;
                continue;
            }
            if !in_table || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 4 {
                return Err(bad(i + 1, "too few columns"));
            }
            let id = cols[0].parse().map_err(|_| bad(i + 1, "bad id"))?;
            let w = cols[3]
                .split(',')
                .map(|x| x.parse::<f64>().map_err(|_| bad(i + 1, "bad weight")))
                .collect::<Result<Vec<_>>>()?;
            rows.push((id, w));
        }
        if rows.is_empty() {
            return Err(Error::invalid("report has no per-sample rows"));
        }
        Ok(rows)
    }
}

/// Correlates the text projector's weight with each sample's covariate,
/// joining report rows to corpus samples by id.
pub fn covariate_analysis(
    weights: &[(usize, Vec<f64>)],
    samples: &[BrainSample],
    window: usize,
) -> Result<CovariateAnalysis> {
    let by_id: std::collections::HashMap<usize, &BrainSample> = samples.iter().map(|s| (s.id, s)).collect();
    let mut w = Vec::with_capacity(weights.len());
    let mut c = Vec::with_capacity(weights.len());
    for (id, ws) in weights {
        let s = by_id
            .get(id)
            .ok_or_else(|| Error::invalid(format!("report sample {id} is not in the corpus split")))?;
        let x = *ws
            .get(TEXT)
            .ok_or_else(|| Error::invalid(format!("sample {id} has no text-projector weight")))?;
        w.push(x);
        c.push(s.covariate);
    }
    metrics::weight_covariate_analysis(&w, &c, window)
}
