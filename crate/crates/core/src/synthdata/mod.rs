//! Synthetic corpus with one planted informative modality per sample.
//!
//! Each sample draws a latent `s ~ N(0, I)`. Its caption is a fixed template
//! sentence of `s`; exactly one auxiliary stream carries a linear image of
//! `s`, the others carry noise; the brain vector mixes `s` with the one-hot
//! of the informative modality.

mod io;
mod vocab;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Array;

pub use io::{read_split, write_corpus, write_split, CorpusHeader, FORMAT_VERSION};
pub use vocab::{
    covariate, sentence, template_of, Template, Vocabulary, EOS, LATENT_USED, MIN_VOCAB, NUM_FRAMES, NUM_REGISTERS,
    PAD,
};

/// Index of the text modality, whose share grows with the covariate.
pub const TEXT: usize = 1;

pub fn modality_name(m: usize) -> String {
    match m {
        0 => "image".into(),
        1 => "text".into(),
        2 => "audio".into(),
        k => format!("modality{k}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub brain_dim: usize,
    pub latent_dim: usize,
    pub modalities: usize,
    pub vocab: usize,
    /// Noise scale σ for brain and auxiliary signals.
    pub noise: f64,
    /// Base mixture over the informative modality.
    pub proportions: Vec<f64>,
    /// Log-odds slope of the text modality per register step.
    pub text_tilt: f64,
    /// Makes every auxiliary informative and drops the tilt.
    pub symmetric: bool,
    /// Width of each auxiliary row.
    pub raw_dim: usize,
    /// Rows per auxiliary stream; text uses one row per word, capped here.
    pub aux_rows: Vec<usize>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 2048,
            val: 128,
            test: 256,
            brain_dim: 128,
            latent_dim: 16,
            modalities: 3,
            vocab: 256,
            noise: 0.1,
            proportions: vec![1.0 / 3.0; 3],
            text_tilt: 0.8,
            symmetric: false,
            raw_dim: 16,
            aux_rows: vec![8, 8, 12],
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return bad("corpus split counts must all be positive".into());
        }
        if self.modalities <= TEXT {
            return bad(format!("need at least {} modalities", TEXT + 1));
        }
        if self.latent_dim < LATENT_USED {
            return bad(format!("latent_dim must be at least {LATENT_USED}"));
        }
        if self.brain_dim == 0 || self.raw_dim == 0 {
            return bad("brain_dim and raw_dim must be positive".into());
        }
        if self.vocab < MIN_VOCAB {
            return bad(format!("vocab must be at least {MIN_VOCAB}"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be a finite value >= 0, got {}", self.noise));
        }
        if self.proportions.len() != self.modalities || self.aux_rows.len() != self.modalities {
            return bad(format!(
                "proportions and aux_rows need {} entries",
                self.modalities
            ));
        }
        if self.proportions.iter().any(|&p| !(p >= 0.0)) || (self.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return bad("proportions must be non-negative and sum to 1".into());
        }
        if self.aux_rows.contains(&0) {
            return bad("aux_rows entries must be positive".into());
        }
        if !self.text_tilt.is_finite() {
            return bad("text_tilt must be finite".into());
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Short hex digest identifying the generating spec.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Mixture over the informative modality for a register.
    pub fn modality_weights(&self, register: usize) -> Vec<f64> {
        let tilt = if self.symmetric { 0.0 } else { self.text_tilt };
        self.proportions
            .iter()
            .enumerate()
            .map(|(m, &p)| {
                if m == TEXT {
                    p * (tilt * (register as f64 - 2.0)).exp()
                } else {
                    p
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrainSample {
    pub id: usize,
    pub brain: Vec<f64>,
    /// One `[rows, raw_dim]` array per modality.
    pub aux: Vec<Array<f64>>,
    /// Caption ids ending with [`EOS`].
    pub targets: Vec<usize>,
    pub oracle: usize,
    pub covariate: f64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub samples: Vec<BrainSample>,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<BrainSample>,
    pub val: Vec<BrainSample>,
    pub test: Vec<BrainSample>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[BrainSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

const MATRIX_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
const SAMPLE_STREAM_BASE: u64 = 2;

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Row-major `[rows, cols]` times a vector.
fn matvec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

struct Mixing {
    /// Per modality `[aux_rows·raw_dim, latent_dim]`.
    aux: Vec<Vec<f64>>,
    /// `[brain_dim, latent_dim + M]`.
    brain: Vec<f64>,
}

impl Mixing {
    fn new(spec: &CorpusSpec) -> Self {
        let mut rng = stream(spec.seed, MATRIX_STREAM);
        let ds = spec.latent_dim;
        let aux = spec
            .aux_rows
            .iter()
            .map(|&rows| gaussian(&mut rng, rows * spec.raw_dim * ds, (1.0 / ds as f64).sqrt()))
            .collect();
        let width = ds + spec.modalities;
        let brain = gaussian(&mut rng, spec.brain_dim * width, (1.0 / width as f64).sqrt());
        Self { aux, brain }
    }
}

fn make_sample(spec: &CorpusSpec, mix: &Mixing, vocab: &Vocabulary, id: usize) -> Result<BrainSample> {
    let mut rng = stream(spec.seed, SAMPLE_STREAM_BASE + id as u64);
    let s = gaussian(&mut rng, spec.latent_dim, 1.0);
    let (words, template) = sentence(&s);
    let mut targets: Vec<usize> = words
        .iter()
        .map(|w| vocab.id(w).expect("grammar words are in the vocabulary"))
        .collect();
    targets.push(EOS);

    let weights = spec.modality_weights(template.register);
    let oracle = WeightedIndex::new(&weights)
        .map_err(|e| Error::Config(format!("modality proportions: {e}")))?
        .sample(&mut rng);

    let mut aux = Vec::with_capacity(spec.modalities);
    for m in 0..spec.modalities {
        let rows = if m == TEXT {
            spec.aux_rows[m].min(words.len())
        } else {
            spec.aux_rows[m]
        };
        let n = rows * spec.raw_dim;
        let mut values = gaussian(&mut rng, n, spec.noise);
        if spec.symmetric || m == oracle {
            let signal = matvec(&mix.aux[m], spec.latent_dim, &s);
            for (v, x) in values.iter_mut().zip(&signal) {
                *v += x;
            }
        }
        aux.push(Array::new(vec![rows, spec.raw_dim], values)?);
    }

    let mut code = s.clone();
    code.extend((0..spec.modalities).map(|m| if m == oracle { 1.0 } else { 0.0 }));
    let mut brain = matvec(&mix.brain, code.len(), &code);
    for (b, e) in brain.iter_mut().zip(gaussian(&mut rng, spec.brain_dim, spec.noise)) {
        *b += e;
    }

    Ok(BrainSample {
        id,
        brain,
        aux,
        targets,
        oracle,
        covariate: covariate(template),
    })
}

/// Generates `spec.total()` samples; a pure function of `spec`.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mix = Mixing::new(spec);
    let vocab = Vocabulary::new(spec.vocab)?;
    let samples = (0..spec.total())
        .map(|id| make_sample(spec, &mix, &vocab, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        spec: spec.clone(),
        samples,
    })
}

/// Seeded disjoint split into the spec's train/val/test counts.
pub fn split(corpus: &Corpus) -> Result<Splits> {
    let spec = &corpus.spec;
    let need = spec.total();
    if need > corpus.samples.len() {
        return Err(Error::invalid(format!(
            "split needs {need} samples, corpus has {}",
            corpus.samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.samples.len()).collect();
    order.shuffle(&mut stream(spec.seed, SPLIT_STREAM));
    let take = |range: std::ops::Range<usize>| -> Vec<BrainSample> {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| corpus.samples[i].clone()).collect()
    };
    Ok(Splits {
        train: take(0..spec.train),
        val: take(spec.train..spec.train + spec.val),
        test: take(spec.train + spec.val..need),
    })
}
