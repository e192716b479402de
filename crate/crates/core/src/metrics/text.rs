//! Corpus-level BLEU, ROUGE-1/L and word error rate.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// A hypothesis with one or more references, lower-cased and
/// whitespace-tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl TokenizedPair {
    pub fn new(hypothesis: &str, references: &[&str]) -> Result<Self> {
        Self::from_tokens(tokenize(hypothesis), references.iter().map(|r| tokenize(r)).collect())
    }

    pub fn from_tokens(hypothesis: Vec<String>, references: Vec<Vec<String>>) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::invalid("a pair needs at least one reference"));
        }
        Ok(Self {
            hypothesis,
            references,
        })
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with uniform weights over 1..=k grams, clipped counts, the
/// closest-reference brevity penalty and no smoothing.
pub fn bleu(pairs: &[TokenizedPair], k: usize) -> Result<f64> {
    if !(1..=4).contains(&k) {
        return Err(Error::invalid(format!("BLEU order must be 1..=4, got {k}")));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("BLEU over an empty corpus"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for pair in pairs {
        let h = &pair.hypothesis;
        hyp_len += h.len();
        ref_len += pair
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(h.len()), r))
            .expect("pairs have references");
        for n in 1..=k {
            let hyp = ngram_counts(h, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &pair.references {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            matched[n - 1] += hyp
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || (0..k).any(|i| matched[i] == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..k).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / k as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rouge {
    One,
    L,
}

fn f1(overlap: usize, hyp: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_pair(hyp: &[String], reference: &[String], variant: Rouge) -> f64 {
    if hyp.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let overlap = match variant {
        Rouge::One => {
            let r = ngram_counts(reference, 1);
            ngram_counts(hyp, 1)
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum()
        }
        Rouge::L => lcs(hyp, reference),
    };
    f1(overlap, hyp.len(), reference.len())
}

/// Mean over pairs of the best F1 across references; 0 for an empty corpus.
pub fn rouge(pairs: &[TokenizedPair], variant: Rouge) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| rouge_pair(&p.hypothesis, r, variant))
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / pairs.len() as f64
}

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Corpus WER in percent against each pair's first reference.
pub fn wer(pairs: &[TokenizedPair]) -> Result<f64> {
    let (mut edits, mut words) = (0usize, 0usize);
    for (i, p) in pairs.iter().enumerate() {
        let r = &p.references[0];
        if r.is_empty() {
            return Err(Error::invalid(format!("pair {i} has an empty reference")));
        }
        edits += edit_distance(&p.hypothesis, r);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::invalid("WER over an empty corpus"));
    }
    Ok(100.0 * edits as f64 / words as f64)
}
