//! Fixed toy vocabulary and the template grammar that turns a latent vector
//! into a sentence.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const EOS: usize = 0;
pub const PAD: usize = 1;

const SPECIALS: [&str; 2] = ["<eos>", "<pad>"];

const FUNCTION_WORDS: [&str; 12] = [
    "the", "a", "is", "every", "near", "some", "with", "and", "very", "slowly", "describe", "stimulus:",
];

/// `LEXICON[register][slot]` with slots adjective, noun, verb. Nouns fill
/// both noun slots.
const LEXICON: [[[&str; 4]; 3]; 5] = [
    [
        ["red", "heavy", "wooden", "round"],
        ["stone", "dog", "table", "apple"],
        ["rolls", "sits", "falls", "shines"],
    ],
    [
        ["small", "warm", "old", "soft"],
        ["house", "river", "tree", "horse"],
        ["moves", "stands", "grows", "waits"],
    ],
    [
        ["busy", "quiet", "strange", "simple"],
        ["city", "music", "game", "story"],
        ["changes", "begins", "returns", "fades"],
    ],
    [
        ["careful", "honest", "rare", "bold"],
        ["plan", "choice", "method", "reason"],
        ["matters", "improves", "persists", "fails"],
    ],
    [
        ["abstract", "eternal", "moral", "infinite"],
        ["justice", "truth", "freedom", "idea"],
        ["exists", "endures", "transcends", "emerges"],
    ],
];

/// Sentence frames; upper-case words are slots.
const FRAMES: [&str; 8] = [
    "the ADJ NOUN VERB",
    "a NOUN VERB the NOUN2",
    "the NOUN is ADJ",
    "every ADJ NOUN VERB near the NOUN2",
    "some NOUN VERB with a ADJ NOUN2",
    "the NOUN and the NOUN2 VERB",
    "a very ADJ NOUN",
    "the NOUN VERB slowly",
];

pub const NUM_FRAMES: usize = FRAMES.len();
pub const NUM_REGISTERS: usize = LEXICON.len();

/// Quantiles of |N(0, 1)| at 0.2, 0.4, 0.6, 0.8, so registers are equally
/// likely.
const REGISTER_EDGES: [f64; 4] = [0.253_347_1, 0.524_400_5, 0.841_621_2, 1.281_551_6];

/// Latent coordinates the grammar reads.
pub const LATENT_USED: usize = 13;

/// Number of ids the grammar needs.
pub const MIN_VOCAB: usize = SPECIALS.len() + FUNCTION_WORDS.len() + NUM_REGISTERS * 3 * 4;

#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary of `size` ids; ids past the grammar's words are
    /// reserved and never produced.
    pub fn new(size: usize) -> Result<Self> {
        if size < MIN_VOCAB {
            return Err(Error::invalid(format!(
                "vocabulary size {size} is below the {MIN_VOCAB} words the grammar uses"
            )));
        }
        let mut words: Vec<String> = SPECIALS.iter().chain(FUNCTION_WORDS.iter()).map(|w| w.to_string()).collect();
        for register in &LEXICON {
            for slot in register {
                words.extend(slot.iter().map(|w| w.to_string()));
            }
        }
        while words.len() < size {
            words.push(format!("<unused{}>", words.len()));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or("<oov>")
    }

    /// Whitespace-split, lower-cased encoding; no end token is added.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.id(&w)
                    .ok_or_else(|| Error::invalid(format!("word `{w}` not in vocabulary")))
            })
            .collect()
    }

    /// Words up to the first end token, skipping padding.
    pub fn decode(&self, ids: &[usize]) -> String {
        self.tokens(ids).join(" ")
    }

    pub fn tokens<'a>(&'a self, ids: &[usize]) -> Vec<&'a str> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD)
            .map(|&i| self.word(i))
            .collect()
    }

    pub fn instruction_ids(&self, instruction: &str) -> Result<Vec<usize>> {
        self.encode(instruction)
    }
}

/// Template class of a latent vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub frame: usize,
    pub register: usize,
}

fn bit(x: f64) -> usize {
    usize::from(x > 0.0)
}

fn two_bits(a: f64, b: f64) -> usize {
    2 * bit(a) + bit(b)
}

pub fn template_of(s: &[f64]) -> Template {
    let frame = 4 * bit(s[0]) + 2 * bit(s[1]) + bit(s[2]);
    let a = s[3].abs();
    let register = REGISTER_EDGES.iter().filter(|&&e| a >= e).count();
    Template { frame, register }
}

/// Deterministic sentence for latent `s` (at least [`LATENT_USED`] values).
pub fn sentence(s: &[f64]) -> (Vec<&'static str>, Template) {
    assert!(s.len() >= LATENT_USED, "latent needs {LATENT_USED} coordinates");
    let t = template_of(s);
    let lex = &LEXICON[t.register];
    let adj = lex[0][two_bits(s[5], s[6])];
    let noun = lex[1][two_bits(s[7], s[8])];
    let verb = lex[2][two_bits(s[9], s[10])];
    let noun2 = lex[1][two_bits(s[11], s[12])];
    let words = FRAMES[t.frame]
        .split(' ')
        .map(|w| match w {
            "ADJ" => adj,
            "NOUN" => noun,
            "VERB" => verb,
            "NOUN2" => noun2,
            other => other,
        })
        .collect();
    (words, t)
}

/// Abstractness-like covariate in `[1, 5]`, rising with the register.
pub fn covariate(t: Template) -> f64 {
    1.0 + 0.9 * t.register as f64 + 0.05 * t.frame as f64
}
