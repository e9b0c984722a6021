//! Seeded synthetic corpora for desk-scale experiments.
//!
//! Sentences are drawn from a lexicon of class-conditional keywords and
//! shared, Zipf-weighted filler words (`data/desk_lexicon.tsv`). Knobs cover
//! keyword strength, cross-class noise, injected filler, and a planted
//! artifact token that co-occurs with one class.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{RawDataset, RawExample, Split};
use crate::error::{Error, Result};

const DESK_LEXICON: &str = include_str!("../data/desk_lexicon.tsv");
/// Role name for shared words in the lexicon file.
pub const FILLER: &str = "filler";

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub class_names: Vec<String>,
    /// Keywords per class, same order as `class_names`.
    pub keywords: Vec<Vec<String>>,
    pub filler: Vec<String>,
    pub filler_weights: Vec<f64>,
}

impl Lexicon {
    /// The committed two-class (negative, positive) desk lexicon.
    pub fn desk() -> Self {
        Self::parse(DESK_LEXICON).expect("bundled lexicon parses")
    }

    /// `role<TAB>word<TAB>weight` rows; role is a class name or `filler`.
    /// Keyword weights are ignored (keywords are drawn uniformly).
    pub fn parse(text: &str) -> Result<Self> {
        let mut class_names: Vec<String> = Vec::new();
        let mut keywords: Vec<Vec<String>> = Vec::new();
        let mut filler = Vec::new();
        let mut filler_weights = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::Format {
                what: "lexicon",
                message: format!("line {}: {m}", i + 1),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad("expected 3 columns"));
            }
            let weight: f64 = fields[2].parse().map_err(|_| bad("bad weight"))?;
            if fields[0] == FILLER {
                filler.push(fields[1].to_string());
                filler_weights.push(weight);
            } else {
                let class = match class_names.iter().position(|c| c == fields[0]) {
                    Some(c) => c,
                    None => {
                        class_names.push(fields[0].to_string());
                        keywords.push(Vec::new());
                        class_names.len() - 1
                    }
                };
                keywords[class].push(fields[1].to_string());
            }
        }
        // Keep classes in lexicographic order so "negative" is class 0.
        let mut order: Vec<usize> = (0..class_names.len()).collect();
        order.sort_by(|&a, &b| class_names[a].cmp(&class_names[b]));
        let class_names = order.iter().map(|&i| class_names[i].clone()).collect();
        let keywords = order.iter().map(|&i| keywords[i].clone()).collect();
        if filler.is_empty() {
            return Err(Error::Format {
                what: "lexicon",
                message: "no filler words".into(),
            });
        }
        Ok(Lexicon {
            class_names,
            keywords,
            filler,
            filler_weights,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// A token inserted into a share of one class's sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedToken {
    pub word: String,
    pub class: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub size: usize,
    /// Inclusive range of filler words per sentence before injection.
    pub filler_words: (usize, usize),
    /// Inclusive range of own-class keywords per sentence.
    pub own_keywords: (usize, usize),
    /// Probability of one keyword from another class.
    pub cross_keyword_rate: f64,
    /// Extra filler inserted, as a fraction of the sentence length.
    pub injected_filler: f64,
    pub planted: Option<PlantedToken>,
}

impl CorpusConfig {
    /// Two own-class keywords among 8-20 filler words, with a 25% chance of
    /// a misleading keyword from the other class.
    pub fn desk(size: usize) -> Self {
        CorpusConfig {
            size,
            filler_words: (8, 20),
            own_keywords: (2, 2),
            cross_keyword_rate: 0.25,
            injected_filler: 0.0,
            planted: None,
        }
    }
}

/// Generates a class-balanced dataset; labels cycle through the classes.
pub fn generate(lexicon: &Lexicon, config: &CorpusConfig, split: Split, seed: u64) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler = WeightedIndex::new(&lexicon.filler_weights).expect("positive filler weights");
    let classes = lexicon.num_classes();
    let examples = (0..config.size)
        .map(|i| {
            let label = i % classes;
            let mut words: Vec<String> = (0..rng.gen_range(config.filler_words.0..=config.filler_words.1))
                .map(|_| lexicon.filler[filler.sample(&mut rng)].clone())
                .collect();
            let insert = |w: String, words: &mut Vec<String>, rng: &mut ChaCha8Rng| {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, w);
            };
            let own = &lexicon.keywords[label];
            for _ in 0..rng.gen_range(config.own_keywords.0..=config.own_keywords.1) {
                let w = own[rng.gen_range(0..own.len())].clone();
                insert(w, &mut words, &mut rng);
            }
            if classes > 1 && rng.gen_bool(config.cross_keyword_rate) {
                let other = (label + rng.gen_range(1..classes)) % classes;
                let pool = &lexicon.keywords[other];
                let w = pool[rng.gen_range(0..pool.len())].clone();
                insert(w, &mut words, &mut rng);
            }
            if let Some(p) = &config.planted {
                if p.class == label && rng.gen_bool(p.rate) {
                    insert(p.word.clone(), &mut words, &mut rng);
                }
            }
            let extra = (config.injected_filler * words.len() as f64).round() as usize;
            for _ in 0..extra {
                let w = lexicon.filler[filler.sample(&mut rng)].clone();
                insert(w, &mut words, &mut rng);
            }
            RawExample {
                label,
                primary: words,
                secondary: None,
            }
        })
        .collect();
    RawDataset {
        examples,
        class_names: lexicon.class_names.clone(),
        split,
    }
}

/// Writes a dataset as `label<TAB>text` rows.
pub fn to_tsv(data: &RawDataset) -> String {
    let mut out = String::new();
    for e in &data.examples {
        out.push_str(&data.class_names[e.label]);
        if let Some(premise) = &e.secondary {
            out.push('\t');
            out.push_str(&premise.join(" "));
        }
        out.push('\t');
        out.push_str(&e.primary.join(" "));
        out.push('\n');
    }
    out
}
