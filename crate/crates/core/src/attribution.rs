//! Word importance by leave-one-out (confidence or conformity) and by the
//! embedding gradient, plus normalization into saliency maps.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, UNK};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::neighbors::Dknn;

pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "conformity-loo")]
    Conformity,
    #[serde(rename = "confidence-loo")]
    Confidence,
    #[serde(rename = "gradient")]
    Gradient,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Conformity, Method::Confidence, Method::Gradient];

    /// Short name used on the command line and in file names.
    pub fn name(self) -> &'static str {
        match self {
            Method::Conformity => "conformity",
            Method::Confidence => "confidence",
            Method::Gradient => "gradient",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Method::Conformity => "conformity-loo",
            Method::Confidence => "confidence-loo",
            Method::Gradient => "gradient",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conformity" | "conformity-loo" => Ok(Method::Conformity),
            "confidence" | "confidence-loo" => Ok(Method::Confidence),
            "gradient" => Ok(Method::Gradient),
            _ => Err(Error::Config(format!(
                "unknown method {s:?} (expected conformity|confidence|gradient)"
            ))),
        }
    }
}

/// How a word is taken out of the input for leave-one-out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Removal {
    /// The sequence shortens by one.
    #[default]
    Delete,
    /// The word is replaced by UNK; length is unchanged.
    Unk,
}

/// Copy of `example` with word `i` of the primary sequence (the hypothesis
/// for pairs) taken out.
pub fn remove_word(example: &Example, i: usize, removal: Removal) -> Result<Example> {
    if i >= example.len() {
        return Err(Error::contract(format!(
            "position {i} out of range for a {}-word input",
            example.len()
        )));
    }
    let mut out = example.clone();
    match removal {
        Removal::Delete => {
            if example.len() == 1 {
                return Err(Error::Degenerate(
                    "cannot delete the only word of a one-word input".into(),
                ));
            }
            out.primary.remove(i);
            out.words.remove(i);
        }
        Removal::Unk => out.primary[i] = UNK,
    }
    Ok(out)
}

/// Raw importance `g_i` for each word of one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub values: Vec<f64>,
    pub method: Method,
    /// Class the importances explain.
    pub target: usize,
    /// Score of `target` on the full input.
    pub base_score: f64,
}

/// Score whose drop under word removal defines leave-one-out importance.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    /// Temperature-scaled softmax probability.
    Confidence,
    /// DkNN conformity.
    Conformity(&'a Dknn),
}

impl Scorer<'_> {
    fn method(&self) -> Method {
        match self {
            Scorer::Confidence => Method::Confidence,
            Scorer::Conformity(_) => Method::Conformity,
        }
    }

    /// Per-class scores and the predicted class.
    fn scores(&self, model: &Model, example: &Example) -> Result<(Vec<f64>, usize)> {
        match self {
            Scorer::Confidence => {
                let p = model.predict(example)?;
                Ok((p.probabilities, p.class))
            }
            Scorer::Conformity(dknn) => {
                let c = dknn.conformity(model, example)?;
                let class = c.predicted_class();
                Ok((c.per_class, class))
            }
        }
    }
}

/// `g_i = s(y | x) - s(y | x without word i)`, with `y` fixed to the
/// scorer's prediction on the full input.
pub fn loo_importance(
    scorer: Scorer<'_>,
    model: &Model,
    example: &Example,
    removal: Removal,
) -> Result<ImportanceVector> {
    let (full, target) = scorer.scores(model, example)?;
    let base_score = full[target];
    let values = (0..example.len())
        .into_par_iter()
        .map(|i| {
            let reduced = remove_word(example, i, removal)?;
            let (scores, _) = scorer.scores(model, &reduced)?;
            Ok(base_score - scores[target])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ImportanceVector {
        values,
        method: scorer.method(),
        target,
        base_score,
    })
}

/// `g_i = <d score_y / d v_i, v_i>` for the predicted class `y`, using the
/// pre-softmax score.
pub fn gradient_importance(model: &Model, example: &Example) -> Result<ImportanceVector> {
    let prediction = model.predict(example)?;
    let target = prediction.class;
    let grads = model.embedding_gradient(example, target)?;
    let table = &model.params.embeddings;
    let values = example
        .primary
        .iter()
        .zip(&grads)
        .map(|(&id, g)| g.iter().zip(table.row(id)).map(|(a, b)| a * b).sum())
        .collect();
    Ok(ImportanceVector {
        values,
        method: Method::Gradient,
        target,
        base_score: model.logits(example)?[target],
    })
}

/// Divides each value by the sum of absolute values. An all-zero input
/// stays all zero.
pub fn normalize(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Display forms; unknown words appear in angle brackets.
    pub words: Vec<String>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub method: Method,
    pub predicted_class: usize,
    pub predicted_label: String,
    pub base_score: f64,
}

impl SaliencyMap {
    pub fn new(words: Vec<String>, importance: &ImportanceVector, class_name: &str) -> Result<Self> {
        if words.len() != importance.values.len() {
            return Err(Error::contract(format!(
                "{} words but {} importance values",
                words.len(),
                importance.values.len()
            )));
        }
        Ok(SaliencyMap {
            words,
            normalized: normalize(&importance.values),
            raw: importance.values.clone(),
            method: importance.method,
            predicted_class: importance.target,
            predicted_label: class_name.to_string(),
            base_score: importance.base_score,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn highlight_count(&self, threshold: f64) -> usize {
        highlight_count(&self.normalized, threshold)
    }
}

/// Positions whose normalized magnitude reaches `threshold`.
pub fn highlight_count(normalized: &[f64], threshold: f64) -> usize {
    normalized.iter().filter(|v| v.abs() >= threshold).count()
}

/// Saliency map as written to disk, with the hashes of the model and store
/// that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyDocument {
    #[serde(flatten)]
    pub map: SaliencyMap,
    pub model_hash: String,
    pub store_hash: Option<String>,
}

impl SaliencyDocument {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "saliency document",
            message: e.to_string(),
        })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Format {
            what: "saliency document",
            message: e.to_string(),
        })
    }
}

/// Display forms of the primary words: UNK positions are bracketed.
pub fn display_words(example: &Example) -> Vec<String> {
    example
        .words
        .iter()
        .zip(&example.primary)
        .map(|(w, &id)| {
            if id == UNK {
                format!("<{w}>")
            } else {
                w.clone()
            }
        })
        .collect()
}

/// Bundles what every attribution method needs.
#[derive(Debug, Clone, Copy)]
pub struct Interpreter<'a> {
    pub model: &'a Model,
    pub dknn: Option<&'a Dknn>,
    pub class_names: &'a [String],
    pub removal: Removal,
}

impl<'a> Interpreter<'a> {
    pub fn new(model: &'a Model, dknn: Option<&'a Dknn>, class_names: &'a [String]) -> Self {
        Interpreter {
            model,
            dknn,
            class_names,
            removal: Removal::Delete,
        }
    }

    pub fn importance(&self, example: &Example, method: Method) -> Result<ImportanceVector> {
        match method {
            Method::Confidence => loo_importance(Scorer::Confidence, self.model, example, self.removal),
            Method::Conformity => {
                let dknn = self.dknn.ok_or_else(|| {
                    Error::contract("conformity leave-one-out needs a representation store")
                })?;
                loo_importance(Scorer::Conformity(dknn), self.model, example, self.removal)
            }
            Method::Gradient => gradient_importance(self.model, example),
        }
    }

    pub fn saliency(&self, example: &Example, method: Method) -> Result<SaliencyMap> {
        let importance = self.importance(example, method)?;
        let label = self
            .class_names
            .get(importance.target)
            .map_or_else(|| importance.target.to_string(), Clone::clone);
        SaliencyMap::new(display_words(example), &importance, &label)
    }
}
