//! Tokenization, vocabularies, word vectors and labeled TSV datasets.
//!
//! Datasets are read in two steps: [`load_dataset`] produces a [`RawDataset`]
//! of surface tokens, and [`RawDataset::encode`] maps it through a
//! [`Vocabulary`] into an [`ExampleSet`]. Keeping the raw form around lets the
//! vocabulary be built from the training split before any ids are assigned.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Splits on whitespace, then breaks every non-alphanumeric character out
/// into its own token.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                if lowercase {
                    word.extend(ch.to_lowercase());
                } else {
                    word.push(ch);
                }
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Joins tokens with single spaces. `tokenize(&render(t), false) == t` for
/// any output of [`tokenize`].
pub fn render(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary tokens; PAD and UNK are prepended.
    fn from_tokens(words: Vec<String>) -> Self {
        let mut tokens = Vec::with_capacity(words.len() + 2);
        tokens.push(PAD_TOKEN.to_string());
        tokens.push(UNK_TOKEN.to_string());
        tokens.extend(words);
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, ids }
    }

    /// Keeps every token seen at least `min_count` times, ordered by
    /// descending frequency and then lexicographically.
    pub fn build<I, T>(tokens: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::contract("min_count must be at least 1"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for token in tokens {
            let token = token.as_ref();
            if token == PAD_TOKEN || token == UNK_TOKEN {
                continue;
            }
            *counts.entry(token.to_string()).or_default() += 1;
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t).collect()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`] when it is out of vocabulary.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Surface form for display: unknown words are wrapped in angle brackets.
    pub fn display(&self, surface: &str) -> String {
        if self.ids.contains_key(surface) {
            surface.to_string()
        } else {
            format!("<{surface}>")
        }
    }

    /// One token per line; line number (from zero) is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != UNK_TOKEN {
            return Err(Error::Format {
                what: "vocabulary",
                message: format!("first two lines must be {PAD_TOKEN} and {UNK_TOKEN}"),
            });
        }
        let words: Vec<String> = lines[2..].iter().map(|s| s.to_string()).collect();
        let vocab = Self::from_tokens(words);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::Format {
                what: "vocabulary",
                message: "duplicate token".into(),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Hex SHA-256 of the persisted text form.
    pub fn hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Dense `|V| x dim` word-vector matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::contract("embedding rows differ in width"));
        }
        Ok(EmbeddingTable {
            dim,
            data: rows.into_iter().flatten().collect(),
        })
    }

    /// Uniform(-0.1, 0.1) rows for every id except PAD.
    pub fn random(rows: usize, dim: usize, seed: u64) -> Self {
        let mut table = Self::zeros(rows, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in 0..rows {
            if id != PAD {
                table.fill_uniform(id, &mut rng);
            }
        }
        table
    }

    fn fill_uniform(&mut self, id: usize, rng: &mut ChaCha8Rng) {
        for x in self.row_mut(id) {
            *x = rng.gen_range(-0.1..0.1);
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Reads word vectors in the `token v1 ... vd` text layout.
///
/// Rows for vocabulary tokens present in the file are copied verbatim;
/// the rest are drawn uniformly from (-0.1, 0.1) in id order from `seed`.
/// The PAD row is always zero. Tokens not in the vocabulary are skipped,
/// but every line is still validated.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path, vocab, dim, seed)
}

pub fn parse_embeddings(
    text: &str,
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::zeros(vocab.len(), dim);
    let mut found = vec![false; vocab.len()];
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let values = fields
            .map(|f| {
                f64::from_str(f).map_err(|_| Error::Ingest {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("cannot parse {f:?} as a real number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(Error::Dimension {
                path: path.to_path_buf(),
                line: line_no,
                expected: dim,
                found: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("non-finite value {bad}"),
            });
        }
        if let Some(id) = vocab.get(token) {
            if id != PAD && !found[id] {
                table.row_mut(id).copy_from_slice(&values);
                found[id] = true;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (id, hit) in found.iter().enumerate() {
        if id != PAD && !hit {
            table.fill_uniform(id, &mut rng);
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Single,
    Pair,
}

impl FromStr for Schema {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Schema::Single),
            "pair" => Ok(Schema::Pair),
            _ => Err(Error::Config(format!("unknown schema {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// One labeled input before vocabulary lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct RawExample {
    pub label: usize,
    /// Sentence, or hypothesis for pair tasks.
    pub primary: Vec<String>,
    /// Premise for pair tasks.
    pub secondary: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub examples: Vec<RawExample>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl RawDataset {
    /// Every token of every sentence, premises included.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().flat_map(|e| {
            e.secondary
                .iter()
                .flatten()
                .chain(e.primary.iter())
                .map(String::as_str)
        })
    }

    pub fn encode(&self, vocab: &Vocabulary) -> ExampleSet {
        let examples = self
            .examples
            .iter()
            .map(|raw| Example::from_words(vocab, raw))
            .collect();
        ExampleSet {
            examples,
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub primary: Vec<usize>,
    pub secondary: Option<Vec<usize>>,
    pub label: usize,
    /// Surface tokens aligned with `primary`.
    pub words: Vec<String>,
    pub secondary_words: Option<Vec<String>>,
}

impl Example {
    pub fn from_words(vocab: &Vocabulary, raw: &RawExample) -> Self {
        Example {
            primary: raw.primary.iter().map(|w| vocab.id(w)).collect(),
            secondary: raw
                .secondary
                .as_ref()
                .map(|s| s.iter().map(|w| vocab.id(w)).collect()),
            label: raw.label,
            words: raw.primary.clone(),
            secondary_words: raw.secondary.clone(),
        }
    }

    /// Single-sentence example from text, tokenized with lowercasing.
    pub fn from_text(vocab: &Vocabulary, text: &str, label: usize) -> Self {
        let raw = RawExample {
            label,
            primary: tokenize(text, true),
            secondary: None,
        };
        Self::from_words(vocab, &raw)
    }

    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }

    pub fn is_pair(&self) -> bool {
        self.secondary.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSet {
    pub examples: Vec<Example>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl ExampleSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Reads `label<TAB>text` (single) or `label<TAB>premise<TAB>hypothesis`
/// (pair) rows. Blank lines and lines starting with `#` are skipped.
pub fn load_dataset(
    path: &Path,
    schema: Schema,
    class_names: &[String],
    split: Split,
    lowercase: bool,
) -> Result<RawDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path, schema, class_names, split, lowercase)
}

pub fn parse_dataset(
    text: &str,
    path: &Path,
    schema: Schema,
    class_names: &[String],
    split: Split,
    lowercase: bool,
) -> Result<RawDataset> {
    let columns = match schema {
        Schema::Single => 2,
        Schema::Pair => 3,
    };
    let ingest = |line: usize, message: String| Error::Ingest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns {
            return Err(ingest(
                line_no,
                format!("expected {columns} columns, found {}", fields.len()),
            ));
        }
        let label = class_names
            .iter()
            .position(|c| c == fields[0].trim())
            .ok_or_else(|| ingest(line_no, format!("unknown label {:?}", fields[0])))?;
        let primary = tokenize(fields[columns - 1], lowercase);
        if primary.is_empty() {
            return Err(ingest(line_no, "empty text".into()));
        }
        let secondary = (schema == Schema::Pair).then(|| tokenize(fields[1], lowercase));
        examples.push(RawExample {
            label,
            primary,
            secondary,
        });
    }
    Ok(RawDataset {
        examples,
        class_names: class_names.to_vec(),
        split,
    })
}
