//! Corpus-level measurements over saliency maps: softmax/DkNN accuracy
//! parity, highlight sparsity, importance ranks of known artifact words,
//! and the inserted-word context probe.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::attribution::{Interpreter, Method, SaliencyMap};
use crate::corpus::{Example, ExampleSet, Vocabulary};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::neighbors::Dknn;

/// Pads columns to a common width. The first row is the header.
fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:<width$}", width = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    out
}

fn tsv(rows: &[Vec<String>]) -> String {
    rows.iter().map(|r| r.join("\t") + "\n").collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParityRow {
    pub gold: usize,
    pub softmax: usize,
    pub dknn: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParityReport {
    pub softmax_accuracy: f64,
    pub dknn_accuracy: f64,
    pub rows: Vec<ParityRow>,
}

impl ParityReport {
    /// Share of examples where softmax and DkNN predict the same class.
    pub fn agreement(&self) -> f64 {
        let same = self.rows.iter().filter(|r| r.softmax == r.dknn).count();
        same as f64 / self.rows.len().max(1) as f64
    }

    fn table(&self) -> Vec<Vec<String>> {
        vec![
            vec!["examples".into(), "softmax_accuracy".into(), "dknn_accuracy".into(), "agreement".into()],
            vec![
                self.rows.len().to_string(),
                format!("{:.4}", self.softmax_accuracy),
                format!("{:.4}", self.dknn_accuracy),
                format!("{:.4}", self.agreement()),
            ],
        ]
    }

    pub fn to_tsv(&self) -> String {
        tsv(&self.table())
    }

    pub fn to_text(&self) -> String {
        align(&self.table())
    }

    /// One row per example: gold, softmax and DkNN predictions.
    pub fn rows_tsv(&self, class_names: &[String]) -> String {
        let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
        let mut out = String::from("index\tgold\tsoftmax\tdknn\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{}\t{}\t{}", name(r.gold), name(r.softmax), name(r.dknn));
        }
        out
    }
}

/// Softmax and DkNN accuracy on the same examples.
pub fn parity_report(model: &Model, dknn: &Dknn, testset: &ExampleSet) -> Result<ParityReport> {
    if testset.is_empty() {
        return Err(Error::contract("test set is empty"));
    }
    let rows = testset
        .examples
        .par_iter()
        .map(|e| {
            Ok(ParityRow {
                gold: e.label,
                softmax: model.predict(e)?.class,
                dknn: dknn.predict(model, e)?.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(ParityReport {
        softmax_accuracy: rows.iter().filter(|r| r.softmax == r.gold).count() as f64 / n,
        dknn_accuracy: rows.iter().filter(|r| r.dknn == r.gold).count() as f64 / n,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankDirection {
    /// Largest signed value gets rank 1.
    MostImportant,
    /// Smallest signed value gets rank 1.
    MostNegative,
}

impl RankDirection {
    pub fn name(self) -> &'static str {
        match self {
            RankDirection::MostImportant => "most-important",
            RankDirection::MostNegative => "most-negative",
        }
    }
}

/// Rank (from 1) of every position; ties go to the earlier position.
pub fn word_ranks(values: &[f64], direction: RankDirection) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = match direction {
            RankDirection::MostImportant => values[b].total_cmp(&values[a]),
            RankDirection::MostNegative => values[a].total_cmp(&values[b]),
        };
        ord.then(a.cmp(&b))
    });
    let mut ranks = vec![0; values.len()];
    for (r, &pos) in order.iter().enumerate() {
        ranks[pos] = r + 1;
    }
    ranks
}

/// Average rank of one word under one method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCell {
    pub method: Method,
    pub count: usize,
    /// `None` when the word never occurs.
    pub average_rank: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub class: usize,
    pub class_name: String,
    pub word: String,
    pub cells: Vec<RankCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankTable {
    pub direction: RankDirection,
    pub methods: Vec<Method>,
    pub rows: Vec<RankRow>,
}

impl RankTable {
    pub fn row(&self, word: &str) -> Option<&RankRow> {
        self.rows.iter().find(|r| r.word == word)
    }

    fn table(&self) -> Vec<Vec<String>> {
        let mut header = vec!["class".to_string(), "word".to_string(), "count".to_string()];
        header.extend(self.methods.iter().map(|m| m.tag().to_string()));
        let mut rows = vec![header];
        for r in &self.rows {
            let count = r.cells.first().map_or(0, |c| c.count);
            let mut line = vec![r.class_name.clone(), r.word.clone(), count.to_string()];
            line.extend(r.cells.iter().map(|c| {
                c.average_rank
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
            }));
            rows.push(line);
        }
        rows
    }

    pub fn to_tsv(&self) -> String {
        tsv(&self.table())
    }

    pub fn to_text(&self) -> String {
        let mut out = align(&self.table());
        for r in &self.rows {
            if r.cells.iter().all(|c| c.count == 0) {
                let _ = writeln!(out, "note: {:?} never occurs in {} examples", r.word, r.class_name);
            }
        }
        let _ = writeln!(out, "(rank 1 = {})", self.direction.name());
        out
    }
}

/// Parses `class<TAB>word` rows.
pub fn parse_artifacts(text: &str, class_names: &[String]) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| Error::Format {
            what: "artifact list",
            message: format!("line {}: {m}", i + 1),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(bad(format!("expected 2 columns, found {}", fields.len())));
        }
        let class = class_names
            .iter()
            .position(|c| c == fields[0])
            .ok_or_else(|| bad(format!("unknown class {:?}", fields[0])))?;
        out.push((class, fields[1].trim().to_string()));
    }
    Ok(out)
}

/// Saliency maps for every example under every method, computed once.
fn saliency_grid(
    interp: &Interpreter<'_>,
    examples: &[&Example],
    methods: &[Method],
) -> Result<Vec<Vec<SaliencyMap>>> {
    examples
        .par_iter()
        .map(|e| methods.iter().map(|&m| interp.saliency(e, m)).collect())
        .collect()
}

/// Average most-important-first rank of each artifact word, over the
/// examples of the artifact's class that contain it (first occurrence).
pub fn artifact_rank_table(
    examples: &ExampleSet,
    artifacts: &[(usize, String)],
    methods: &[Method],
    interp: &Interpreter<'_>,
) -> Result<RankTable> {
    if artifacts.is_empty() {
        return Err(Error::contract("artifact list is empty"));
    }
    // (example index, position) hits per artifact.
    let hits: Vec<Vec<(usize, usize)>> = artifacts
        .iter()
        .map(|(class, word)| {
            examples
                .examples
                .iter()
                .enumerate()
                .filter(|(_, e)| e.label == *class)
                .filter_map(|(i, e)| e.words.iter().position(|w| w == word).map(|p| (i, p)))
                .collect()
        })
        .collect();
    let mut needed: Vec<usize> = hits.iter().flatten().map(|&(i, _)| i).collect();
    needed.sort_unstable();
    needed.dedup();
    let selected: Vec<&Example> = needed.iter().map(|&i| &examples.examples[i]).collect();
    let grid = saliency_grid(interp, &selected, methods)?;
    let slot: HashMap<usize, usize> = needed.iter().enumerate().map(|(s, &i)| (i, s)).collect();

    let rows = artifacts
        .iter()
        .zip(&hits)
        .map(|((class, word), hits)| {
            let cells = methods
                .iter()
                .enumerate()
                .map(|(mi, &method)| {
                    let ranks: Vec<usize> = hits
                        .iter()
                        .map(|&(i, pos)| {
                            let map = &grid[slot[&i]][mi];
                            word_ranks(&map.normalized, RankDirection::MostImportant)[pos]
                        })
                        .collect();
                    RankCell {
                        method,
                        count: ranks.len(),
                        average_rank: (!ranks.is_empty())
                            .then(|| ranks.iter().sum::<usize>() as f64 / ranks.len() as f64),
                    }
                })
                .collect();
            RankRow {
                class: *class,
                class_name: examples
                    .class_names
                    .get(*class)
                    .cloned()
                    .unwrap_or_else(|| class.to_string()),
                word: word.clone(),
                cells,
            }
        })
        .collect();
    Ok(RankTable {
        direction: RankDirection::MostImportant,
        methods: methods.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub threshold: f64,
    pub examples: usize,
    pub mean_length: f64,
    /// Mean number of highlighted words per method.
    pub mean_highlighted: Vec<(Method, f64)>,
}

impl SparsityReport {
    pub fn mean_for(&self, method: Method) -> Option<f64> {
        self.mean_highlighted
            .iter()
            .find(|(m, _)| *m == method)
            .map(|&(_, v)| v)
    }

    fn table(&self) -> Vec<Vec<String>> {
        let mut rows = vec![vec![
            "method".to_string(),
            "mean_highlighted".to_string(),
            "mean_length".to_string(),
            "threshold".to_string(),
            "examples".to_string(),
        ]];
        for (m, v) in &self.mean_highlighted {
            rows.push(vec![
                m.tag().to_string(),
                format!("{v:.4}"),
                format!("{:.4}", self.mean_length),
                format!("{}", self.threshold),
                self.examples.to_string(),
            ]);
        }
        rows
    }

    pub fn to_tsv(&self) -> String {
        tsv(&self.table())
    }

    pub fn to_text(&self) -> String {
        align(&self.table())
    }
}

/// Mean highlight count per method at `threshold`.
pub fn sparsity_stats(
    testset: &ExampleSet,
    methods: &[Method],
    threshold: f64,
    interp: &Interpreter<'_>,
) -> Result<SparsityReport> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::contract("threshold must be positive"));
    }
    let examples: Vec<&Example> = testset.examples.iter().collect();
    let grid = saliency_grid(interp, &examples, methods)?;
    let n = examples.len().max(1) as f64;
    let mean_length = examples.iter().map(|e| e.len()).sum::<usize>() as f64 / n;
    let mean_highlighted = methods
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let total: usize = grid.iter().map(|row| row[mi].highlight_count(threshold)).sum();
            (m, total as f64 / n)
        })
        .collect();
    Ok(SparsityReport {
        threshold,
        examples: examples.len(),
        mean_length,
        mean_highlighted,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub trigger: String,
    pub replacements: Vec<String>,
    pub inserted: String,
    pub label: Option<usize>,
    pub methods: Vec<Method>,
}

impl ProbeConfig {
    /// `key = value` lines: `trigger`, `replacements` (comma-separated),
    /// `insert`, optional `label` (a class name) and `methods`.
    pub fn parse(text: &str, class_names: &[String]) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "probe config",
                message: format!("line {}: expected key = value", i + 1),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k).cloned().ok_or_else(|| Error::Format {
                what: "probe config",
                message: format!("missing key {k:?}"),
            })
        };
        let list = |s: &str| -> Vec<String> {
            s.split(',')
                .map(|x| x.trim().to_string())
                .filter(|x| !x.is_empty())
                .collect()
        };
        let label = match map.get("label") {
            None => None,
            Some(name) => Some(class_names.iter().position(|c| c == name).ok_or_else(|| {
                Error::Format {
                    what: "probe config",
                    message: format!("unknown label {name:?}"),
                }
            })?),
        };
        let methods = match map.get("methods") {
            None => Method::ALL.to_vec(),
            Some(s) => list(s).iter().map(|m| m.parse()).collect::<Result<_>>()?,
        };
        let config = ProbeConfig {
            trigger: get("trigger")?,
            replacements: list(&get("replacements")?),
            inserted: get("insert")?,
            label,
            methods,
        };
        if config.replacements.is_empty() {
            return Err(Error::Format {
                what: "probe config",
                message: "replacement set is empty".into(),
            });
        }
        Ok(config)
    }

    /// One probe per (trigger occurrence, replacement): the trigger becomes
    /// the replacement with the inserted word immediately before it. Returns
    /// each probe with the position of the inserted word.
    pub fn generate(&self, source: &ExampleSet, vocab: &Vocabulary) -> Vec<(Example, usize)> {
        let mut out = Vec::new();
        for e in &source.examples {
            if self.label.is_some_and(|l| l != e.label) {
                continue;
            }
            for (pos, w) in e.words.iter().enumerate() {
                if *w != self.trigger {
                    continue;
                }
                for r in &self.replacements {
                    let mut words = e.words.clone();
                    words[pos] = r.clone();
                    words.insert(pos, self.inserted.clone());
                    let probe = Example {
                        primary: words.iter().map(|w| vocab.id(w)).collect(),
                        secondary: e.secondary.clone(),
                        label: e.label,
                        words,
                        secondary_words: e.secondary_words.clone(),
                    };
                    out.push((probe, pos));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub inserted: String,
    pub examples: usize,
    /// Average most-negative-first rank of the inserted word.
    pub average_rank: Vec<(Method, f64)>,
}

impl ProbeReport {
    pub fn rank_for(&self, method: Method) -> Option<f64> {
        self.average_rank
            .iter()
            .find(|(m, _)| *m == method)
            .map(|&(_, v)| v)
    }

    fn table(&self) -> Vec<Vec<String>> {
        let mut rows = vec![vec![
            "method".to_string(),
            "word".to_string(),
            "average_rank".to_string(),
            "examples".to_string(),
        ]];
        for (m, r) in &self.average_rank {
            rows.push(vec![
                m.tag().to_string(),
                self.inserted.clone(),
                format!("{r:.2}"),
                self.examples.to_string(),
            ]);
        }
        rows
    }

    pub fn to_tsv(&self) -> String {
        tsv(&self.table())
    }

    pub fn to_text(&self) -> String {
        let mut out = align(&self.table());
        out.push_str("(rank 1 = most-negative)\n");
        out
    }
}

pub fn context_probe(
    config: &ProbeConfig,
    source: &ExampleSet,
    vocab: &Vocabulary,
    interp: &Interpreter<'_>,
) -> Result<ProbeReport> {
    let probes = config.generate(source, vocab);
    if probes.is_empty() {
        return Err(Error::EmptyProbe(config.trigger.clone()));
    }
    let examples: Vec<&Example> = probes.iter().map(|(e, _)| e).collect();
    let grid = saliency_grid(interp, &examples, &config.methods)?;
    let average_rank = config
        .methods
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let total: usize = grid
                .iter()
                .zip(&probes)
                .map(|(row, (_, pos))| word_ranks(&row[mi].normalized, RankDirection::MostNegative)[*pos])
                .sum();
            (m, total as f64 / probes.len() as f64)
        })
        .collect();
    Ok(ProbeReport {
        inserted: config.inserted.clone(),
        examples: probes.len(),
        average_rank,
    })
}
