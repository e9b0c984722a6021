//! Convolutional text classifier with a hand-written backward pass.
//!
//! Architecture: embedding lookup, one convolution bank per filter width
//! with ReLU and max-over-time pooling, then a stack of fully-connected
//! layers ending in class logits. Pair inputs encode both sentences with
//! the same convolution stack and join them with [`combine_pair`] before
//! the fully-connected stack.
//!
//! Layers are numbered for signatures as follows: layer 0 is the pooled
//! convolution output (or the combined pair features), layers `1..=H` are
//! the hidden fully-connected layers after ReLU, and layer `H + 1` is the
//! logit layer.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{hex_digest, EmbeddingTable, Example, ExampleSet, Schema, PAD};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "dknn-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub filter_widths: Vec<usize>,
    pub filters_per_width: usize,
    /// Hidden fully-connected widths; the logit layer is appended.
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
    pub task: Schema,
    pub designated_layers: Vec<usize>,
    pub seed: u64,
    pub temperature: f64,
}

impl EncoderConfig {
    /// CNN for single sentences: widths 3/4/5, 32 filters each, hidden
    /// layers 128 and 64, signatures from all four layers.
    pub fn single(num_classes: usize) -> Self {
        EncoderConfig {
            embedding_dim: 50,
            filter_widths: vec![3, 4, 5],
            filters_per_width: 32,
            hidden_widths: vec![128, 64],
            num_classes,
            task: Schema::Single,
            designated_layers: vec![0, 1, 2, 3],
            seed: 0,
            temperature: 1.0,
        }
    }

    /// Sentence-pair classifier: one hidden layer after the combiner and
    /// signatures from the two fully-connected layers.
    pub fn pair(num_classes: usize) -> Self {
        EncoderConfig {
            hidden_widths: vec![128],
            task: Schema::Pair,
            designated_layers: vec![1, 2],
            ..Self::single(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embedding_dim == 0 || self.filters_per_width == 0 || self.num_classes == 0 {
            return bad("embedding dim, filters per width and class count must be >= 1".into());
        }
        if self.filter_widths.is_empty() || self.filter_widths.contains(&0) {
            return bad("filter widths must be non-empty and >= 1".into());
        }
        if self.hidden_widths.contains(&0) {
            return bad("hidden widths must be >= 1".into());
        }
        if self.designated_layers.is_empty() {
            return bad("at least one designated layer is required".into());
        }
        if let Some(l) = self
            .designated_layers
            .iter()
            .find(|&&l| l >= self.num_layers())
        {
            return bad(format!(
                "designated layer {l} does not exist (model has {} layers)",
                self.num_layers()
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        Ok(())
    }

    /// Layer count including layer 0 and the logit layer.
    pub fn num_layers(&self) -> usize {
        self.hidden_widths.len() + 2
    }

    pub fn pooled_width(&self) -> usize {
        self.filter_widths.len() * self.filters_per_width
    }

    pub fn max_filter_width(&self) -> usize {
        self.filter_widths.iter().copied().max().unwrap_or(1)
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        let features = match self.task {
            Schema::Single => self.pooled_width(),
            Schema::Pair => 4 * self.pooled_width(),
        };
        let mut widths = vec![features];
        widths.extend(&self.hidden_widths);
        widths.push(self.num_classes);
        widths
    }

    pub fn signature_widths(&self) -> Vec<usize> {
        let widths = self.layer_widths();
        self.designated_layers.iter().map(|&l| widths[l]).collect()
    }
}

/// Filters of one width; `weights` is `filters x (width * dim)` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBank {
    pub width: usize,
    pub filters: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Fully-connected layer; `weights` is `outputs x inputs` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64], relu: bool) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.inputs)) {
            *o += dot(row, x);
            if relu && *o < 0.0 {
                *o = 0.0;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embeddings: EmbeddingTable,
    pub convs: Vec<ConvBank>,
    pub dense: Vec<Dense>,
}

impl ModelParams {
    fn all_finite(&self) -> bool {
        self.embeddings.as_slice().iter().all(|x| x.is_finite())
            && self
                .convs
                .iter()
                .all(|c| c.weights.iter().chain(&c.bias).all(|x| x.is_finite()))
            && self
                .dense
                .iter()
                .all(|d| d.weights.iter().chain(&d.bias).all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ModelParams,
}

/// Per-layer representations of one input, in designated-layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSignature {
    pub vectors: Vec<Vec<f64>>,
}

impl LayerSignature {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.vectors.iter().map(Vec::len).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub class: usize,
}

/// First index of the maximum; NaN never wins.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature`, shifted by the max logit.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `[u; v; u*v; |u-v|]`.
pub fn combine_pair(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.len() != v.len() {
        return Err(Error::contract(format!(
            "combine_pair width mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let mut out = Vec::with_capacity(4 * u.len());
    out.extend_from_slice(u);
    out.extend_from_slice(v);
    out.extend(u.iter().zip(v).map(|(a, b)| a * b));
    out.extend(u.iter().zip(v).map(|(a, b)| (a - b).abs()));
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

struct SentenceTape {
    /// Trailing PADs removed, then PAD-extended to the widest filter.
    ids: Vec<usize>,
    /// Winning window start per pooled unit, `None` when the unit is inactive.
    winners: Vec<Option<usize>>,
    pooled: Vec<f64>,
}

struct Tape {
    sentences: Vec<SentenceTape>,
    /// Post-activation output of every layer; the last entry holds logits.
    activations: Vec<Vec<f64>>,
}

impl Tape {
    fn logits(&self) -> &[f64] {
        self.activations.last().expect("tape has a logit layer")
    }
}

/// Gradients shaped like [`ModelParams`], with embedding gradients kept
/// per input position.
#[derive(Debug, Clone)]
struct Grads {
    conv_w: Vec<Vec<f64>>,
    conv_b: Vec<Vec<f64>>,
    dense_w: Vec<Vec<f64>>,
    dense_b: Vec<Vec<f64>>,
    /// Per sentence: (token id, gradient row) for every effective position.
    positions: Vec<Vec<(usize, Vec<f64>)>>,
}

impl Grads {
    fn zeros(model: &Model) -> Self {
        Grads {
            conv_w: model.params.convs.iter().map(|c| vec![0.0; c.weights.len()]).collect(),
            conv_b: model.params.convs.iter().map(|c| vec![0.0; c.bias.len()]).collect(),
            dense_w: model.params.dense.iter().map(|d| vec![0.0; d.weights.len()]).collect(),
            dense_b: model.params.dense.iter().map(|d| vec![0.0; d.bias.len()]).collect(),
            positions: Vec::new(),
        }
    }
}

impl Model {
    /// Random initialization from `config.seed`: He-uniform weights, zero biases.
    pub fn new(config: EncoderConfig, embeddings: EmbeddingTable) -> Result<Self> {
        config.validate()?;
        if embeddings.dim() != config.embedding_dim {
            return Err(Error::Config(format!(
                "embedding table has width {}, config expects {}",
                embeddings.dim(),
                config.embedding_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embedding_dim;
        let f = config.filters_per_width;
        let convs = config
            .filter_widths
            .iter()
            .map(|&w| ConvBank {
                width: w,
                filters: f,
                weights: uniform(&mut rng, f * w * d, (6.0 / (w * d) as f64).sqrt()),
                bias: vec![0.0; f],
            })
            .collect();
        let widths = config.layer_widths();
        let dense = widths
            .windows(2)
            .map(|io| Dense {
                inputs: io[0],
                outputs: io[1],
                weights: uniform(&mut rng, io[0] * io[1], (6.0 / io[0] as f64).sqrt()),
                bias: vec![0.0; io[1]],
            })
            .collect();
        Ok(Model {
            config,
            params: ModelParams {
                embeddings,
                convs,
                dense,
            },
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn effective_ids(&self, ids: &[usize]) -> Vec<usize> {
        let end = ids.iter().rposition(|&id| id != PAD).map_or(0, |p| p + 1);
        let mut out = ids[..end].to_vec();
        let width = self.config.max_filter_width();
        if out.len() < width {
            out.resize(width, PAD);
        }
        out
    }

    fn encode_sentence(&self, ids: &[usize]) -> SentenceTape {
        let ids = self.effective_ids(ids);
        let table = &self.params.embeddings;
        let d = table.dim();
        let rows: Vec<&[f64]> = ids.iter().map(|&id| table.row(id)).collect();
        let mut pooled = Vec::with_capacity(self.config.pooled_width());
        let mut winners = Vec::with_capacity(self.config.pooled_width());
        for bank in &self.params.convs {
            let w = bank.width;
            for (filter, kernel) in bank.weights.chunks_exact(w * d).enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for t in 0..=ids.len() - w {
                    let z = bank.bias[filter]
                        + (0..w)
                            .map(|j| dot(&kernel[j * d..(j + 1) * d], rows[t + j]))
                            .sum::<f64>();
                    if z > best {
                        best = z;
                        arg = t;
                    }
                }
                if best > 0.0 {
                    pooled.push(best);
                    winners.push(Some(arg));
                } else {
                    pooled.push(0.0);
                    winners.push(None);
                }
            }
        }
        SentenceTape {
            ids,
            winners,
            pooled,
        }
    }

    fn forward(&self, example: &Example) -> Result<Tape> {
        if example.primary.is_empty() {
            return Err(Error::contract("cannot encode an empty example"));
        }
        let (sentences, features) = match (self.config.task, &example.secondary) {
            (Schema::Single, None) => {
                let s = self.encode_sentence(&example.primary);
                let features = s.pooled.clone();
                (vec![s], features)
            }
            (Schema::Pair, Some(premise)) => {
                let u = self.encode_sentence(premise);
                let v = self.encode_sentence(&example.primary);
                let features = combine_pair(&u.pooled, &v.pooled)?;
                (vec![u, v], features)
            }
            (Schema::Single, Some(_)) => {
                return Err(Error::contract("single-sentence model given a pair example"))
            }
            (Schema::Pair, None) => {
                return Err(Error::contract("pair model given a single-sentence example"))
            }
        };
        let mut activations = vec![features];
        let last = self.params.dense.len() - 1;
        for (l, layer) in self.params.dense.iter().enumerate() {
            let next = layer.forward(activations.last().unwrap(), l < last);
            activations.push(next);
        }
        Ok(Tape {
            sentences,
            activations,
        })
    }

    /// Backpropagates `dlogits` through the tape.
    fn backward(&self, tape: &Tape, dlogits: &[f64]) -> Grads {
        let mut grads = Grads::zeros(self);
        let mut upstream = dlogits.to_vec();
        for (l, layer) in self.params.dense.iter().enumerate().rev() {
            let input = &tape.activations[l];
            let dw = &mut grads.dense_w[l];
            for (o, &g) in upstream.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, input, &mut dw[o * layer.inputs..(o + 1) * layer.inputs]);
                }
            }
            grads.dense_b[l].copy_from_slice(&upstream);
            let mut below = vec![0.0; layer.inputs];
            for (row, &g) in layer.weights.chunks_exact(layer.inputs).zip(&upstream) {
                if g != 0.0 {
                    axpy(g, row, &mut below);
                }
            }
            if l > 0 {
                // ReLU on hidden layers: post-activation zero means inactive.
                for (b, &a) in below.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
            upstream = below;
        }

        let pooled_grads: Vec<Vec<f64>> = match tape.sentences.len() {
            1 => vec![upstream],
            _ => {
                let u = &tape.sentences[0].pooled;
                let v = &tape.sentences[1].pooled;
                let h = u.len();
                let g = |block: usize, i: usize| upstream[block * h + i];
                let mut gu = vec![0.0; h];
                let mut gv = vec![0.0; h];
                for i in 0..h {
                    let sign = match u[i].partial_cmp(&v[i]) {
                        Some(std::cmp::Ordering::Greater) => 1.0,
                        Some(std::cmp::Ordering::Less) => -1.0,
                        _ => 0.0,
                    };
                    gu[i] = g(0, i) + g(2, i) * v[i] + g(3, i) * sign;
                    gv[i] = g(1, i) + g(2, i) * u[i] - g(3, i) * sign;
                }
                vec![gu, gv]
            }
        };

        let d = self.config.embedding_dim;
        for (sentence, gpool) in tape.sentences.iter().zip(&pooled_grads) {
            let mut positions: Vec<(usize, Vec<f64>)> =
                sentence.ids.iter().map(|&id| (id, vec![0.0; d])).collect();
            let mut unit = 0;
            for (b, bank) in self.params.convs.iter().enumerate() {
                let w = bank.width;
                for filter in 0..bank.filters {
                    let g = gpool[unit];
                    if let (Some(t), true) = (sentence.winners[unit], g != 0.0) {
                        let kernel = &bank.weights[filter * w * d..(filter + 1) * w * d];
                        let dk = &mut grads.conv_w[b][filter * w * d..(filter + 1) * w * d];
                        for j in 0..w {
                            let row = self.params.embeddings.row(sentence.ids[t + j]);
                            axpy(g, row, &mut dk[j * d..(j + 1) * d]);
                            axpy(g, &kernel[j * d..(j + 1) * d], &mut positions[t + j].1);
                        }
                        grads.conv_b[b][filter] += g;
                    }
                    unit += 1;
                }
            }
            grads.positions.push(positions);
        }
        grads
    }

    /// Layer signature and temperature-scaled prediction for one input.
    pub fn encode(&self, example: &Example) -> Result<(LayerSignature, Prediction)> {
        let tape = self.forward(example)?;
        let vectors = self
            .config
            .designated_layers
            .iter()
            .map(|&l| tape.activations[l].clone())
            .collect();
        let probabilities = softmax(tape.logits(), self.config.temperature);
        let class = argmax(&probabilities);
        Ok((
            LayerSignature { vectors },
            Prediction {
                probabilities,
                class,
            },
        ))
    }

    pub fn predict(&self, example: &Example) -> Result<Prediction> {
        Ok(self.encode(example)?.1)
    }

    /// Pre-softmax class scores.
    pub fn logits(&self, example: &Example) -> Result<Vec<f64>> {
        Ok(self.forward(example)?.logits().to_vec())
    }

    /// Gradient of the pre-softmax score of `class` with respect to the
    /// embedding at each position of the primary sequence. Stripped trailing
    /// PAD positions get zero rows.
    pub fn embedding_gradient(&self, example: &Example, class: usize) -> Result<Vec<Vec<f64>>> {
        if class >= self.num_classes() {
            return Err(Error::contract(format!("class {class} out of range")));
        }
        let tape = self.forward(example)?;
        let mut dlogits = vec![0.0; self.num_classes()];
        dlogits[class] = 1.0;
        let grads = self.backward(&tape, &dlogits);
        let primary = grads.positions.last().expect("primary sentence");
        let d = self.config.embedding_dim;
        Ok((0..example.len())
            .map(|i| {
                primary
                    .get(i)
                    .map_or_else(|| vec![0.0; d], |(_, g)| g.clone())
            })
            .collect())
    }

    /// Cross-entropy loss and its gradient for one labeled example.
    fn example_grads(&self, example: &Example, scale: f64) -> Result<(f64, Grads)> {
        let tape = self.forward(example)?;
        let t = self.config.temperature;
        let probs = softmax(tape.logits(), t);
        let loss = -probs[example.label].ln();
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(c, &p)| scale * (p - f64::from(u8::from(c == example.label))) / t)
            .collect();
        Ok((loss, self.backward(&tape, &dlogits)))
    }

    fn apply(&mut self, grads: &Grads, lr: f64) {
        for (bank, (gw, gb)) in self
            .params
            .convs
            .iter_mut()
            .zip(grads.conv_w.iter().zip(&grads.conv_b))
        {
            axpy(-lr, gw, &mut bank.weights);
            axpy(-lr, gb, &mut bank.bias);
        }
        for (layer, (gw, gb)) in self
            .params
            .dense
            .iter_mut()
            .zip(grads.dense_w.iter().zip(&grads.dense_b))
        {
            axpy(-lr, gw, &mut layer.weights);
            axpy(-lr, gb, &mut layer.bias);
        }
        for sentence in &grads.positions {
            for (id, g) in sentence {
                if *id != PAD {
                    axpy(-lr, g, self.params.embeddings.row_mut(*id));
                }
            }
        }
    }

    /// Mini-batch SGD on mean cross-entropy. Per-example gradients are
    /// computed in parallel and summed in example order, so the result
    /// depends only on the inputs and `hyper.seed`.
    pub fn train(&self, trainset: &ExampleSet, hyper: &TrainConfig) -> Result<Trained> {
        if trainset.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        if hyper.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let mut model = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let mut order: Vec<usize> = (0..trainset.len()).collect();
        let mut epoch_losses = Vec::with_capacity(hyper.epochs);
        for epoch in 0..hyper.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (batch, chunk) in order.chunks(hyper.batch_size).enumerate() {
                let scale = 1.0 / chunk.len() as f64;
                let per_example = chunk
                    .par_iter()
                    .map(|&i| model.example_grads(&trainset.examples[i], scale))
                    .collect::<Result<Vec<_>>>()?;
                let mut sum = Grads::zeros(&model);
                let mut batch_loss = 0.0;
                for (loss, g) in per_example {
                    batch_loss += loss;
                    accumulate(&mut sum, g);
                }
                if !batch_loss.is_finite() {
                    return Err(Error::Divergence { epoch, batch });
                }
                total += batch_loss;
                model.apply(&sum, hyper.learning_rate);
            }
            if !model.params.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: order.len().div_ceil(hyper.batch_size),
                });
            }
            epoch_losses.push(total / trainset.len() as f64);
        }
        Ok(Trained {
            model,
            epoch_losses,
        })
    }

    pub fn accuracy(&self, set: &ExampleSet) -> Result<f64> {
        let preds = set
            .examples
            .par_iter()
            .map(|e| self.predict(e).map(|p| p.class == e.label))
            .collect::<Result<Vec<bool>>>()?;
        Ok(preds.iter().filter(|&&ok| ok).count() as f64 / set.len().max(1) as f64)
    }

    /// Fits the softmax temperature on held-out data and stores it.
    pub fn fit_temperature(&mut self, heldout: &ExampleSet) -> Result<f64> {
        if heldout.is_empty() {
            return Err(Error::contract("held-out set is empty"));
        }
        let logits = heldout
            .examples
            .par_iter()
            .map(|e| self.logits(e))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = heldout.examples.iter().map(|e| e.label).collect();
        let t = fit_temperature_logits(&logits, &labels);
        self.config.temperature = t;
        Ok(t)
    }

    /// Serialized model document.
    pub fn to_json(&self, vocab_hash: &str) -> Result<String> {
        let doc = ModelFileRef {
            format: MODEL_FORMAT,
            version: MODEL_VERSION,
            vocab_hash,
            config: &self.config,
            params: &self.params,
        };
        serde_json::to_string(&doc).map_err(|e| Error::Format {
            what: "model",
            message: e.to_string(),
        })
    }

    /// Writes the model document and returns its hash.
    pub fn save(&self, path: &Path, vocab_hash: &str) -> Result<String> {
        let json = self.to_json(vocab_hash)?;
        fs::write(path, &json).map_err(|e| Error::io(path, e))?;
        Ok(hex_digest(json.as_bytes()))
    }

    /// Parses a model document; rejects it when the vocabulary hash it was
    /// trained against differs from `vocab_hash`. Returns the model and the
    /// hash of the file bytes.
    pub fn from_json(json: &str, vocab_hash: &str) -> Result<(Self, String)> {
        let doc: ModelFile = serde_json::from_str(json).map_err(|e| Error::Format {
            what: "model",
            message: e.to_string(),
        })?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(Error::Format {
                what: "model",
                message: format!("unsupported format {} v{}", doc.format, doc.version),
            });
        }
        if doc.vocab_hash != vocab_hash {
            return Err(Error::HashMismatch {
                what: "vocabulary",
                expected: doc.vocab_hash,
                found: vocab_hash.to_string(),
            });
        }
        let model = Model {
            config: doc.config,
            params: doc.params,
        };
        model.check_shapes()?;
        Ok((model, hex_digest(json.as_bytes())))
    }

    pub fn load(path: &Path, vocab_hash: &str) -> Result<(Self, String)> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json, vocab_hash)
    }

    fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let bad = |m: &str| {
            Err(Error::Format {
                what: "model",
                message: m.to_string(),
            })
        };
        let d = self.config.embedding_dim;
        if self.params.embeddings.dim() != d {
            return bad("embedding width disagrees with config");
        }
        if self.params.convs.len() != self.config.filter_widths.len() {
            return bad("convolution bank count disagrees with config");
        }
        for (bank, &w) in self.params.convs.iter().zip(&self.config.filter_widths) {
            let f = self.config.filters_per_width;
            if bank.width != w
                || bank.filters != f
                || bank.weights.len() != f * w * d
                || bank.bias.len() != f
            {
                return bad("convolution bank shape disagrees with config");
            }
        }
        let widths = self.config.layer_widths();
        if self.params.dense.len() != widths.len() - 1 {
            return bad("dense layer count disagrees with config");
        }
        for (layer, io) in self.params.dense.iter().zip(widths.windows(2)) {
            if layer.inputs != io[0]
                || layer.outputs != io[1]
                || layer.weights.len() != io[0] * io[1]
                || layer.bias.len() != io[1]
            {
                return bad("dense layer shape disagrees with config");
            }
        }
        if !self.params.all_finite() {
            return bad("non-finite parameter");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

fn accumulate(sum: &mut Grads, g: Grads) {
    for (a, b) in sum.conv_w.iter_mut().zip(&g.conv_w) {
        axpy(1.0, b, a);
    }
    for (a, b) in sum.conv_b.iter_mut().zip(&g.conv_b) {
        axpy(1.0, b, a);
    }
    for (a, b) in sum.dense_w.iter_mut().zip(&g.dense_w) {
        axpy(1.0, b, a);
    }
    for (a, b) in sum.dense_b.iter_mut().zip(&g.dense_b) {
        axpy(1.0, b, a);
    }
    sum.positions.extend(g.positions);
}

#[derive(Serialize)]
struct ModelFileRef<'a> {
    format: &'a str,
    version: u32,
    vocab_hash: &'a str,
    config: &'a EncoderConfig,
    params: &'a ModelParams,
}

#[derive(Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    vocab_hash: String,
    config: EncoderConfig,
    params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean negative log-likelihood of `labels` under `softmax(logits / t)`.
pub fn nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = z.iter().map(|&v| ((v - max) / t).exp()).sum::<f64>().ln();
            lse - (z[y] - max) / t
        })
        .sum();
    total / logits.len().max(1) as f64
}

pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);

/// Temperature in [0.05, 20] minimizing held-out NLL.
///
/// The NLL is convex in the inverse temperature, so a golden-section
/// search over `1/T` (which spans the same interval) finds the minimum.
pub fn fit_temperature_logits(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let (lo, hi) = TEMPERATURE_RANGE;
    let f = |beta: f64| nll(logits, labels, 1.0 / beta);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (1.0 / hi, 1.0 / lo);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-10 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    (2.0 / (a + b)).clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, UNK};

    fn table(rows: usize, dim: usize, seed: u64) -> EmbeddingTable {
        EmbeddingTable::random(rows, dim, seed)
    }

    fn tiny_config(task: Schema) -> EncoderConfig {
        let mut c = match task {
            Schema::Single => EncoderConfig::single(2),
            Schema::Pair => EncoderConfig::pair(3),
        };
        c.embedding_dim = 4;
        c.filters_per_width = 3;
        c.hidden_widths = c.hidden_widths.iter().map(|_| 5).collect();
        c
    }

    fn example(ids: &[usize]) -> Example {
        Example {
            primary: ids.to_vec(),
            secondary: None,
            label: 0,
            words: ids.iter().map(|i| format!("w{i}")).collect(),
            secondary_words: None,
        }
    }

    #[test]
    fn combine_pair_examples() {
        assert_eq!(
            combine_pair(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            vec![1.0, 2.0, 1.0, 2.0, 1.0, 4.0, 0.0, 0.0]
        );
        assert_eq!(
            combine_pair(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0]
        );
        assert_eq!(combine_pair(&[0.0; 2], &[0.0; 2]).unwrap(), vec![0.0; 8]);
        assert!(combine_pair(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut m = Model::new(EncoderConfig::single(2), table(10, 50, 1)).unwrap();
        let head = m.params.dense.last_mut().unwrap();
        head.weights.iter_mut().for_each(|w| *w = 0.0);
        let p = m.predict(&example(&[2, 3, 4, 5])).unwrap();
        assert_eq!(p.probabilities, vec![0.5, 0.5]);
        assert_eq!(p.class, 0);
    }

    #[test]
    fn default_signature_has_four_layers() {
        let m = Model::new(EncoderConfig::single(2), table(10, 50, 1)).unwrap();
        let (sig, _) = m.encode(&example(&[2, 3])).unwrap();
        assert_eq!(sig.len(), 4);
        assert_eq!(sig.layer_dims(), vec![96, 128, 64, 2]);
    }

    #[test]
    fn trailing_pad_does_not_change_encoding() {
        let m = Model::new(tiny_config(Schema::Single), table(10, 4, 3)).unwrap();
        for ids in [vec![2, 3], vec![2, 3, 4, 5, 6, 7, 8]] {
            let base = m.encode(&example(&ids)).unwrap();
            let mut padded = ids.clone();
            padded.extend([PAD; 9]);
            assert_eq!(m.encode(&example(&padded)).unwrap(), base);
        }
    }

    #[test]
    fn softmax_properties() {
        let z = [1.0, -2.0, 0.5];
        let p = softmax(&z, 1.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = z.iter().map(|v| v + 1000.0).collect();
        let q = softmax(&shifted, 1.0);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::single(2);
        c.designated_layers = vec![4];
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::single(2);
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::single(2);
        c.filter_widths = vec![3, 0];
        assert!(c.validate().is_err());
        assert!(Model::new(EncoderConfig::single(2), table(5, 8, 0)).is_err());
    }

    #[test]
    fn dead_position_has_zero_gradient() {
        // Single width-1 filter bank: only the winning position receives
        // gradient; all others are off every argmax path.
        let mut c = tiny_config(Schema::Single);
        c.filter_widths = vec![1];
        c.filters_per_width = 1;
        let mut emb = EmbeddingTable::zeros(6, 4);
        emb.row_mut(2).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        emb.row_mut(3).copy_from_slice(&[5.0, 0.0, 0.0, 0.0]);
        let mut m = Model::new(c, emb).unwrap();
        m.params.convs[0].weights = vec![1.0, 0.0, 0.0, 0.0];
        let g = m.embedding_gradient(&example(&[2, 3]), 1).unwrap();
        assert!(g[0].iter().all(|&x| x == 0.0));
    }

    fn central_difference(m: &Model, ex: &Example, pos: usize, class: usize) -> Vec<f64> {
        let h = 1e-4;
        let id = ex.primary[pos];
        let d = m.config.embedding_dim;
        (0..d)
            .map(|k| {
                // Give position `pos` a private embedding row so the
                // perturbation touches only that occurrence.
                let mut probe = m.clone();
                let rows = probe.params.embeddings.rows();
                let mut data = probe.params.embeddings.as_slice().to_vec();
                data.extend_from_slice(m.params.embeddings.row(id));
                probe.params.embeddings =
                    EmbeddingTable::from_rows(data.chunks(d).map(<[f64]>::to_vec).collect())
                        .unwrap();
                let mut e = ex.clone();
                e.primary[pos] = rows;
                let mut at = |delta: f64| {
                    probe.params.embeddings.row_mut(rows)[k] = m.params.embeddings.row(id)[k] + delta;
                    probe.logits(&e).unwrap()[class]
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut c = tiny_config(Schema::Single);
        c.seed = 9;
        let m = Model::new(c, table(12, 4, 5)).unwrap();
        let ex = example(&[2, 5, 7, 3, 9, 2]);
        for class in 0..2 {
            let g = m.embedding_gradient(&ex, class).unwrap();
            for (pos, gp) in g.iter().enumerate() {
                let fd = central_difference(&m, &ex, pos, class);
                assert!(rel_err(gp, &fd) <= 1e-3, "pos {pos}: {gp:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn pair_gradient_matches_finite_differences() {
        let mut c = tiny_config(Schema::Pair);
        c.seed = 4;
        let m = Model::new(c, table(12, 4, 8)).unwrap();
        let mut ex = example(&[3, 4, 10, 6]);
        ex.secondary = Some(vec![2, 7, 8, 11, 5]);
        ex.secondary_words = Some(vec!["p".into(); 5]);
        for class in 0..3 {
            let g = m.embedding_gradient(&ex, class).unwrap();
            for (pos, gp) in g.iter().enumerate() {
                let fd = central_difference(&m, &ex, pos, class);
                assert!(rel_err(gp, &fd) <= 1e-3, "class {class} pos {pos}");
            }
        }
        let (sig, _) = m.encode(&ex).unwrap();
        assert_eq!(sig.layer_dims(), vec![5, 3]);
    }

    #[test]
    fn probability_weighted_gradients_match_log_partition() {
        let m = Model::new(tiny_config(Schema::Single), table(12, 4, 2)).unwrap();
        let ex = example(&[4, 6, 8, 10]);
        let p = m.predict(&ex).unwrap().probabilities;
        let grads: Vec<_> = (0..2).map(|c| m.embedding_gradient(&ex, c).unwrap()).collect();
        let pos = 1;
        let combined: Vec<f64> = (0..4)
            .map(|k| p[0] * grads[0][pos][k] + p[1] * grads[1][pos][k])
            .collect();
        let h = 1e-5;
        let id = ex.primary[pos];
        let lse = |m: &Model| {
            let z = m.logits(&ex).unwrap();
            z.iter().map(|v| v.exp()).sum::<f64>().ln()
        };
        let fd: Vec<f64> = (0..4)
            .map(|k| {
                let mut plus = m.clone();
                plus.params.embeddings.row_mut(id)[k] += h;
                let mut minus = m.clone();
                minus.params.embeddings.row_mut(id)[k] -= h;
                (lse(&plus) - lse(&minus)) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&combined, &fd) < 1e-4);
    }

    fn keyword_set() -> ExampleSet {
        // ids 2..=5 mark class 0, 6..=9 mark class 1, 10..=15 are shared filler.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let examples = (0..80)
            .map(|i| {
                let label = i % 2;
                let mut ids: Vec<usize> = (0..6).map(|_| rng.gen_range(10..16)).collect();
                let kw = 2 + 4 * label + rng.gen_range(0..4);
                let at = rng.gen_range(0..ids.len());
                ids.insert(at, kw);
                let mut e = example(&ids);
                e.label = label;
                e
            })
            .collect();
        ExampleSet {
            examples,
            class_names: vec!["a".into(), "b".into()],
            split: Split::Train,
        }
    }

    fn small_model(seed: u64) -> Model {
        let mut c = EncoderConfig::single(2);
        c.embedding_dim = 8;
        c.filters_per_width = 8;
        c.hidden_widths = vec![16, 8];
        c.seed = seed;
        Model::new(c, table(16, 8, seed)).unwrap()
    }

    #[test]
    fn training_separates_keyword_corpus() {
        let set = keyword_set();
        let hyper = TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.3,
            seed: 3,
        };
        let trained = small_model(1).train(&set, &hyper).unwrap();
        assert_eq!(trained.epoch_losses.len(), 10);
        assert_eq!(trained.model.accuracy(&set).unwrap(), 1.0, "{:?}", trained.epoch_losses);
    }

    #[test]
    fn training_is_deterministic_and_lr_zero_is_identity() {
        let set = keyword_set();
        let hyper = TrainConfig {
            epochs: 2,
            batch_size: 7,
            learning_rate: 0.1,
            seed: 5,
        };
        let m = small_model(2);
        let a = m.train(&set, &hyper).unwrap().model;
        let b = m.train(&set, &hyper).unwrap().model;
        assert_eq!(a.to_json("v").unwrap(), b.to_json("v").unwrap());
        let frozen = m
            .train(
                &set,
                &TrainConfig {
                    learning_rate: 0.0,
                    ..hyper
                },
            )
            .unwrap()
            .model;
        assert_eq!(frozen, m);
    }

    #[test]
    fn divergence_is_reported() {
        let set = keyword_set();
        let hyper = TrainConfig {
            epochs: 5,
            batch_size: 4,
            learning_rate: 1e300,
            seed: 0,
        };
        assert!(matches!(
            small_model(3).train(&set, &hyper),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn model_json_round_trip_and_hash_check() {
        let m = small_model(4);
        let json = m.to_json("abc").unwrap();
        let (back, hash) = Model::from_json(&json, "abc").unwrap();
        assert_eq!(back, m);
        assert_eq!(hash, hex_digest(json.as_bytes()));
        assert!(matches!(
            Model::from_json(&json, "other"),
            Err(Error::HashMismatch { .. })
        ));
    }

    fn synthetic_calibrated(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = softmax(&z, 1.0);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut y = 2;
            for (c, pc) in p.iter().enumerate() {
                acc += pc;
                if u < acc {
                    y = c;
                    break;
                }
            }
            logits.push(z);
            labels.push(y);
        }
        (logits, labels)
    }

    #[test]
    fn calibrated_logits_fit_unit_temperature() {
        let (logits, labels) = synthetic_calibrated(20_000, 11);
        let t = fit_temperature_logits(&logits, &labels);
        assert!((t - 1.0).abs() <= 0.05, "t = {t}");
    }

    #[test]
    fn overconfident_logits_fit_their_scale() {
        let (logits, labels) = synthetic_calibrated(20_000, 12);
        let scaled: Vec<Vec<f64>> = logits
            .iter()
            .map(|z| z.iter().map(|v| v * 5.0).collect())
            .collect();
        let t = fit_temperature_logits(&scaled, &labels);
        assert!((t - 5.0).abs() <= 0.5, "t = {t}");
    }

    #[test]
    fn fit_temperature_updates_model_without_changing_predictions() {
        let set = keyword_set();
        let mut m = small_model(6);
        let before: Vec<usize> = set.examples.iter().map(|e| m.predict(e).unwrap().class).collect();
        let t = m.fit_temperature(&set).unwrap();
        assert_eq!(m.config.temperature, t);
        assert!((TEMPERATURE_RANGE.0..=TEMPERATURE_RANGE.1).contains(&t));
        let after: Vec<usize> = set.examples.iter().map(|e| m.predict(e).unwrap().class).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn unk_is_an_ordinary_row() {
        let m = small_model(7);
        assert!(m.predict(&example(&[UNK, UNK])).is_ok());
    }
}
