//! Exact k-nearest-neighbor search, the per-layer representation store of
//! the training set, and DkNN conformity scores built on top of them.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{hex_digest, Example, ExampleSet};
use crate::encoder::{argmax, LayerSignature, Model};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 75;
pub const LEAF_SIZE: usize = 16;
/// Layers wider than this are served by a linear scan instead of a tree.
pub const MAX_TREE_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L2,
    /// `1 - cos(a, b)`, searched as L2 over unit-normalized rows.
    Cosine,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::Config(format!("unknown metric {s:?} (expected l2|cosine)"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L2 => "l2",
            Metric::Cosine => "cosine",
        })
    }
}

impl Metric {
    fn prepare(self, v: &[f64]) -> Vec<f64> {
        match self {
            Metric::L2 => v.to_vec(),
            Metric::Cosine => {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter().map(|x| x / norm).collect()
                } else {
                    v.to_vec()
                }
            }
        }
    }

    fn finish(self, squared: f64) -> f64 {
        match self {
            Metric::L2 => squared.sqrt(),
            Metric::Cosine => squared / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

/// Squared Euclidean distance, summed left to right.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    squared: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.squared
            .total_cmp(&other.squared)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded max-heap keeping the k best `(squared, id)` pairs.
struct Best {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Best {
    fn new(k: usize) -> Self {
        Best {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(top) = self.heap.peek() {
            if c < *top {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    fn bound(&self) -> f64 {
        if self.heap.len() < self.k {
            f64::INFINITY
        } else {
            self.heap.peek().map_or(f64::INFINITY, |c| c.squared)
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

fn check_query(rows: usize, dim: usize, query: &[f64], k: usize) -> Result<()> {
    if k > rows {
        return Err(Error::contract(format!("k = {k} exceeds the {rows} stored rows")));
    }
    if query.len() != dim {
        return Err(Error::contract(format!(
            "query width {} does not match layer width {dim}",
            query.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static k-d tree over row-major points. Splits at the median of the axis
/// with the largest spread; leaves hold at most [`LEAF_SIZE`] points.
/// Queries are exact: results equal a full scan, ties broken by lower id.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn build(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || !points.len().is_multiple_of(dim) {
            return Err(Error::contract("point buffer is not a whole number of rows"));
        }
        let rows = points.len() / dim;
        let mut tree = KdTree {
            dim,
            points,
            order: (0..rows).collect(),
            nodes: Vec::new(),
        };
        if rows > 0 {
            tree.build_node(0, rows);
        }
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn point(&self, id: usize) -> &[f64] {
        &self.points[id * self.dim..(id + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return slot;
        }
        let mut axis = 0;
        let mut spread = 0.0;
        for a in 0..self.dim {
            let (lo, hi) = self.order[start..end].iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), &id| {
                    let v = self.points[id * self.dim + a];
                    (lo.min(v), hi.max(v))
                },
            );
            if hi - lo > spread {
                spread = hi - lo;
                axis = a;
            }
        }
        if spread <= 0.0 {
            return slot;
        }
        let mid = start + (end - start) / 2;
        let (dim, points) = (self.dim, &self.points);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a * dim + axis].total_cmp(&points[b * dim + axis])
        });
        let value = self.points[self.order[mid] * self.dim + axis];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[slot] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    /// The `k` nearest rows as `(id, squared distance)`, ascending by
    /// `(distance, id)`.
    pub fn knn_squared(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        check_query(self.len(), self.dim, query, k)?;
        let mut best = Best::new(k);
        if k > 0 {
            self.search(0, query, &mut best);
        }
        Ok(best
            .into_sorted()
            .into_iter()
            .map(|c| (c.id, c.squared))
            .collect())
    }

    fn search(&self, node: usize, query: &[f64], best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    best.offer(Candidate {
                        squared: squared_distance(query, self.point(id)),
                        id,
                    });
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                // Left holds values <= split, right holds values >= split.
                let diff = query[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, best);
                if diff * diff <= best.bound() {
                    self.search(far, query, best);
                }
            }
        }
    }
}

/// Exhaustive search with the same distance arithmetic as [`KdTree`].
#[derive(Debug, Clone)]
pub struct LinearScan {
    dim: usize,
    points: Vec<f64>,
}

impl LinearScan {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || !points.len().is_multiple_of(dim) {
            return Err(Error::contract("point buffer is not a whole number of rows"));
        }
        Ok(LinearScan { dim, points })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn knn_squared(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        check_query(self.len(), self.dim, query, k)?;
        let mut best = Best::new(k);
        if k > 0 {
            for (id, row) in self.points.chunks_exact(self.dim).enumerate() {
                best.offer(Candidate {
                    squared: squared_distance(query, row),
                    id,
                });
            }
        }
        Ok(best
            .into_sorted()
            .into_iter()
            .map(|c| (c.id, c.squared))
            .collect())
    }
}

#[derive(Debug, Clone)]
enum Search {
    Tree(KdTree),
    Scan(LinearScan),
}

/// Per-layer nearest-neighbor index over a [`RepresentationStore`].
#[derive(Debug, Clone)]
pub struct KdIndex {
    metric: Metric,
    k: usize,
    layers: Vec<Search>,
}

impl KdIndex {
    pub fn build(store: &RepresentationStore, metric: Metric, k: usize) -> Result<Self> {
        Self::build_with(store, metric, k, MAX_TREE_DIM)
    }

    /// Like [`KdIndex::build`], with layers wider than `max_tree_dim`
    /// served by linear scan. Results do not depend on the choice.
    pub fn build_with(
        store: &RepresentationStore,
        metric: Metric,
        k: usize,
        max_tree_dim: usize,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        if k > store.len() {
            return Err(Error::contract(format!(
                "k = {k} exceeds the {} stored rows",
                store.len()
            )));
        }
        let layers = store
            .layers
            .iter()
            .map(|layer| {
                let points: Vec<f64> = layer
                    .data
                    .chunks_exact(layer.dim)
                    .flat_map(|row| metric.prepare(row))
                    .collect();
                if layer.dim <= max_tree_dim {
                    KdTree::build(layer.dim, points).map(Search::Tree)
                } else {
                    LinearScan::new(layer.dim, points).map(Search::Scan)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KdIndex { metric, k, layers })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn uses_tree(&self, layer: usize) -> bool {
        matches!(self.layers.get(layer), Some(Search::Tree(_)))
    }

    /// Exactly the `k` nearest stored rows of `layer`, ascending by
    /// `(distance, row)`.
    pub fn knn_query(&self, layer: usize, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        let search = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::contract(format!("layer {layer} is not indexed")))?;
        let q = self.metric.prepare(query);
        let raw = match search {
            Search::Tree(t) => t.knn_squared(&q, k)?,
            Search::Scan(s) => s.knn_squared(&q, k)?,
        };
        Ok(raw
            .into_iter()
            .map(|(id, sq)| Neighbor {
                id,
                distance: self.metric.finish(sq),
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// The model's own prediction on each training example.
    Predicted,
    Gold,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSource::Predicted => "predicted",
            LabelSource::Gold => "gold",
        })
    }
}

impl FromStr for LabelSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(LabelSource::Predicted),
            "gold" => Ok(LabelSource::Gold),
            _ => Err(Error::Config(format!(
                "unknown label source {s:?} (expected predicted|gold)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatrix {
    pub dim: usize,
    /// Row-major, one row per stored example.
    pub data: Vec<f64>,
}

impl LayerMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }
}

/// Training-set representations at every designated layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationStore {
    pub layers: Vec<LayerMatrix>,
    pub labels: Vec<usize>,
    pub example_ids: Vec<usize>,
    pub num_classes: usize,
    pub label_source: LabelSource,
    /// Hash of the model file the store was built from.
    pub model_hash: String,
}

const STORE_MAGIC: &[u8; 8] = b"DKNNSTOR";
const STORE_VERSION: u32 = 1;

impl RepresentationStore {
    /// Checks every invariant: equal row counts, labels in range.
    pub fn new(
        layers: Vec<LayerMatrix>,
        labels: Vec<usize>,
        example_ids: Vec<usize>,
        num_classes: usize,
        label_source: LabelSource,
        model_hash: String,
    ) -> Result<Self> {
        let n = labels.len();
        if example_ids.len() != n {
            return Err(Error::contract("example id count differs from label count"));
        }
        if layers.is_empty() {
            return Err(Error::contract("store needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.dim == 0 || layer.data.len() != n * layer.dim {
                return Err(Error::contract(format!(
                    "layer {l} does not hold {n} rows of width {}",
                    layer.dim
                )));
            }
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::contract(format!("stored label {bad} >= {num_classes} classes")));
        }
        Ok(RepresentationStore {
            layers,
            labels,
            example_ids,
            num_classes,
            label_source,
            model_hash,
        })
    }

    /// Encodes every training example (in parallel, merged in order) and
    /// stores one row per example at each designated layer.
    pub fn build(
        model: &Model,
        trainset: &ExampleSet,
        label_source: LabelSource,
        model_hash: &str,
    ) -> Result<Self> {
        if trainset.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let encoded = trainset
            .examples
            .par_iter()
            .map(|e| model.encode(e))
            .collect::<Result<Vec<_>>>()?;
        let dims = model.config.signature_widths();
        let mut layers: Vec<LayerMatrix> = dims
            .iter()
            .map(|&dim| LayerMatrix {
                dim,
                data: Vec::with_capacity(dim * trainset.len()),
            })
            .collect();
        let mut labels = Vec::with_capacity(trainset.len());
        for ((sig, pred), example) in encoded.iter().zip(&trainset.examples) {
            for (layer, v) in layers.iter_mut().zip(&sig.vectors) {
                layer.data.extend_from_slice(v);
            }
            labels.push(match label_source {
                LabelSource::Predicted => pred.class,
                LabelSource::Gold => example.label,
            });
        }
        Self::new(
            layers,
            labels,
            (0..trainset.len()).collect(),
            model.num_classes(),
            label_source,
            model_hash.to_string(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.dim).collect()
    }

    /// Little-endian binary layout: magic, version, model hash, class count,
    /// label source, row count, layer widths, labels, example ids, then each
    /// layer's matrix row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        let hash = self.model_hash.as_bytes();
        out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
        out.extend_from_slice(hash);
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.push(match self.label_source {
            LabelSource::Predicted => 0,
            LabelSource::Gold => 1,
        });
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.dim as u32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        for &id in &self.example_ids {
            out.extend_from_slice(&(id as u64).to_le_bytes());
        }
        for layer in &self.layers {
            for x in &layer.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses a store; when `expected_model_hash` is given, the store must
    /// have been built from that model file.
    pub fn from_bytes(bytes: &[u8], expected_model_hash: Option<&str>) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != STORE_MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let hash_len = r.u32()? as usize;
        let model_hash = String::from_utf8(r.take(hash_len)?.to_vec())
            .map_err(|_| r.err("model hash is not UTF-8"))?;
        if let Some(expected) = expected_model_hash {
            if expected != model_hash {
                return Err(Error::HashMismatch {
                    what: "model",
                    expected: model_hash,
                    found: expected.to_string(),
                });
            }
        }
        let num_classes = r.u32()? as usize;
        let label_source = match r.take(1)?[0] {
            0 => LabelSource::Predicted,
            1 => LabelSource::Gold,
            other => return Err(r.err(&format!("unknown label source tag {other}"))),
        };
        let n = r.u64()? as usize;
        let num_layers = r.u32()? as usize;
        let dims = (0..num_layers)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..n)
            .map(|_| r.u32().map(|y| y as usize))
            .collect::<Result<Vec<_>>>()?;
        let example_ids = (0..n)
            .map(|_| r.u64().map(|id| id as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(num_layers);
        for dim in dims {
            let data = (0..n * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(LayerMatrix { dim, data });
        }
        if r.at != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Self::new(layers, labels, example_ids, num_classes, label_source, model_hash)
    }

    /// Writes the store and returns the hash of its bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex_digest(&bytes))
    }

    /// Reads a store and the hash of its bytes.
    pub fn load(path: &Path, expected_model_hash: Option<&str>) -> Result<(Self, String)> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::StoreMissing(path.to_path_buf()))
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let store = Self::from_bytes(&bytes, expected_model_hash)?;
        Ok((store, hex_digest(&bytes)))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn err(&self, message: &str) -> Error {
        Error::Format {
            what: "store",
            message: format!("{message} (offset {})", self.at),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.err("truncated"));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborVote {
    pub example_id: usize,
    pub distance: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformityScore {
    /// Share of the pooled `L * k` neighbor votes held by each class.
    pub per_class: Vec<f64>,
    /// The k neighbors found at each layer.
    pub neighbors: Vec<Vec<NeighborVote>>,
}

impl ConformityScore {
    /// Highest-conformity class, lowest index on ties.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.per_class)
    }
}

/// A representation store with its index: the test-time DkNN classifier.
#[derive(Debug, Clone)]
pub struct Dknn {
    store: RepresentationStore,
    index: KdIndex,
}

impl Dknn {
    pub fn new(store: RepresentationStore, metric: Metric, k: usize) -> Result<Self> {
        let index = KdIndex::build(&store, metric, k)?;
        Ok(Dknn { store, index })
    }

    pub fn from_parts(store: RepresentationStore, index: KdIndex) -> Result<Self> {
        if index.num_layers() != store.layers.len() {
            return Err(Error::contract("index and store disagree on layer count"));
        }
        Ok(Dknn { store, index })
    }

    pub fn store(&self) -> &RepresentationStore {
        &self.store
    }

    pub fn index(&self) -> &KdIndex {
        &self.index
    }

    pub fn k(&self) -> usize {
        self.index.k()
    }

    /// Pools the k neighbors of every layer into per-class vote shares.
    pub fn conformity_of(&self, signature: &LayerSignature) -> Result<ConformityScore> {
        if signature.len() != self.store.layers.len() {
            return Err(Error::contract(format!(
                "signature has {} layers, store has {}",
                signature.len(),
                self.store.layers.len()
            )));
        }
        let k = self.k();
        let mut counts = vec![0usize; self.store.num_classes];
        let mut neighbors = Vec::with_capacity(signature.len());
        for (layer, query) in signature.vectors.iter().enumerate() {
            let found = self.index.knn_query(layer, query, k)?;
            let votes: Vec<NeighborVote> = found
                .into_iter()
                .map(|n| {
                    let label = self.store.labels[n.id];
                    counts[label] += 1;
                    NeighborVote {
                        example_id: self.store.example_ids[n.id],
                        distance: n.distance,
                        label,
                    }
                })
                .collect();
            neighbors.push(votes);
        }
        let total = (signature.len() * k) as f64;
        Ok(ConformityScore {
            per_class: counts.iter().map(|&c| c as f64 / total).collect(),
            neighbors,
        })
    }

    pub fn conformity(&self, model: &Model, example: &Example) -> Result<ConformityScore> {
        let (signature, _) = model.encode(example)?;
        self.conformity_of(&signature)
    }

    pub fn predict(&self, model: &Model, example: &Example) -> Result<(usize, ConformityScore)> {
        let score = self.conformity(model, example)?;
        Ok((score.predicted_class(), score))
    }

    /// Conformity of each calibration example for its gold label.
    pub fn calibrate(&self, model: &Model, calibration: &ExampleSet) -> Result<Calibration> {
        if calibration.is_empty() {
            return Err(Error::contract("calibration set is empty"));
        }
        let scores = calibration
            .examples
            .par_iter()
            .map(|e| self.conformity(model, e).map(|s| s.per_class[e.label]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Calibration::from_scores(scores))
    }
}

/// Held-out conformity scores used to turn a conformity into an empirical
/// p-value (credibility).
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    sorted: Vec<f64>,
}

impl Calibration {
    pub fn from_scores(mut scores: Vec<f64>) -> Self {
        scores.sort_by(f64::total_cmp);
        Calibration { sorted: scores }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Fraction of calibration scores `<= score`.
    pub fn p_value(&self, score: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        let at_most = self.sorted.partition_point(|&s| s <= score);
        at_most as f64 / self.sorted.len() as f64
    }

    pub fn credibility(&self, score: &ConformityScore) -> Vec<f64> {
        score.per_class.iter().map(|&c| self.p_value(c)).collect()
    }
}
