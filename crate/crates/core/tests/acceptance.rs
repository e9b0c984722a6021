//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release --test acceptance`. Tolerances are the
//! constants below; failing criteria are reported, then the process exits
//! nonzero.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dknn::analysis::{artifact_rank_table, sparsity_stats, ProbeConfig};
use dknn::attribution::{normalize, Interpreter, Method};
use dknn::corpus::{EmbeddingTable, Example, ExampleSet, Schema, Split, Vocabulary, PAD};
use dknn::encoder::{argmax, softmax, EncoderConfig, Model, TrainConfig};
use dknn::neighbors::{Dknn, KdTree, LabelSource, LinearScan, Metric, RepresentationStore};
use dknn::synth::{generate, to_tsv, CorpusConfig, Lexicon, PlantedToken};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KNN_BUDGET: Duration = Duration::from_secs(5);
const GRAD_REL_ERR: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-4;
const PROB_SUM_TOL: f64 = 1e-12;
const MIN_SOFTMAX_ACC: f64 = 0.90;
const MAX_PARITY_GAP: f64 = 0.03;
const PARITY_BUDGET: Duration = Duration::from_secs(120);
const MAX_ARTIFACT_RANK: f64 = 2.0;
const HIGHLIGHT_THRESHOLD: f64 = 0.05;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn desk_model(train: &ExampleSet, vocab: &Vocabulary) -> Model {
    let config = EncoderConfig::single(2);
    let emb = EmbeddingTable::random(vocab.len(), config.embedding_dim, 0);
    Model::new(config, emb)
        .unwrap()
        .train(train, &TrainConfig::default())
        .unwrap()
        .model
}

/// Fixed-seed desk corpus: 2,000 train and 500 test sentences.
struct Desk {
    vocab: Vocabulary,
    train: ExampleSet,
    test: ExampleSet,
    model: Model,
    dknn: Dknn,
}

fn desk(config: &CorpusConfig, test_size: usize) -> Desk {
    let lex = Lexicon::desk();
    let raw_train = generate(&lex, &CorpusConfig { size: 2000, ..config.clone() }, Split::Train, 1);
    let raw_test = generate(&lex, &CorpusConfig { size: test_size, ..config.clone() }, Split::Test, 3);
    let vocab = Vocabulary::build(raw_train.tokens(), 1).unwrap();
    let train = raw_train.encode(&vocab);
    let test = raw_test.encode(&vocab);
    let model = desk_model(&train, &vocab);
    let store = RepresentationStore::build(&model, &train, LabelSource::Predicted, "desk").unwrap();
    let dknn = Dknn::new(store, Metric::L2, 75).unwrap();
    Desk {
        vocab,
        train,
        test,
        model,
        dknn,
    }
}

fn knn_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut compared = 0;
    for dim in [2, 8, 64] {
        let points: Vec<f64> = (0..1000 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tree = KdTree::build(dim, points.clone()).unwrap();
        let scan = LinearScan::new(dim, points).unwrap();
        for _ in 0..50 {
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.2..1.2)).collect();
            for k in [1, 5, 75] {
                let a = tree.knn_squared(&q, k).unwrap();
                let b = scan.knn_squared(&q, k).unwrap();
                if a != b {
                    return Err(format!("dim {dim} k {k}: tree and scan disagree"));
                }
                compared += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < KNN_BUDGET,
        format!("{compared} (dim, query, k) cases identical in {:.2}s", elapsed.as_secs_f64()),
    )
}

fn central_difference(m: &Model, ex: &Example, pos: usize, class: usize, h: f64) -> Vec<f64> {
    let id = ex.primary[pos];
    let d = m.config.embedding_dim;
    // A private row for `pos`, so repeated tokens are not perturbed together.
    let mut probe = m.clone();
    let private = probe.params.embeddings.rows();
    let mut rows: Vec<Vec<f64>> = m.params.embeddings.as_slice().chunks(d).map(<[f64]>::to_vec).collect();
    rows.push(m.params.embeddings.row(id).to_vec());
    probe.params.embeddings = EmbeddingTable::from_rows(rows).unwrap();
    let mut e = ex.clone();
    e.primary[pos] = private;
    (0..d)
        .map(|k| {
            let x = m.params.embeddings.row(id)[k];
            probe.params.embeddings.row_mut(private)[k] = x + h;
            let up = probe.logits(&e).unwrap()[class];
            probe.params.embeddings.row_mut(private)[k] = x - h;
            let down = probe.logits(&e).unwrap()[class];
            probe.params.embeddings.row_mut(private)[k] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Draws (model, example, position) triples until 100 land where the score
/// is smooth over the whole `±GRAD_STEP` stencil. Near a ReLU or max-pool
/// kink the difference quotient is not a derivative estimate; such draws
/// are detected by disagreement between steps `h` and `h / 10` and redrawn.
fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    let mut compared = 0;
    let mut redrawn = 0;
    let mut t = 0u64;
    while compared < 100 {
        t += 1;
        let classes = rng.gen_range(2..=3);
        let pair = t % 4 == 3;
        let mut config = if pair {
            EncoderConfig::pair(classes)
        } else {
            EncoderConfig::single(classes)
        };
        config.embedding_dim = rng.gen_range(3..=6);
        config.filters_per_width = rng.gen_range(2..=4);
        config.filter_widths = vec![1, 2, 3];
        config.hidden_widths = if pair { vec![6] } else { vec![7, 5] };
        config.designated_layers = if pair { vec![1, 2] } else { vec![0, 1, 2, 3] };
        config.seed = t;
        let rows = 30;
        let emb = EmbeddingTable::random(rows, config.embedding_dim, 100 + t);
        let model = Model::new(config, emb).unwrap();
        let len = rng.gen_range(1..=9);
        // Distinct tokens: a repeated token ties max-pooling with itself,
        // where the score has no derivative.
        let mut ids: Vec<usize> = (2..rows).collect();
        ids.shuffle(&mut rng);
        let primary = ids[..len].to_vec();
        let secondary = pair.then(|| (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(2..rows)).collect::<Vec<_>>());
        let ex = Example {
            words: vec!["w".into(); len],
            secondary_words: secondary.as_ref().map(|s| vec!["p".into(); s.len()]),
            primary,
            secondary,
            label: 0,
        };
        let pos = rng.gen_range(0..len);
        let class = rng.gen_range(0..classes);
        let fd = central_difference(&model, &ex, pos, class, GRAD_STEP);
        let fine = central_difference(&model, &ex, pos, class, GRAD_STEP / 10.0);
        if rel_err(&fd, &fine) > 1e-6 {
            redrawn += 1;
            continue;
        }
        let g = model.embedding_gradient(&ex, class).unwrap();
        let err = rel_err(&g[pos], &fd);
        if err > GRAD_REL_ERR {
            return Err(format!("triple {t}: relative error {err:.2e}"));
        }
        worst = worst.max(err);
        compared += 1;
    }
    Ok(format!(
        "{compared} triples, worst relative error {worst:.2e} ({redrawn} draws near a kink redrawn)"
    ))
}

fn conformity_is_probability(d: &Desk) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for i in 0..500 {
        let ex = if i % 2 == 0 {
            d.test.examples[i % d.test.len()].clone()
        } else {
            // Pure noise over the whole vocabulary, UNK included.
            let len = rng.gen_range(1..=30);
            let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(1..d.vocab.len())).collect();
            Example {
                words: ids.iter().map(|&id| d.vocab.token(id).unwrap().to_string()).collect(),
                primary: ids,
                secondary: None,
                secondary_words: None,
                label: 0,
            }
        };
        let c = d.dknn.conformity(&d.model, &ex).unwrap();
        if c.per_class.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(format!("input {i}: entry outside [0, 1]: {:?}", c.per_class));
        }
        worst = worst.max((c.per_class.iter().sum::<f64>() - 1.0).abs());
    }
    check(worst <= PROB_SUM_TOL, format!("500 inputs, max |sum - 1| = {worst:.1e}"))
}

/// `setup` is the time spent generating, training and indexing.
fn accuracy_parity(d: &Desk, setup: Duration) -> Outcome {
    let start = Instant::now();
    let report = dknn::analysis::parity_report(&d.model, &d.dknn, &d.test).unwrap();
    let elapsed = setup + start.elapsed();
    let gap = (report.softmax_accuracy - report.dknn_accuracy).abs();
    check(
        report.softmax_accuracy >= MIN_SOFTMAX_ACC && gap <= MAX_PARITY_GAP && elapsed < PARITY_BUDGET,
        format!(
            "vocab {}, softmax {:.3}, dknn {:.3}, gap {:.1} points, {:.1}s",
            d.vocab.len(),
            report.softmax_accuracy,
            report.dknn_accuracy,
            gap * 100.0,
            elapsed.as_secs_f64()
        ),
    )
}

fn planted_artifact() -> Outcome {
    let planted = PlantedToken {
        word: "zzartifact".into(),
        class: 1,
        rate: 0.95,
    };
    let config = CorpusConfig {
        own_keywords: (1, 1),
        cross_keyword_rate: 0.5,
        planted: Some(planted.clone()),
        ..CorpusConfig::desk(0)
    };
    let d = desk(&config, 200);
    let interp = Interpreter::new(&d.model, Some(&d.dknn), &d.test.class_names);
    let methods = [Method::Conformity, Method::Confidence];
    let table = artifact_rank_table(&d.test, &[(1, planted.word.clone())], &methods, &interp).unwrap();
    let row = table.row(&planted.word).unwrap();
    let conformity = row.cells[0].average_rank.unwrap();
    let confidence = row.cells[1].average_rank.unwrap();
    check(
        conformity <= MAX_ARTIFACT_RANK && conformity <= confidence,
        format!(
            "{} held-out positives, conformity rank {conformity:.2}, confidence rank {confidence:.2}",
            row.cells[0].count
        ),
    )
}

fn sparsity_direction() -> Outcome {
    let config = CorpusConfig {
        injected_filler: 0.3,
        ..CorpusConfig::desk(0)
    };
    let d = desk(&config, 200);
    let interp = Interpreter::new(&d.model, Some(&d.dknn), &d.test.class_names);
    let report =
        sparsity_stats(&d.test, &[Method::Conformity, Method::Confidence], HIGHLIGHT_THRESHOLD, &interp).unwrap();
    let conformity = report.mean_for(Method::Conformity).unwrap();
    let confidence = report.mean_for(Method::Confidence).unwrap();
    check(
        conformity <= confidence,
        format!(
            "{} examples, mean length {:.1}, highlighted conformity {conformity:.2}, confidence {confidence:.2}",
            report.examples, report.mean_length
        ),
    )
}

fn probe_arithmetic() -> Outcome {
    let raw = dknn::corpus::parse_dataset(
        &(0..22)
            .map(|i| format!("{}\tthe film was awesome {}\n", ["negative", "positive"][i % 2], "and fun ".repeat(i % 3)))
            .collect::<String>(),
        std::path::Path::new("probe-source"),
        Schema::Single,
        &["negative".to_string(), "positive".to_string()],
        Split::Test,
        true,
    )
    .unwrap();
    let vocab = Vocabulary::build(raw.tokens(), 1).unwrap();
    let source = raw.encode(&vocab);
    let probe = ProbeConfig::parse("trigger = awesome\nreplacements = good, great, fine\ninsert = terribly\n", &source.class_names)
        .unwrap();
    let probes = probe.generate(&source, &vocab);
    let occurrences: usize = source
        .examples
        .iter()
        .map(|e| e.words.iter().filter(|w| *w == "awesome").count())
        .sum();
    check(
        occurrences == 22 && probes.len() == 66,
        format!("{occurrences} occurrences x 3 replacements = {} probes", probes.len()),
    )
}

fn temperature_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut checked = 0;
    for i in 0..1000 {
        let c = rng.gen_range(2..=10);
        let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let base = argmax(&z);
        for t in [0.1, 1.0, 5.0, 20.0] {
            if argmax(&softmax(&z, t)) != base {
                return Err(format!("vector {i}, T = {t}: argmax changed"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} (vector, T) pairs, argmax unchanged"))
}

fn cli_determinism() -> Outcome {
    let lex = Lexicon::desk();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path();
    fs::write(data.join("train.tsv"), to_tsv(&generate(&lex, &CorpusConfig::desk(600), Split::Train, 1))).unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = data.join(format!("run{run}"));
        let common = |cmd: &[&str]| {
            let mut args: Vec<String> = vec!["dknn".into()];
            args.extend(cmd.iter().map(|s| s.to_string()));
            args.extend([
                "--train".into(),
                data.join("train.tsv").display().to_string(),
                "--out-dir".into(),
                out.display().to_string(),
                "--seed".into(),
                "5".into(),
            ]);
            dknn::cli::run_args(args)
        };
        common(&["train"]).map_err(|e| format!("{e:#}"))?;
        common(&["index"]).map_err(|e| format!("{e:#}"))?;
        common(&["interpret", "--text", "a good and tedious story", "--format", "html"]).map_err(|e| format!("{e:#}"))?;
        let read = |p: &str| fs::read(out.join(p)).unwrap();
        outputs.push(vec![
            read("model.json"),
            read("store.bin"),
            read("saliency/0001.conformity.json"),
            read("saliency/0001.confidence.json"),
            read("saliency/0001.gradient.json"),
        ]);
    }
    let bytes: usize = outputs[0].iter().map(Vec::len).sum();
    check(outputs[0] == outputs[1], format!("5 artifacts, {bytes} bytes, identical across runs"))
}

fn trivial_contracts(d: &Desk) -> Outcome {
    let ex = &d.test.examples[0];
    let mut zero = d.model.clone();
    let head = zero.params.dense.last_mut().unwrap();
    head.weights.iter_mut().for_each(|w| *w = 0.0);
    head.bias.iter_mut().for_each(|b| *b = 0.0);
    let p = zero.predict(ex).unwrap().probabilities;
    if p != vec![0.5, 0.5] {
        return Err(format!("zero head gives {p:?}"));
    }
    let mut padded = ex.clone();
    let extra = d.model.config.max_filter_width() + 1;
    padded.primary.extend(std::iter::repeat_n(PAD, extra));
    padded.words.extend(std::iter::repeat_n("<pad>".to_string(), extra));
    if d.model.encode(&padded).unwrap() != d.model.encode(ex).unwrap() {
        return Err("PAD extension changed the signature".into());
    }
    if normalize(&[0.0, 0.0, 0.0]) != vec![0.0, 0.0, 0.0] {
        return Err("all-zero importance did not normalize to zero".into());
    }
    let train_ex = &d.train.examples[17];
    let (sig, _) = d.model.encode(train_ex).unwrap();
    for (layer, v) in sig.vectors.iter().enumerate() {
        let hit = &d.dknn.index().knn_query(layer, v, 1).unwrap()[0];
        if hit.distance != 0.0 {
            return Err(format!("layer {layer}: self-query at distance {}", hit.distance));
        }
    }
    Ok("uniform zero-head confidence, PAD invariance, zero normalization, self-query at 0".into())
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {n:>2}  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {n:>2}  {name}: {detail} [{secs:.1}s]");
            }
        }
    };

    let start = Instant::now();
    let desk_corpus = desk(&CorpusConfig::desk(0), 500);
    let desk_time = start.elapsed();

    report(1, "exact kNN matches linear scan", &mut knn_oracle);
    report(2, "embedding gradients match finite differences", &mut gradient_check);
    report(3, "conformity is a probability vector", &mut || conformity_is_probability(&desk_corpus));
    report(4, "softmax and DkNN accuracy parity", &mut || accuracy_parity(&desk_corpus, desk_time));
    report(5, "planted artifact ranks near the top", &mut planted_artifact);
    report(6, "conformity saliency is sparser", &mut sparsity_direction);
    report(7, "probe count arithmetic", &mut probe_arithmetic);
    report(8, "temperature keeps the argmax", &mut temperature_invariance);
    report(9, "train, index, interpret are byte-reproducible", &mut cli_determinism);
    report(10, "trivial contracts", &mut || trivial_contracts(&desk_corpus));

    if failures == 0 {
        println!("acceptance: all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of 10 criteria failed");
        ExitCode::FAILURE
    }
}
