#![allow(dead_code)]

use dknn::corpus::{ExampleSet, RawDataset, RawExample, Split, Vocabulary};
use dknn::encoder::{EncoderConfig, Model, TrainConfig};
use dknn::corpus::EmbeddingTable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FILLER: [&str; 12] = [
    "the", "a", "film", "plot", "was", "it", "and", "of", "story", "cast", "this", "one",
];

/// Two classes; positives carry "good" once, negatives never do.
pub fn good_corpus(size: usize, seed: u64, split: Split) -> RawDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..size)
        .map(|i| {
            let label = i % 2;
            let mut words: Vec<String> = (0..rng.gen_range(4..=8))
                .map(|_| FILLER[rng.gen_range(0..FILLER.len())].to_string())
                .collect();
            if label == 1 {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, "good".into());
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
        class_names: vec!["negative".into(), "positive".into()],
        split,
    }
}

pub fn small_config(num_classes: usize, seed: u64) -> EncoderConfig {
    EncoderConfig {
        embedding_dim: 16,
        filters_per_width: 8,
        hidden_widths: vec![32, 16],
        seed,
        ..EncoderConfig::single(num_classes)
    }
}

pub struct Toy {
    pub vocab: Vocabulary,
    pub train: ExampleSet,
    pub test: ExampleSet,
    pub model: Model,
}

pub fn trained_toy() -> Toy {
    let raw_train = good_corpus(200, 1, Split::Train);
    let raw_test = good_corpus(40, 2, Split::Test);
    let vocab = Vocabulary::build(raw_train.tokens(), 1).unwrap();
    let train = raw_train.encode(&vocab);
    let test = raw_test.encode(&vocab);
    let model = Model::new(small_config(2, 7), EmbeddingTable::random(vocab.len(), 16, 7)).unwrap();
    let hyper = TrainConfig {
        epochs: 10,
        learning_rate: 0.2,
        ..TrainConfig::default()
    };
    let model = model.train(&train, &hyper).unwrap().model;
    Toy {
        vocab,
        train,
        test,
        model,
    }
}
