//! The `dknn` command line: train, index, predict, interpret and the
//! analysis reports, all driven by one `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    artifact_rank_table, context_probe, parity_report, parse_artifacts, sparsity_stats, ProbeConfig,
};
use crate::attribution::{Interpreter, Method, Removal, SaliencyDocument, DEFAULT_THRESHOLD};
use crate::corpus::{
    load_dataset, load_embeddings, tokenize, EmbeddingTable, Example, ExampleSet, RawExample, Schema,
    Split, Vocabulary,
};
use crate::encoder::{softmax, EncoderConfig, Model, TrainConfig};
use crate::neighbors::{Dknn, LabelSource, Metric, RepresentationStore, DEFAULT_K};
use crate::render::{render_ansi, render_html, ColorScale, Format};

#[derive(Debug, Parser)]
#[command(name = "dknn", version, about = "DkNN conformity and leave-one-out saliency for text classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

// Parsed once per process, so variant size does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary, train the CNN and write model.json and loss.tsv.
    Train(Opts),
    /// Encode the training set and write the representation store.
    Index {
        #[command(subcommand)]
        action: Option<IndexAction>,
        #[command(flatten)]
        opts: Opts,
    },
    /// Softmax label and confidence plus DkNN conformity per input line.
    Predict(Opts),
    /// Saliency maps for each input line and method.
    Interpret(Opts),
    /// Softmax versus DkNN accuracy on the test split.
    Parity(Opts),
    /// Mean highlighted words per method on the test split.
    Sparsity(Opts),
    /// Average ranks of listed artifact words on the test split.
    Artifacts(Opts),
    /// Context-insertion probe over the test split.
    Probe(Opts),
}

#[derive(Debug, Subcommand)]
pub enum IndexAction {
    /// Write the store (the default).
    Build(Opts),
    /// Print row count and per-layer widths of an existing store.
    Stats(Opts),
}

/// Every config key doubles as a flag; flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// Run configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Neighbors per layer.
    #[arg(long)]
    pub k: Option<String>,
    /// l2|cosine
    #[arg(long)]
    pub metric: Option<String>,
    /// conformity|confidence|gradient|all, or a comma-separated list.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub threshold: Option<String>,
    /// ansi|html|json
    #[arg(long)]
    pub format: Option<String>,
    /// predicted|gold
    #[arg(long)]
    pub label_source: Option<String>,
    #[arg(long)]
    pub train: Option<String>,
    #[arg(long)]
    pub validation: Option<String>,
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long)]
    pub embeddings: Option<String>,
    #[arg(long)]
    pub out_dir: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub store: Option<String>,
    /// File with one input per line (`premise<TAB>hypothesis` for pairs).
    #[arg(long)]
    pub input: Option<String>,
    /// A single input given inline.
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long)]
    pub artifacts: Option<String>,
    #[arg(long)]
    pub probe: Option<String>,
    /// single|pair
    #[arg(long)]
    pub schema: Option<String>,
    /// Comma-separated class names; inferred from the train split if absent.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long)]
    pub lowercase: Option<String>,
    #[arg(long)]
    pub min_count: Option<String>,
    #[arg(long)]
    pub embedding_dim: Option<String>,
    #[arg(long)]
    pub filter_widths: Option<String>,
    #[arg(long)]
    pub filters_per_width: Option<String>,
    #[arg(long)]
    pub hidden_widths: Option<String>,
    #[arg(long)]
    pub designated_layers: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    /// Fit the softmax temperature on the validation split after training.
    #[arg(long)]
    pub fit_temperature: Option<String>,
    /// delete|unk
    #[arg(long)]
    pub removal: Option<String>,
}

impl Opts {
    fn pairs(&self) -> Vec<(&'static str, Option<&String>)> {
        vec![
            ("seed", self.seed.as_ref()),
            ("k", self.k.as_ref()),
            ("metric", self.metric.as_ref()),
            ("method", self.method.as_ref()),
            ("threshold", self.threshold.as_ref()),
            ("format", self.format.as_ref()),
            ("label_source", self.label_source.as_ref()),
            ("train", self.train.as_ref()),
            ("validation", self.validation.as_ref()),
            ("test", self.test.as_ref()),
            ("embeddings", self.embeddings.as_ref()),
            ("out_dir", self.out_dir.as_ref()),
            ("model", self.model.as_ref()),
            ("store", self.store.as_ref()),
            ("input", self.input.as_ref()),
            ("text", self.text.as_ref()),
            ("artifacts", self.artifacts.as_ref()),
            ("probe", self.probe.as_ref()),
            ("schema", self.schema.as_ref()),
            ("classes", self.classes.as_ref()),
            ("lowercase", self.lowercase.as_ref()),
            ("min_count", self.min_count.as_ref()),
            ("embedding_dim", self.embedding_dim.as_ref()),
            ("filter_widths", self.filter_widths.as_ref()),
            ("filters_per_width", self.filters_per_width.as_ref()),
            ("hidden_widths", self.hidden_widths.as_ref()),
            ("designated_layers", self.designated_layers.as_ref()),
            ("epochs", self.epochs.as_ref()),
            ("batch_size", self.batch_size.as_ref()),
            ("learning_rate", self.learning_rate.as_ref()),
            ("fit_temperature", self.fit_temperature.as_ref()),
            ("removal", self.removal.as_ref()),
        ]
    }

    fn known_key(key: &str) -> bool {
        Opts::default().pairs().iter().any(|(k, _)| *k == key)
    }
}

/// Parses `key = value` lines. `#` starts a comment line; `-` in keys is
/// read as `_` so config keys match flag spellings.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
        let key = key.trim().replace('-', "_");
        if !Opts::known_key(&key) {
            bail!("line {}: unknown key {key:?}", i + 1);
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

/// Everything one invocation needs, after merging file and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub values: BTreeMap<String, String>,
    pub seed: u64,
    pub k: usize,
    pub metric: Metric,
    pub methods: Vec<Method>,
    pub threshold: f64,
    pub format: Format,
    pub label_source: LabelSource,
    pub schema: Schema,
    pub lowercase: bool,
    pub removal: Removal,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn from_opts(opts: &Opts) -> Result<Self> {
        let mut values = match &opts.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                parse_config(&text).with_context(|| format!("{}", path.display()))?
            }
            None => BTreeMap::new(),
        };
        for (key, value) in opts.pairs() {
            if let Some(v) = value {
                values.insert(key.to_string(), v.clone());
            }
        }
        Self::from_values(values)
    }

    pub fn from_values(values: BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| values.get(k).map(String::as_str);
        let seed = parse_or(get("seed"), "seed", 0u64)?;
        let k = parse_or(get("k"), "k", DEFAULT_K)?;
        if k == 0 {
            bail!("k must be at least 1");
        }
        let threshold = parse_or(get("threshold"), "threshold", DEFAULT_THRESHOLD)?;
        if !(threshold > 0.0 && threshold <= 1.0) {
            bail!("threshold must lie in (0, 1]");
        }
        let methods = match get("method").unwrap_or("all") {
            "all" => Method::ALL.to_vec(),
            list => list
                .split(',')
                .map(|m| m.trim().parse::<Method>())
                .collect::<std::result::Result<Vec<_>, _>>()?,
        };
        let removal = match get("removal").unwrap_or("delete") {
            "delete" => Removal::Delete,
            "unk" => Removal::Unk,
            other => bail!("unknown removal {other:?} (expected delete|unk)"),
        };
        Ok(RunConfig {
            seed,
            k,
            metric: get("metric").unwrap_or("l2").parse()?,
            methods,
            threshold,
            format: get("format").unwrap_or("ansi").parse()?,
            label_source: get("label_source").unwrap_or("predicted").parse()?,
            schema: get("schema").unwrap_or("single").parse()?,
            lowercase: parse_or(get("lowercase"), "lowercase", true)?,
            removal,
            out_dir: PathBuf::from(get("out_dir").unwrap_or("out")),
            values,
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        parse_or(self.get(key), key, default)
    }

    fn list(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|x| x.trim().parse::<usize>().map_err(|_| anyhow!("{key}: cannot parse {x:?}")))
                .collect(),
        }
    }

    /// An input path that must exist.
    fn input_path(&self, key: &str) -> Result<PathBuf> {
        let p = self
            .get(key)
            .ok_or_else(|| anyhow!("missing required key `{key}`"))?;
        let path = PathBuf::from(p);
        if !path.is_file() {
            bail!("{key} file {} does not exist", path.display());
        }
        Ok(path)
    }

    pub fn model_path(&self) -> PathBuf {
        self.get("model")
            .map_or_else(|| self.out_dir.join("model.json"), PathBuf::from)
    }

    pub fn store_path(&self) -> PathBuf {
        self.get("store")
            .map_or_else(|| self.out_dir.join("store.bin"), PathBuf::from)
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.out_dir.join("vocab.txt")
    }

    pub fn labels_path(&self) -> PathBuf {
        self.out_dir.join("labels.txt")
    }
}

fn parse_or<T: std::str::FromStr>(value: Option<&str>, key: &str, default: T) -> Result<T> {
    match value {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| anyhow!("{key}: cannot parse {v:?}")),
    }
}

type Stage = fn(&RunConfig) -> Result<()>;

/// Runs one command; the error chain names the failing stage.
pub fn run(cli: Cli) -> Result<()> {
    let (stage, opts, f): (&str, Opts, Stage) = match cli.command {
        Command::Train(o) => ("train", o, train),
        Command::Index { action, opts } => match action {
            None => ("index", opts, index_build),
            Some(IndexAction::Build(o)) => ("index", o, index_build),
            Some(IndexAction::Stats(o)) => ("index", o, index_stats),
        },
        Command::Predict(o) => ("predict", o, predict),
        Command::Interpret(o) => ("interpret", o, interpret),
        Command::Parity(o) => ("parity", o, parity),
        Command::Sparsity(o) => ("sparsity", o, sparsity),
        Command::Artifacts(o) => ("artifacts", o, artifacts),
        Command::Probe(o) => ("probe", o, probe),
    };
    config(&opts).and_then(|cfg| f(&cfg)).context(stage)
}

/// Parses `args` (program name first) and runs.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            Ok(())
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            eprint!("{e}");
            Err(anyhow!("usage: no command given"))
        }
        Err(e) => Err(anyhow!("{}", e.to_string().trim_end())),
    }
}

fn config(opts: &Opts) -> Result<RunConfig> {
    RunConfig::from_opts(opts).context("config")
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Class names from `classes`, else the sorted distinct labels of `train`.
fn infer_classes(cfg: &RunConfig, train: &Path) -> Result<Vec<String>> {
    if let Some(list) = cfg.get("classes") {
        return Ok(list.split(',').map(|c| c.trim().to_string()).collect());
    }
    let text = fs::read_to_string(train).with_context(|| format!("reading {}", train.display()))?;
    let mut names: Vec<String> = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split('\t').next())
        .map(str::to_string)
        .collect();
    names.sort();
    names.dedup();
    if names.len() < 2 {
        bail!("{} has fewer than two distinct labels", train.display());
    }
    Ok(names)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let train_path = cfg.input_path("train")?;
    let classes = infer_classes(cfg, &train_path)?;
    let raw = load_dataset(&train_path, cfg.schema, &classes, Split::Train, cfg.lowercase)
        .context("loading train split")?;
    let vocab = Vocabulary::build(raw.tokens(), cfg.parse("min_count", 1)?)?;

    let base = match cfg.schema {
        Schema::Single => EncoderConfig::single(classes.len()),
        Schema::Pair => EncoderConfig::pair(classes.len()),
    };
    let encoder = EncoderConfig {
        embedding_dim: cfg.parse("embedding_dim", base.embedding_dim)?,
        filter_widths: cfg.list("filter_widths", base.filter_widths.clone())?,
        filters_per_width: cfg.parse("filters_per_width", base.filters_per_width)?,
        hidden_widths: cfg.list("hidden_widths", base.hidden_widths.clone())?,
        designated_layers: cfg.list("designated_layers", base.designated_layers.clone())?,
        seed: cfg.seed,
        ..base
    };
    encoder.validate()?;
    let embeddings = match cfg.get("embeddings") {
        Some(_) => load_embeddings(&cfg.input_path("embeddings")?, &vocab, encoder.embedding_dim, cfg.seed)
            .context("loading embeddings")?,
        None => EmbeddingTable::random(vocab.len(), encoder.embedding_dim, cfg.seed),
    };
    let hyper = TrainConfig {
        epochs: cfg.parse("epochs", TrainConfig::default().epochs)?,
        batch_size: cfg.parse("batch_size", TrainConfig::default().batch_size)?,
        learning_rate: cfg.parse("learning_rate", TrainConfig::default().learning_rate)?,
        seed: cfg.seed,
    };
    let trainset = raw.encode(&vocab);
    let trained = Model::new(encoder, embeddings)?.train(&trainset, &hyper)?;
    let mut model = trained.model;

    let mut summary = format!("train accuracy\t{:.4}\n", model.accuracy(&trainset)?);
    if cfg.get("validation").is_some() {
        let val = load_split(cfg, "validation", &classes, &vocab, Split::Validation)?;
        summary += &format!("validation accuracy\t{:.4}\n", model.accuracy(&val)?);
        if cfg.parse("fit_temperature", false)? {
            let t = model.fit_temperature(&val)?;
            summary += &format!("temperature\t{t:.6}\n");
        }
    }

    ensure_parent(&cfg.vocab_path())?;
    ensure_parent(&cfg.model_path())?;
    vocab.save(&cfg.vocab_path())?;
    write(&cfg.labels_path(), &(classes.join("\n") + "\n"))?;
    let hash = model.save(&cfg.model_path(), &vocab.hash())?;
    let mut trace = String::from("epoch\tloss\n");
    for (i, loss) in trained.epoch_losses.iter().enumerate() {
        let _ = writeln!(trace, "{}\t{loss:.6}", i + 1);
    }
    write(&cfg.out_dir.join("loss.tsv"), &trace)?;
    print!("{summary}");
    println!("model\t{}\t{hash}", cfg.model_path().display());
    Ok(())
}

/// Artifacts written by `train`, reloaded with hash checks.
struct Trained {
    vocab: Vocabulary,
    classes: Vec<String>,
    model: Model,
    model_hash: String,
}

fn load_trained(cfg: &RunConfig) -> Result<Trained> {
    let vocab = Vocabulary::load(&cfg.vocab_path()).context("loading vocabulary")?;
    let labels = fs::read_to_string(cfg.labels_path())
        .with_context(|| format!("reading {}", cfg.labels_path().display()))?;
    let classes: Vec<String> = labels.lines().map(str::to_string).collect();
    let (model, model_hash) = Model::load(&cfg.model_path(), &vocab.hash()).context("loading model")?;
    Ok(Trained {
        vocab,
        classes,
        model,
        model_hash,
    })
}

fn load_split(
    cfg: &RunConfig,
    key: &str,
    classes: &[String],
    vocab: &Vocabulary,
    split: Split,
) -> Result<ExampleSet> {
    let path = cfg.input_path(key)?;
    let raw = load_dataset(&path, cfg.schema, classes, split, cfg.lowercase)
        .with_context(|| format!("loading {key} split"))?;
    Ok(raw.encode(vocab))
}

fn load_dknn(cfg: &RunConfig, t: &Trained) -> Result<Dknn> {
    let (store, _) =
        RepresentationStore::load(&cfg.store_path(), Some(&t.model_hash)).context("loading store")?;
    Ok(Dknn::new(store, cfg.metric, cfg.k)?)
}

fn index_build(cfg: &RunConfig) -> Result<()> {
    let t = load_trained(cfg)?;
    let trainset = load_split(cfg, "train", &t.classes, &t.vocab, Split::Train)?;
    let store = RepresentationStore::build(&t.model, &trainset, cfg.label_source, &t.model_hash)?;
    ensure_parent(&cfg.store_path())?;
    let hash = store.save(&cfg.store_path())?;
    println!("store\t{}\t{hash}", cfg.store_path().display());
    print!("{}", store_stats(&store));
    Ok(())
}

fn index_stats(cfg: &RunConfig) -> Result<()> {
    let (store, hash) = RepresentationStore::load(&cfg.store_path(), None).context("loading store")?;
    println!("store\t{}\t{hash}", cfg.store_path().display());
    print!("{}", store_stats(&store));
    Ok(())
}

fn store_stats(store: &RepresentationStore) -> String {
    let dims: Vec<String> = store.layer_dims().iter().map(usize::to_string).collect();
    format!(
        "rows\t{}\nlayers\t{}\nwidths\t{}\nlabel_source\t{}\nmodel_hash\t{}\n",
        store.len(),
        dims.len(),
        dims.join(","),
        store.label_source,
        store.model_hash
    )
}

/// Inputs from `text` or the `input` file, one example per line.
fn read_inputs(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Vec<Example>> {
    let lines: Vec<String> = match (cfg.get("text"), cfg.get("input")) {
        (Some(text), _) => vec![text.to_string()],
        (None, Some(_)) => {
            let path = cfg.input_path("input")?;
            fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect()
        }
        (None, None) => bail!("no input: set `text` or `input`"),
    };
    lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let (secondary, primary) = match cfg.schema {
                Schema::Single => (None, line.as_str()),
                Schema::Pair => {
                    let (p, h) = line
                        .split_once('\t')
                        .ok_or_else(|| anyhow!("input line {}: expected premise<TAB>hypothesis", i + 1))?;
                    (Some(tokenize(p, cfg.lowercase)), h)
                }
            };
            let raw = RawExample {
                label: 0,
                primary: tokenize(primary, cfg.lowercase),
                secondary,
            };
            if raw.primary.is_empty() {
                bail!("input line {} has no tokens", i + 1);
            }
            Ok(Example::from_words(vocab, &raw))
        })
        .collect()
}

fn predict(cfg: &RunConfig) -> Result<()> {
    let t = load_trained(cfg)?;
    let inputs = read_inputs(cfg, &t.vocab)?;
    let dknn = load_dknn(cfg, &t)?;
    let mut out = String::from("line\tlabel\tconfidence\tdknn_label\tconformity\n");
    for (i, ex) in inputs.iter().enumerate() {
        let logits = t.model.logits(ex)?;
        let probs = softmax(&logits, t.model.config.temperature);
        let label = crate::encoder::argmax(&probs);
        let score = dknn.conformity(&t.model, ex)?;
        let conf: Vec<String> = score.per_class.iter().map(|p| format!("{p:.4}")).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{:.4}\t{}\t{}",
            i + 1,
            t.classes[label],
            probs[label],
            t.classes[score.predicted_class()],
            conf.join(",")
        );
    }
    print!("{out}");
    Ok(())
}

fn interpret(cfg: &RunConfig) -> Result<()> {
    let t = load_trained(cfg)?;
    let inputs = read_inputs(cfg, &t.vocab)?;
    let needs_store = cfg.methods.contains(&Method::Conformity);
    let dknn = if needs_store { Some(load_dknn(cfg, &t)?) } else { None };
    let store_hash = if needs_store {
        Some(crate::corpus::hex_digest(
            &fs::read(cfg.store_path()).with_context(|| format!("reading {}", cfg.store_path().display()))?,
        ))
    } else {
        None
    };
    let mut interp = Interpreter::new(&t.model, dknn.as_ref(), &t.classes);
    interp.removal = cfg.removal;
    let scale = ColorScale::default();
    let dir = cfg.out_dir.join("saliency");
    let mut maps = Vec::new();
    let mut stdout = String::new();
    for (i, ex) in inputs.iter().enumerate() {
        for &m in &cfg.methods {
            let map = interp.saliency(ex, m).with_context(|| format!("line {}, {m}", i + 1))?;
            let doc = SaliencyDocument {
                map: map.clone(),
                model_hash: t.model_hash.clone(),
                store_hash: store_hash.clone(),
            };
            let json = doc.to_json()?;
            write(&dir.join(format!("{:04}.{}.json", i + 1, m.name())), &(json.clone() + "\n"))?;
            match cfg.format {
                Format::Ansi => {
                    let _ = writeln!(stdout, "{}", render_ansi(&map, &scale));
                }
                Format::Json => {
                    let _ = writeln!(stdout, "{json}");
                }
                Format::Html => {}
            }
            maps.push(map);
        }
    }
    if cfg.format == Format::Html {
        let path = cfg.out_dir.join("saliency.html");
        write(&path, &render_html(&maps, "Saliency maps", &scale))?;
        let _ = writeln!(stdout, "{}", path.display());
    }
    print!("{stdout}");
    Ok(())
}

fn parity(cfg: &RunConfig) -> Result<()> {
    let t = load_trained(cfg)?;
    let test = load_split(cfg, "test", &t.classes, &t.vocab, Split::Test)?;
    let dknn = load_dknn(cfg, &t)?;
    let report = parity_report(&t.model, &dknn, &test)?;
    write(&cfg.out_dir.join("parity.tsv"), &report.to_tsv())?;
    write(&cfg.out_dir.join("parity_rows.tsv"), &report.rows_tsv(&t.classes))?;
    print!("{}", report.to_text());
    Ok(())
}

fn with_interpreter<R>(
    cfg: &RunConfig,
    t: &Trained,
    f: impl FnOnce(&Interpreter<'_>) -> crate::Result<R>,
) -> Result<R> {
    let dknn = if cfg.methods.contains(&Method::Conformity) {
        Some(load_dknn(cfg, t)?)
    } else {
        None
    };
    let mut interp = Interpreter::new(&t.model, dknn.as_ref(), &t.classes);
    interp.removal = cfg.removal;
    Ok(f(&interp)?)
}

fn sparsity(cfg: &RunConfig) -> Result<()> {
    let t = load_trained(cfg)?;
    let test = load_split(cfg, "test", &t.classes, &t.vocab, Split::Test)?;
    let report = with_interpreter(cfg, &t, |i| sparsity_stats(&test, &cfg.methods, cfg.threshold, i))?;
    write(&cfg.out_dir.join("sparsity.tsv"), &report.to_tsv())?;
    print!("{}", report.to_text());
    Ok(())
}

fn artifacts(cfg: &RunConfig) -> Result<()> {
    let t = load_trained(cfg)?;
    let test = load_split(cfg, "test", &t.classes, &t.vocab, Split::Test)?;
    let path = cfg.input_path("artifacts")?;
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let list = parse_artifacts(&text, &t.classes)?;
    let table = with_interpreter(cfg, &t, |i| artifact_rank_table(&test, &list, &cfg.methods, i))?;
    write(&cfg.out_dir.join("artifacts.tsv"), &table.to_tsv())?;
    print!("{}", table.to_text());
    Ok(())
}

fn probe(cfg: &RunConfig) -> Result<()> {
    let t = load_trained(cfg)?;
    let test = load_split(cfg, "test", &t.classes, &t.vocab, Split::Test)?;
    let path = cfg.input_path("probe")?;
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut probe = ProbeConfig::parse(&text, &t.classes)?;
    if cfg.get("method").is_some() {
        probe.methods = cfg.methods.clone();
    }
    let report = with_interpreter(cfg, &t, |i| context_probe(&probe, &test, &t.vocab, i))?;
    write(&cfg.out_dir.join("probe.tsv"), &report.to_tsv())?;
    print!("{}", report.to_text());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(pairs: &[(&str, &str)]) -> Result<RunConfig> {
        RunConfig::from_values(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
    }

    #[test]
    fn defaults() {
        let c = cfg(&[]).unwrap();
        assert_eq!(c.k, 75);
        assert_eq!(c.threshold, 0.05);
        assert_eq!(c.metric, Metric::L2);
        assert_eq!(c.methods, Method::ALL.to_vec());
        assert_eq!(c.format, Format::Ansi);
        assert_eq!(c.label_source, LabelSource::Predicted);
        assert_eq!(c.model_path(), PathBuf::from("out/model.json"));
    }

    #[test]
    fn config_file_keys_and_flag_override() {
        let map = parse_config("# run\nlabel-source = gold\nk = 5\n\nmetric=cosine\n").unwrap();
        assert_eq!(map["label_source"], "gold");
        assert!(parse_config("bogus = 1").is_err());
        assert!(parse_config("k 5").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "k = 5\nmetric = cosine\n").unwrap();
        let opts = Opts {
            config: Some(path),
            k: Some("9".into()),
            ..Opts::default()
        };
        let c = RunConfig::from_opts(&opts).unwrap();
        assert_eq!(c.k, 9);
        assert_eq!(c.metric, Metric::Cosine);
    }

    #[test]
    fn invalid_values() {
        assert!(cfg(&[("k", "0")]).is_err());
        assert!(cfg(&[("metric", "manhattan")]).is_err());
        assert!(cfg(&[("method", "shap")]).is_err());
        assert!(cfg(&[("threshold", "0")]).is_err());
        assert!(cfg(&[("format", "pdf")]).is_err());
        assert_eq!(
            cfg(&[("method", "gradient,confidence")]).unwrap().methods,
            vec![Method::Gradient, Method::Confidence]
        );
    }

    #[test]
    fn missing_input_file_is_reported() {
        let c = cfg(&[("train", "/nonexistent/train.tsv")]).unwrap();
        let err = c.input_path("train").unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "dknn", "interpret", "--k", "3", "--label-source", "gold", "--method", "all", "--text", "a b",
        ])
        .unwrap();
        let Command::Interpret(o) = cli.command else {
            panic!("wrong subcommand")
        };
        assert_eq!(o.k.as_deref(), Some("3"));
        assert_eq!(o.label_source.as_deref(), Some("gold"));
        assert!(Cli::try_parse_from(["dknn", "index", "stats", "--out-dir", "x"]).is_ok());
    }
}
