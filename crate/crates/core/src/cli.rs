//! Command-line entry point.
//!
//! Flags may also come from `--config FILE` (one `key=value` per line, keys
//! are long flag names). Config values are applied first, so a flag given on
//! the command line overrides the same key in the file.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::corpus::{
    convert_char_offsets, corpus_stats, derive_sentence_labels, detect_duplicates, encode_bio,
    parse_article, parse_fragment_labels, parse_sentence_labels, remove_duplicates,
    split_train_dev, write_fragment_labels, write_sentence_labels, Article, FragmentAnnotation,
    SentenceExample, SentenceLabel, TokenSequence,
};
use crate::error::{Error, Result};
use crate::eval::{flc_prf, format_report, slc_prf, ReportStyle};
use crate::features::{
    assemble_sentence_features, CategoryLexicon, ConceptDictionary, ExternalLogits, FeatureVector,
    SentenceFeatureConfig, SentenceResources, TaggedSentences, TokenFeatureConfig, TokenResources,
    WhitespaceTokenizer, WordVectorTable,
};
use crate::flc::{predict_fragments, train_crf, CrfModel, CrfTrainConfig};
use crate::par::{self, Execution};
use crate::slc::{
    self, analyze_by_technique, class_prior_tau, format_technique_accuracy, predict_batch,
    sweep_threshold, train_logreg, SlcModel, SlcTrainConfig,
};

pub const METADATA_FILE: &str = "run-metadata.txt";

#[derive(Parser, Debug)]
#[command(
    name = "propdetect",
    version,
    about = "Sentence- and fragment-level propaganda detection"
)]
#[command(args_override_self = true)]
struct Cli {
    /// Run data-parallel stages on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Technique frequency table of a fragment label file.
    Stats(StatsArgs),
    /// Split articles into train and dev manifests.
    Split(SplitArgs),
    /// Report groups of articles with identical normalized text.
    Dupes(DupesArgs),
    /// Train the sentence classifier.
    TrainSlc(TrainSlcArgs),
    /// Label sentences with a trained sentence classifier.
    PredictSlc(PredictSlcArgs),
    /// Score a grid of thresholds on labeled sentences.
    SweepSlc(SweepSlcArgs),
    /// Per-technique accuracy of sentence predictions.
    AnalyzeSlc(AnalyzeSlcArgs),
    /// Train the fragment tagger.
    TrainFlc(TrainFlcArgs),
    /// Tag fragments with a trained tagger.
    PredictFlc(PredictFlcArgs),
    /// Score sentence predictions.
    EvalSlc(EvalSlcArgs),
    /// Score fragment predictions.
    EvalFlc(EvalFlcArgs),
}

#[derive(Args, Debug, Clone)]
struct CorpusArgs {
    /// Directory of `<id>.txt` article files.
    #[arg(long)]
    articles: PathBuf,
    /// Restrict to the article ids listed in this file.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Drop all but the first article of each duplicate group.
    #[arg(long)]
    dedupe: bool,
}

#[derive(Args, Debug, Clone)]
struct LabelArgs {
    /// Fragment label TSV.
    #[arg(long)]
    labels: PathBuf,
    /// Label offsets count characters rather than bytes.
    #[arg(long)]
    char_offsets: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct SentenceResourceArgs {
    /// Category lexicon (`word TAB cat1,cat2`).
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// External per-sentence class probabilities.
    #[arg(long)]
    logits: Option<PathBuf>,
    /// Fragment predictions whose sentences get the tagged-span flag.
    #[arg(long)]
    tagged_spans: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct TokenResourceArgs {
    /// Word vector table (text format).
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Concept dictionary.
    #[arg(long)]
    concepts: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[command(flatten)]
    labels: LabelArgs,
    /// Articles, for sentence counts and character-offset conversion.
    #[arg(long)]
    articles: Option<PathBuf>,
    /// Fail with a diff if counts differ from the reference release.
    #[arg(long)]
    check_reference: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value_t = 0.2)]
    dev_fraction: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct DupesArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum TauPreset {
    Default,
    Experiment,
}

#[derive(Args, Debug)]
struct TrainSlcArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    labels: LabelArgs,
    /// Dev article ids; dev predictions and a report are written when given.
    #[arg(long)]
    dev_manifest: Option<PathBuf>,
    /// Comma-separated feature groups.
    #[arg(long, default_value = "lexicon,punctuation")]
    features: SentenceFeatureConfig,
    #[command(flatten)]
    resources: SentenceResourceArgs,
    /// Decision threshold on p(non-propaganda).
    #[arg(long, conflicts_with_all = ["tau_preset", "tau_from_prior"])]
    tau: Option<f64>,
    #[arg(long, value_enum, conflicts_with = "tau_from_prior")]
    tau_preset: Option<TauPreset>,
    /// Set the threshold to the training fraction of non-propaganda sentences.
    #[arg(long)]
    tau_from_prior: bool,
    #[arg(long, default_value_t = SlcTrainConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = SlcTrainConfig::default().l2)]
    l2: f64,
    #[arg(long, default_value_t = SlcTrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = SlcTrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_parser = ["tsv", "text"], default_value = "tsv")]
    style: String,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct PredictSlcArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    resources: SentenceResourceArgs,
    /// Override the model's threshold.
    #[arg(long)]
    tau: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SweepSlcArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    labels: LabelArgs,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    resources: SentenceResourceArgs,
    /// Comma-separated thresholds (default 0.05 to 0.95 in steps of 0.05).
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeSlcArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    labels: LabelArgs,
    /// Sentence label predictions.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = slc::DEFAULT_MIN_COUNT)]
    min_count: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainFlcArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    labels: LabelArgs,
    /// Dev article ids; without it a dev split is drawn from the training articles.
    #[arg(long)]
    dev_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    dev_fraction: f64,
    /// Comma-separated token feature groups.
    #[arg(long, default_value_t = TokenFeatureConfig::lexical())]
    features: TokenFeatureConfig,
    #[command(flatten)]
    resources: TokenResourceArgs,
    #[arg(long, default_value_t = CrfTrainConfig::default().max_epochs)]
    max_epochs: usize,
    #[arg(long, default_value_t = CrfTrainConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = CrfTrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = CrfTrainConfig::default().patience)]
    patience: usize,
    #[arg(long, default_value_t = CrfTrainConfig::default().l2)]
    l2: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct PredictFlcArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    resources: TokenResourceArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvalSlcArgs {
    /// Sentence label predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Gold sentence labels.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value = "tsv")]
    style: ReportStyle,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalFlcArgs {
    /// Predicted fragment TSV.
    #[arg(long)]
    pred: PathBuf,
    /// Gold fragment TSV.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value = "tsv")]
    style: ReportStyle,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse `argv` (program name first), run the subcommand and return the exit
/// code: 0 on success, 1 on input errors, 2 on internal errors.
pub fn run<I: IntoIterator<Item = OsString>>(argv: I) -> i32 {
    let argv = match expand_config(argv.into_iter().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let outcome = std::panic::catch_unwind(|| dispatch(&cli.command, exec, &argv));
    match outcome {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                1
            } else {
                2
            }
        }
        Err(_) => 2,
    }
}

/// Splice `--config FILE` entries in right after the subcommand name.
fn expand_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut i = 0;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy().into_owned();
        if arg == "--config" {
            let p = argv
                .get(i + 1)
                .ok_or_else(|| Error::invalid("--config needs a file"))?
                .clone();
            path = Some(PathBuf::from(p));
            argv.drain(i..i + 2);
        } else if let Some(p) = arg.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            argv.remove(i);
        } else {
            i += 1;
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = read_text(&path)?;
    let mut flags = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(n + 1, "expected `key=value`").in_file(&path))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key == "config" {
            return Err(Error::format(n + 1, format!("invalid key {key:?}")).in_file(&path));
        }
        match value {
            "true" => flags.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                flags.push(OsString::from(format!("--{key}")));
                flags.push(OsString::from(value));
            }
        }
    }
    let at = argv
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map_or(argv.len(), |p| p + 2);
    argv.splice(at..at, flags);
    Ok(argv)
}

fn dispatch(cmd: &Command, exec: Execution, argv: &[OsString]) -> Result<()> {
    match cmd {
        Command::Stats(a) => cmd_stats(a, argv),
        Command::Split(a) => cmd_split(a, argv),
        Command::Dupes(a) => cmd_dupes(a, argv),
        Command::TrainSlc(a) => cmd_train_slc(a, exec, argv),
        Command::PredictSlc(a) => cmd_predict_slc(a, exec, argv),
        Command::SweepSlc(a) => cmd_sweep_slc(a, exec, argv),
        Command::AnalyzeSlc(a) => cmd_analyze_slc(a, exec, argv),
        Command::TrainFlc(a) => cmd_train_flc(a, exec, argv),
        Command::PredictFlc(a) => cmd_predict_flc(a, exec, argv),
        Command::EvalSlc(a) => cmd_eval_slc(a, argv),
        Command::EvalFlc(a) => cmd_eval_flc(a, argv),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    let raw = fs::read(path).map_err(io_err(path))?;
    String::from_utf8(raw).map_err(|e| {
        Error::InvalidUtf8 {
            position: e.utf8_error().valid_up_to(),
        }
        .in_file(path)
    })
}

fn parse_in<T>(path: &Path, parse: impl FnOnce(&str) -> Result<T>) -> Result<T> {
    parse(&read_text(path)?).map_err(|e| e.in_file(path))
}

/// Records inputs and outputs of one run.
struct Run<'a> {
    argv: &'a [OsString],
    out: Option<PathBuf>,
    inputs: Vec<(String, String)>,
    seed: Option<u64>,
}

impl<'a> Run<'a> {
    fn new(argv: &'a [OsString], out: Option<&Path>) -> Result<Self> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok(Run {
            argv,
            out: out.map(Path::to_path_buf),
            inputs: Vec::new(),
            seed: None,
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let mut h = Sha256::new();
        if path.is_dir() {
            let mut names: Vec<PathBuf> = fs::read_dir(path)
                .map_err(io_err(path))?
                .map(|e| e.map(|e| e.path()).map_err(io_err(path)))
                .collect::<Result<_>>()?;
            names.sort();
            for p in names.iter().filter(|p| p.is_file()) {
                h.update(p.file_name().unwrap().as_encoded_bytes());
                h.update([0]);
                h.update(fs::read(p).map_err(io_err(p))?);
                h.update([0]);
            }
        } else {
            h.update(fs::read(path).map_err(io_err(path))?);
        }
        self.inputs
            .push((path.display().to_string(), hex::encode(h.finalize())));
        Ok(())
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        if let Some(dir) = &self.out {
            let p = dir.join(name);
            fs::write(&p, contents).map_err(io_err(&p))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let Some(dir) = &self.out else { return Ok(()) };
        let mut s = String::new();
        writeln!(
            s,
            "version\t{} {}",
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION")
        )
        .unwrap();
        let args: Vec<String> = self
            .argv
            .iter()
            .skip(1)
            .map(|a| a.to_string_lossy().into_owned())
            .collect();
        writeln!(s, "argv\t{}", args.join("\t")).unwrap();
        if let Some(seed) = self.seed {
            writeln!(s, "seed\t{seed}").unwrap();
        }
        for (path, digest) in &self.inputs {
            writeln!(s, "input\t{path}\tsha256:{digest}").unwrap();
        }
        let p = dir.join(METADATA_FILE);
        fs::write(&p, s).map_err(io_err(&p))
    }
}

fn article_id_from_stem(stem: &str) -> &str {
    match stem.strip_prefix("article") {
        Some(rest) if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) => rest,
        _ => stem,
    }
}

fn read_manifest(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// All `*.txt` articles of `dir`, sorted by id.
fn load_articles(dir: &Path) -> Result<Vec<Article>> {
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let id = article_id_from_stem(stem).to_string();
        let raw = fs::read(&path).map_err(io_err(&path))?;
        let article = parse_article(&raw, &id).map_err(|e| e.in_file(&path))?;
        if let Some(prev) = found.insert(id.clone(), (path.clone(), article)) {
            return Err(Error::invalid(format!(
                "article id {id} found in both {} and {}",
                prev.0.display(),
                path.display()
            )));
        }
    }
    Ok(found.into_values().map(|(_, a)| a).collect())
}

fn select(articles: &[Article], manifest: &Path) -> Result<Vec<Article>> {
    let ids = read_manifest(manifest)?;
    let by_id: BTreeMap<&str, &Article> = articles.iter().map(|a| (a.id.as_str(), a)).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(ids.len());
    for id in &ids {
        if !seen.insert(id.as_str()) {
            continue;
        }
        let a = by_id.get(id.as_str()).ok_or_else(|| {
            Error::invalid(format!(
                "manifest {} lists unknown article {id}",
                manifest.display()
            ))
        })?;
        out.push((*a).clone());
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn load_corpus(args: &CorpusArgs, run: &mut Run<'_>) -> Result<Vec<Article>> {
    run.input(&args.articles)?;
    let mut articles = load_articles(&args.articles)?;
    if let Some(m) = &args.manifest {
        run.input(m)?;
        articles = select(&articles, m)?;
    }
    if args.dedupe {
        let (kept, dropped) = remove_duplicates(articles);
        if !dropped.is_empty() {
            eprintln!(
                "dropped {} duplicate articles: {}",
                dropped.len(),
                dropped.join(", ")
            );
        }
        articles = kept;
    }
    if articles.is_empty() {
        return Err(Error::invalid(format!(
            "no articles in {}",
            args.articles.display()
        )));
    }
    Ok(articles)
}

/// Fragment labels of the given articles, in byte offsets.
fn load_labels(
    args: &LabelArgs,
    articles: &[Article],
    run: &mut Run<'_>,
) -> Result<Vec<FragmentAnnotation>> {
    run.input(&args.labels)?;
    let anns = parse_in(&args.labels, parse_fragment_labels)?;
    let by_id: BTreeMap<&str, &Article> = articles.iter().map(|a| (a.id.as_str(), a)).collect();
    let mut grouped: BTreeMap<&str, Vec<FragmentAnnotation>> = BTreeMap::new();
    for a in anns {
        if let Some((id, _)) = by_id.get_key_value(a.article_id.as_str()) {
            grouped.entry(id).or_default().push(a);
        }
    }
    let mut out = Vec::new();
    for (id, anns) in grouped {
        let article = by_id[id];
        let anns = if args.char_offsets {
            convert_char_offsets(article, &anns).map_err(|e| e.in_file(&args.labels))?
        } else {
            anns
        };
        out.extend(anns);
    }
    Ok(out)
}

fn sentence_examples(
    articles: &[Article],
    anns: &[FragmentAnnotation],
    exec: Execution,
) -> Result<Vec<SentenceExample>> {
    let grouped = crate::corpus::group_by_article(anns);
    let empty = Vec::new();
    let per = par::try_map(exec, articles, |a| {
        derive_sentence_labels(a, grouped.get(&a.id).unwrap_or(&empty))
    })?;
    Ok(per.into_iter().flatten().collect())
}

struct SentenceInputs {
    lexicon: Option<CategoryLexicon>,
    logits: Option<ExternalLogits>,
    tagged: Option<TaggedSentences>,
}

impl SentenceInputs {
    fn load(
        args: &SentenceResourceArgs,
        config: &SentenceFeatureConfig,
        articles: &[Article],
        run: &mut Run<'_>,
    ) -> Result<Self> {
        let need = |flag: bool, path: &Option<PathBuf>, what: &str, name: &str| -> Result<()> {
            if flag && path.is_none() {
                return Err(Error::MissingResource(format!("{what} (pass --{name})")));
            }
            Ok(())
        };
        need(
            config.lexicon || config.context,
            &args.lexicon,
            "category lexicon",
            "lexicon",
        )?;
        need(
            config.external_logits,
            &args.logits,
            "external logits",
            "logits",
        )?;
        need(
            config.tagged_span_flag,
            &args.tagged_spans,
            "tagged-span predictions",
            "tagged-spans",
        )?;

        let mut load = |flag: bool, path: &Option<PathBuf>| -> Result<Option<PathBuf>> {
            match path {
                Some(p) if flag => {
                    run.input(p)?;
                    Ok(Some(p.clone()))
                }
                _ => Ok(None),
            }
        };
        let lexicon = load(config.lexicon || config.context, &args.lexicon)?
            .map(|p| parse_in(&p, CategoryLexicon::parse))
            .transpose()?;
        let logits = load(config.external_logits, &args.logits)?
            .map(|p| parse_in(&p, ExternalLogits::parse))
            .transpose()?;
        let tagged = load(config.tagged_span_flag, &args.tagged_spans)?
            .map(|p| {
                parse_in(&p, parse_fragment_labels)
                    .map(|f| TaggedSentences::from_fragments(articles, &f))
            })
            .transpose()?;
        Ok(SentenceInputs {
            lexicon,
            logits,
            tagged,
        })
    }

    fn resources(&self) -> SentenceResources<'_> {
        SentenceResources {
            lexicon: self.lexicon.as_ref(),
            logits: self.logits.as_ref(),
            tagged: self.tagged.as_ref(),
        }
    }
}

fn featurize_sentences(
    examples: &[SentenceExample],
    config: &SentenceFeatureConfig,
    res: &SentenceResources<'_>,
    exec: Execution,
) -> Result<Vec<FeatureVector>> {
    par::try_map(exec, examples, |ex| {
        assemble_sentence_features(ex, config, res)
    })
}

fn cmd_stats(a: &StatsArgs, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new(argv, a.out.as_deref())?;
    let articles = match &a.articles {
        Some(dir) => {
            run.input(dir)?;
            Some(load_articles(dir)?)
        }
        None if a.labels.char_offsets => {
            return Err(Error::invalid("--char-offsets needs --articles"))
        }
        None => None,
    };
    let anns = match &articles {
        Some(articles) => {
            let anns = load_labels(&a.labels, articles, &mut run)?;
            let known: BTreeSet<&str> = anns.iter().map(|f| f.article_id.as_str()).collect();
            let raw = parse_in(&a.labels.labels, parse_fragment_labels)?;
            if let Some(f) = raw.iter().find(|f| !known.contains(f.article_id.as_str())) {
                return Err(Error::invalid(format!(
                    "labels reference unknown article {}",
                    f.article_id
                ))
                .in_file(&a.labels.labels));
            }
            anns
        }
        None => {
            run.input(&a.labels.labels)?;
            parse_in(&a.labels.labels, parse_fragment_labels)?
        }
    };
    let counts = corpus_stats(&anns);
    let mut table = counts.to_tsv();
    if let Some(articles) = &articles {
        let examples = sentence_examples(articles, &anns, Execution::default())?;
        let prop = examples
            .iter()
            .filter(|e| e.label == SentenceLabel::Propaganda)
            .count();
        writeln!(table, "SENTENCES\t{}", examples.len()).unwrap();
        writeln!(table, "PROPAGANDA_SENTENCES\t{prop}").unwrap();
    }
    print!("{table}");
    run.write("stats.tsv", &table)?;
    run.finish()?;
    if a.check_reference {
        let diff = counts.diff_against_reference();
        if !diff.is_empty() {
            return Err(Error::invalid(format!(
                "counts differ from reference:\n{}",
                diff.join("\n")
            )));
        }
    }
    Ok(())
}

fn cmd_split(a: &SplitArgs, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new(argv, Some(&a.out.out))?;
    run.seed = Some(a.seed);
    let articles = load_corpus(&a.corpus, &mut run)?;
    let ids: Vec<String> = articles.iter().map(|x| x.id.clone()).collect();
    let (train, dev) = split_train_dev(&ids, a.dev_fraction, a.seed)?;
    run.write("train.manifest", &lines(&train))?;
    run.write("dev.manifest", &lines(&dev))?;
    println!("train\t{}\ndev\t{}", train.len(), dev.len());
    run.finish()
}

fn lines(ids: &[String]) -> String {
    ids.iter().map(|i| format!("{i}\n")).collect()
}

fn cmd_dupes(a: &DupesArgs, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new(argv, a.out.as_deref())?;
    let articles = load_corpus(&a.corpus, &mut run)?;
    let report: String = detect_duplicates(&articles)
        .iter()
        .map(|g| format!("{}\n", g.join("\t")))
        .collect();
    print!("{report}");
    run.write("duplicates.tsv", &report)?;
    run.finish()
}

fn slc_tau(a: &TrainSlcArgs, examples: &[SentenceExample]) -> Result<f64> {
    let tau = match (a.tau, a.tau_preset, a.tau_from_prior) {
        (Some(t), _, _) => t,
        (_, Some(TauPreset::Experiment), _) => slc::EXPERIMENT_TAU,
        (_, _, true) => class_prior_tau(examples.iter().map(|e| e.label))?,
        _ => slc::DEFAULT_TAU,
    };
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold {tau} not in (0, 1)")));
    }
    Ok(tau)
}

fn cmd_train_slc(a: &TrainSlcArgs, exec: Execution, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new(argv, Some(&a.out.out))?;
    run.seed = Some(a.seed);
    let style: ReportStyle = a.style.parse()?;
    let all = load_corpus(&a.corpus, &mut run)?;
    let (train, dev) = match &a.dev_manifest {
        Some(m) => {
            run.input(m)?;
            let everything = load_articles(&a.corpus.articles)?;
            let dev = select(&everything, m)?;
            let dev_ids: BTreeSet<&str> = dev.iter().map(|d| d.id.as_str()).collect();
            let train: Vec<Article> = all
                .into_iter()
                .filter(|x| !dev_ids.contains(x.id.as_str()))
                .collect();
            (train, dev)
        }
        None => (all, Vec::new()),
    };
    if train.is_empty() {
        return Err(Error::invalid(
            "no training articles left after removing dev articles",
        ));
    }
    let mut both = train.clone();
    both.extend(dev.iter().cloned());
    let anns = load_labels(&a.labels, &both, &mut run)?;
    let inputs = SentenceInputs::load(&a.resources, &a.features, &both, &mut run)?;
    let res = inputs.resources();

    let examples = sentence_examples(&train, &anns, exec)?;
    let fvs = featurize_sentences(&examples, &a.features, &res, exec)?;
    let config = SlcTrainConfig {
        learning_rate: a.learning_rate,
        l2: a.l2,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let data: Vec<(FeatureVector, SentenceLabel)> = fvs
        .into_iter()
        .zip(examples.iter().map(|e| e.label))
        .collect();
    let mut model = train_logreg(&data, &config)?;
    model.features = a.features;
    model.tau = slc_tau(a, &examples)?;
    run.write("model.txt", &model.to_text())?;

    if !dev.is_empty() {
        let dev_examples = sentence_examples(&dev, &anns, exec)?;
        let dev_fvs = featurize_sentences(&dev_examples, &a.features, &res, exec)?;
        let pairs: Vec<(&SentenceExample, FeatureVector)> =
            dev_examples.iter().zip(dev_fvs).collect();
        let preds: Vec<_> = predict_batch(&model, &pairs, exec)
            .iter()
            .map(|p| p.record())
            .collect();
        let gold: Vec<_> = dev_examples.iter().map(|e| e.record()).collect();
        let report = slc_prf(&preds, &gold)?;
        let text = format_report(&report, style);
        print!("{text}");
        run.write("dev-predictions.tsv", &write_sentence_labels(&preds))?;
        run.write("dev-gold.tsv", &write_sentence_labels(&gold))?;
        run.write("dev-report.tsv", &text)?;
    }
    run.finish()
}

fn load_slc_model(path: &Path, run: &mut Run<'_>) -> Result<SlcModel> {
    run.input(path)?;
    parse_in(path, SlcModel::from_text)
}

fn cmd_predict_slc(a: &PredictSlcArgs, exec: Execution, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new(argv, Some(&a.out.out))?;
    let mut model = load_slc_model(&a.model, &mut run)?;
    if let Some(t) = a.tau {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::invalid(format!("threshold {t} not in (0, 1)")));
        }
        model.tau = t;
    }
    let articles = load_corpus(&a.corpus, &mut run)?;
    let inputs = SentenceInputs::load(&a.resources, &model.features, &articles, &mut run)?;
    let examples = sentence_examples(&articles, &[], exec)?;
    let fvs = featurize_sentences(&examples, &model.features, &inputs.resources(), exec)?;
    let pairs: Vec<(&SentenceExample, FeatureVector)> = examples.iter().zip(fvs).collect();
    let preds = predict_batch(&model, &pairs, exec);
    let records: Vec<_> = preds.iter().map(|p| p.record()).collect();
    let mut probs = String::new();
    for p in &preds {
        writeln!(
            probs,
            "{}\t{}\t{}",
            p.article_id, p.sentence_index, p.p_non_propaganda
        )
        .unwrap();
    }
    run.write("predictions.tsv", &write_sentence_labels(&records))?;
    run.write("probabilities.tsv", &probs)?;
    run.finish()
}

fn cmd_sweep_slc(a: &SweepSlcArgs, exec: Execution, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new(argv, a.out.as_deref())?;
    let model = load_slc_model(&a.model, &mut run)?;
    let articles = load_corpus(&a.corpus, &mut run)?;
    let anns = load_labels(&a.labels, &articles, &mut run)?;
    let inputs = SentenceInputs::load(&a.resources, &model.features, &articles, &mut run)?;
    let examples = sentence_examples(&articles, &anns, exec)?;
    let fvs = featurize_sentences(&examples, &model.features, &inputs.resources(), exec)?;
    let scored: Vec<(f64, SentenceLabel)> = fvs
        .iter()
        .zip(&examples)
        .map(|(fv, ex)| (slc::predict_proba(&model, fv), ex.label))
        .collect();
    let grid = if a.grid.is_empty() {
        slc::default_grid()
    } else {
        a.grid.clone()
    };
    let sweep = sweep_threshold(&scored, &grid, exec)?;
    let text = sweep.to_tsv();
    print!("{text}");
    run.write("sweep.tsv", &text)?;
    run.finish()
}

fn cmd_analyze_slc(a: &AnalyzeSlcArgs, exec: Execution, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new(argv, a.out.as_deref())?;
    let articles = load_corpus(&a.corpus, &mut run)?;
    let anns = load_labels(&a.labels, &articles, &mut run)?;
    run.input(&a.pred)?;
    let preds = parse_in(&a.pred, parse_sentence_labels)?;
    let gold = sentence_examples(&articles, &anns, exec)?;
    let rows = analyze_by_technique(&preds, &gold, a.min_count).map_err(|e| e.in_file(&a.pred))?;
    let text = format_technique_accuracy(&rows);
    print!("{text}");
    run.write("technique-accuracy.tsv", &text)?;
    run.finish()
}

struct TokenInputs {
    vectors: Option<WordVectorTable>,
    concepts: Option<ConceptDictionary>,
}

impl TokenInputs {
    fn load(
        args: &TokenResourceArgs,
        config: &TokenFeatureConfig,
        run: &mut Run<'_>,
    ) -> Result<Self> {
        let vectors = match (&args.vectors, config.word_vectors) {
            (Some(p), true) => {
                run.input(p)?;
                Some(parse_in(p, WordVectorTable::parse)?)
            }
            (None, true) => {
                return Err(Error::MissingResource(
                    "word vectors (pass --vectors)".into(),
                ))
            }
            _ => None,
        };
        let concepts = match (&args.concepts, config.concepts) {
            (Some(p), true) => {
                run.input(p)?;
                Some(parse_in(p, ConceptDictionary::parse)?)
            }
            (None, true) => {
                return Err(Error::MissingResource(
                    "concept dictionary (pass --concepts)".into(),
                ))
            }
            _ => None,
        };
        Ok(TokenInputs { vectors, concepts })
    }

    fn resources(&self) -> TokenResources<'_> {
        TokenResources {
            vectors: self.vectors.as_ref(),
            concepts: self.concepts.as_ref(),
        }
    }
}

fn token_sequences(
    articles: &[Article],
    anns: &[FragmentAnnotation],
    exec: Execution,
) -> Result<Vec<TokenSequence>> {
    let grouped = crate::corpus::group_by_article(anns);
    let empty = Vec::new();
    let per = par::try_map(exec, articles, |a| {
        encode_bio(
            a,
            grouped.get(&a.id).unwrap_or(&empty),
            &WhitespaceTokenizer,
        )
    })?;
    Ok(per
        .into_iter()
        .flatten()
        .filter(|s| !s.tokens.is_empty())
        .collect())
}

fn cmd_train_flc(a: &TrainFlcArgs, exec: Execution, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new(argv, Some(&a.out.out))?;
    run.seed = Some(a.seed);
    let all = load_corpus(&a.corpus, &mut run)?;
    let (train, dev) = match &a.dev_manifest {
        Some(m) => {
            run.input(m)?;
            let dev = select(&load_articles(&a.corpus.articles)?, m)?;
            let dev_ids: BTreeSet<&str> = dev.iter().map(|d| d.id.as_str()).collect();
            let train: Vec<Article> = all
                .into_iter()
                .filter(|x| !dev_ids.contains(x.id.as_str()))
                .collect();
            (train, dev)
        }
        None => split_train_dev(&all, a.dev_fraction, a.seed)?,
    };
    if train.is_empty() {
        return Err(Error::invalid(
            "no training articles left after removing dev articles",
        ));
    }
    let mut both = train.clone();
    both.extend(dev.iter().cloned());
    let anns = load_labels(&a.labels, &both, &mut run)?;
    let inputs = TokenInputs::load(&a.resources, &a.features, &mut run)?;
    let train_seqs = token_sequences(&train, &anns, exec)?;
    let dev_seqs = token_sequences(&dev, &anns, exec)?;
    let config = CrfTrainConfig {
        max_epochs: a.max_epochs,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        patience: a.patience,
        l2: a.l2,
        seed: a.seed,
    };
    let (model, report) = train_crf(
        &train_seqs,
        &dev_seqs,
        &a.features,
        &inputs.resources(),
        &config,
        exec,
    )?;
    let best = report
        .epochs
        .iter()
        .find(|e| e.epoch == report.selected_epoch)
        .map_or(0.0, |e| e.dev_f1);
    println!(
        "epochs\t{}\nselected_epoch\t{}\ndev_f1\t{best:.3}\nstop\t{}",
        report.epochs.len(),
        report.selected_epoch,
        report.stop_reason
    );
    run.write("model.txt", &model.to_text())?;
    run.write("train-log.tsv", &report.to_tsv())?;
    let dev_ids: Vec<String> = dev.iter().map(|d| d.id.clone()).collect();
    run.write("dev.manifest", &lines(&dev_ids))?;
    run.finish()
}

fn cmd_predict_flc(a: &PredictFlcArgs, exec: Execution, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new(argv, Some(&a.out.out))?;
    run.input(&a.model)?;
    let model = parse_in(&a.model, CrfModel::from_text)?;
    let articles = load_corpus(&a.corpus, &mut run)?;
    let inputs = TokenInputs::load(&a.resources, &model.token_config, &mut run)?;
    let res = inputs.resources();
    let mut frags = Vec::new();
    for article in &articles {
        frags.extend(predict_fragments(
            &model,
            article,
            &WhitespaceTokenizer,
            &model.token_config,
            &res,
            exec,
        )?);
    }
    run.write("predictions.tsv", &write_fragment_labels(&frags))?;
    run.finish()
}

fn cmd_eval_slc(a: &EvalSlcArgs, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new(argv, a.out.as_deref())?;
    run.input(&a.pred)?;
    run.input(&a.gold)?;
    let pred = parse_in(&a.pred, parse_sentence_labels)?;
    let gold = parse_in(&a.gold, parse_sentence_labels)?;
    let report = slc_prf(&pred, &gold).map_err(|e| e.in_file(&a.pred))?;
    let text = format_report(&report, a.style);
    print!("{text}");
    run.write("report.tsv", &text)?;
    run.finish()
}

fn cmd_eval_flc(a: &EvalFlcArgs, argv: &[OsString]) -> Result<()> {
    let mut run = Run::new(argv, a.out.as_deref())?;
    run.input(&a.pred)?;
    run.input(&a.gold)?;
    let pred = parse_in(&a.pred, parse_fragment_labels)?;
    let gold = parse_in(&a.gold, parse_fragment_labels)?;
    let text = format_report(&flc_prf(&pred, &gold), a.style);
    print!("{text}");
    run.write("report.tsv", &text)?;
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn article_ids_from_file_names() {
        assert_eq!(article_id_from_stem("article111111"), "111111");
        assert_eq!(article_id_from_stem("article"), "article");
        assert_eq!(article_id_from_stem("articlexyz"), "articlexyz");
        assert_eq!(article_id_from_stem("42"), "42");
    }

    #[test]
    fn config_file_is_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        fs::write(&cfg, "# comment\nseed=5\ndedupe=true\nchar-offsets=false\n").unwrap();
        let argv = os(&[
            "propdetect",
            "split",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        let expanded = expand_config(argv).unwrap();
        assert_eq!(
            expanded,
            os(&[
                "propdetect",
                "split",
                "--seed",
                "5",
                "--dedupe",
                "--seed",
                "9"
            ])
        );
        let parsed = Cli::try_parse_from(
            expanded
                .into_iter()
                .chain(os(&["--articles", "a", "--out", "o"]))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        match parsed.command {
            Command::Split(s) => {
                assert_eq!(s.seed, 9);
                assert!(s.corpus.dedupe);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_config_line_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.conf");
        fs::write(&cfg, "seed=1\nnonsense\n").unwrap();
        let err =
            expand_config(os(&["p", "split", "--config", cfg.to_str().unwrap()])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.conf") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(os(&["propdetect", "frobnicate"])), 1);
        assert_eq!(
            run(os(&[
                "propdetect",
                "eval-flc",
                "--pred",
                "/nonexistent",
                "--gold",
                "/nonexistent"
            ])),
            1
        );
        assert_eq!(run(os(&["propdetect", "--help"])), 0);
    }
}
