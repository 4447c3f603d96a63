use std::ffi::OsString;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use propdetect::cli::{run, METADATA_FILE};
use propdetect::corpus::{encode_bio, group_by_article, Article, Technique};
use propdetect::features::{TokenFeatureConfig, TokenResources, WhitespaceTokenizer};
use propdetect::flc::{predict_fragments, train_crf, CrfModel, CrfTrainConfig, TagSet};
use propdetect::par::Execution;
use propdetect::synth::{generate, write_corpus, SynthConfig};

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("propdetect")
        .chain(args.iter().copied())
        .map(OsString::from))
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn small_model() -> &'static CrfModel {
    static MODEL: OnceLock<CrfModel> = OnceLock::new();
    MODEL.get_or_init(train_small_model)
}

fn train_small_model() -> CrfModel {
    let corpus = generate(&SynthConfig {
        articles: 80,
        ..Default::default()
    });
    let grouped = group_by_article(&corpus.fragments);
    let seqs: Vec<_> = corpus
        .articles
        .iter()
        .flat_map(|a| {
            encode_bio(
                a,
                grouped.get(&a.id).map_or(&[][..], |v| v),
                &WhitespaceTokenizer,
            )
            .unwrap()
        })
        .collect();
    let (train, dev) = seqs.split_at(seqs.len() * 4 / 5);
    let config = CrfTrainConfig {
        max_epochs: 40,
        ..Default::default()
    };
    let (model, report) = train_crf(
        train,
        dev,
        &TokenFeatureConfig::lexical(),
        &TokenResources::default(),
        &config,
        Execution::default(),
    )
    .unwrap();
    assert!(report.selected_epoch >= 1);
    model
}

#[test]
fn planted_trigger_is_tagged() {
    let model = small_model();
    let article = Article::new(
        "5",
        "the council met on monday\nthey said the lunatic mayor was there\n",
    );
    let frags = predict_fragments(
        model,
        &article,
        &WhitespaceTokenizer,
        &model.token_config,
        &TokenResources::default(),
        Execution::default(),
    )
    .unwrap();
    assert_eq!(frags.len(), 1, "{frags:?}");
    assert_eq!(frags[0].technique, Technique::NameCallingLabeling);
    assert_eq!(article.slice(frags[0].span), "lunatic mayor");
    let sentence = article.sentences[1];
    assert!(frags[0].span.begin >= sentence.begin && frags[0].span.end <= sentence.end);
}

#[test]
fn zero_model_tags_nothing() {
    let model = CrfModel::new(TagSet::full(), ["bias".to_string()], Default::default());
    let article = Article::new("5", "the lunatic mayor\n");
    let frags = predict_fragments(
        &model,
        &article,
        &WhitespaceTokenizer,
        &model.token_config,
        &TokenResources::default(),
        Execution::Sequential,
    )
    .unwrap();
    assert!(frags.is_empty());
}

#[test]
fn saved_model_decodes_identically() {
    let model = small_model();
    let loaded = CrfModel::from_text(&model.to_text()).unwrap();
    let article = Article::new(
        "5",
        "the thug crowd and the shameful policy\nnational pride was discussed\n",
    );
    let predict = |m: &CrfModel| {
        predict_fragments(
            m,
            &article,
            &WhitespaceTokenizer,
            &m.token_config,
            &TokenResources::default(),
            Execution::Sequential,
        )
        .unwrap()
    };
    assert_eq!(predict(model), predict(&loaded));
}

#[test]
fn feature_config_mismatch_is_rejected() {
    let model = small_model();
    let article = Article::new("5", "a b\n");
    let other = TokenFeatureConfig {
        shape: false,
        ..model.token_config
    };
    let err = predict_fragments(
        model,
        &article,
        &WhitespaceTokenizer,
        &other,
        &TokenResources::default(),
        Execution::Sequential,
    )
    .unwrap_err();
    assert!(err.to_string().contains("layout mismatch"), "{err}");
}

#[test]
fn split_of_350_articles() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(
        &generate(&SynthConfig {
            articles: 350,
            min_sentences: 1,
            max_sentences: 2,
            ..Default::default()
        }),
        dir.path(),
    )
    .unwrap();
    let out = dir.path().join("split");
    assert_eq!(
        cli(&[
            "split",
            "--articles",
            &s(&dir.path().join("articles")),
            "--dev-fraction",
            "0.2",
            "--seed",
            "1",
            "--out",
            &s(&out)
        ]),
        0
    );
    let count = |f: &str| fs::read_to_string(out.join(f)).unwrap().lines().count();
    assert_eq!((count("train.manifest"), count("dev.manifest")), (280, 70));
    let meta = fs::read_to_string(out.join(METADATA_FILE)).unwrap();
    assert!(meta.contains("seed\t1"));
    assert!(meta.contains("sha256:"));
}

#[test]
fn eval_flc_on_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("g.tsv");
    fs::write(&labels, "1\tDoubt\t0\t10\n1\tSlogans\t20\t25\n").unwrap();
    let out = dir.path().join("eval");
    assert_eq!(
        cli(&[
            "eval-flc",
            "--pred",
            &s(&labels),
            "--gold",
            &s(&labels),
            "--out",
            &s(&out)
        ]),
        0
    );
    let report = fs::read_to_string(out.join("report.tsv")).unwrap();
    assert!(
        report.lines().any(|l| l == "Overall\t1.000\t1.000\t1.000"),
        "{report}"
    );
}

#[test]
fn stats_table_and_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("l.tsv");
    fs::write(&labels, "1\tDoubt\t0\t10\n2\tLoaded_Language\t3\t9\n").unwrap();
    let out = dir.path().join("stats");
    assert_eq!(
        cli(&["stats", "--labels", &s(&labels), "--out", &s(&out)]),
        0
    );
    let table = fs::read_to_string(out.join("stats.tsv")).unwrap();
    assert!(table.starts_with("Loaded Language\t1\n"));
    assert!(table.ends_with("TOTAL\t2\n"));
    assert_eq!(
        cli(&["stats", "--labels", &s(&labels), "--check-reference"]),
        1
    );

    fs::write(&labels, "1\tDoubt\t0\t10\n1\tNot A Technique\t0\t3\n").unwrap();
    assert_eq!(cli(&["stats", "--labels", &s(&labels)]), 1);
    assert_eq!(
        cli(&["stats", "--labels", &s(&dir.path().join("missing.tsv"))]),
        1
    );
    assert_eq!(cli(&["nonsense"]), 1);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(
        &generate(&SynthConfig {
            articles: 20,
            ..Default::default()
        }),
        dir.path(),
    )
    .unwrap();
    let conf = dir.path().join("split.conf");
    fs::write(
        &conf,
        format!(
            "articles={}\ndev-fraction=0.5\nseed=4\n",
            s(&dir.path().join("articles"))
        ),
    )
    .unwrap();
    let out = dir.path().join("split");
    assert_eq!(
        cli(&[
            "split",
            "--config",
            &s(&conf),
            "--dev-fraction",
            "0.25",
            "--out",
            &s(&out)
        ]),
        0
    );
    let dev = fs::read_to_string(out.join("dev.manifest")).unwrap();
    assert_eq!(dev.lines().count(), 5);
}

#[test]
fn predict_flc_writes_submission_file() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(
        &generate(&SynthConfig {
            articles: 30,
            ..Default::default()
        }),
        dir.path(),
    )
    .unwrap();
    let articles = s(&dir.path().join("articles"));
    let labels = s(&dir.path().join("labels.tsv"));
    let train = dir.path().join("train");
    assert_eq!(
        cli(&[
            "train-flc",
            "--articles",
            &articles,
            "--labels",
            &labels,
            "--max-epochs",
            "5",
            "--out",
            &s(&train)
        ]),
        0
    );
    let model = s(&train.join("model.txt"));
    let pred = dir.path().join("pred");
    assert_eq!(
        cli(&[
            "predict-flc",
            "--model",
            &model,
            "--articles",
            &articles,
            "--out",
            &s(&pred)
        ]),
        0
    );
    let text = fs::read_to_string(pred.join("predictions.tsv")).unwrap();
    for line in text.lines() {
        assert_eq!(line.split('\t').count(), 4, "{line}");
    }
    assert!(pred.join(METADATA_FILE).exists());
}
