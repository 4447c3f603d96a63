use std::collections::BTreeSet;

use proptest::prelude::*;

use propdetect::corpus::{
    corpus_stats, decode_spans, encode_bio, is_valid_bio, split_train_dev, Article,
    FragmentAnnotation, SentenceLabel, SentenceLabelRecord, Technique,
};
use propdetect::eval::{flc_prf, slc_prf};
use propdetect::features::{tokenize, WhitespaceTokenizer};
use propdetect::flc::{nll_and_gradient, CrfWeights, LabeledSequence, TagSet, TokenFeatures};
use propdetect::par::Execution;
use propdetect::slc::{apply_threshold, sweep_threshold};

fn technique() -> impl Strategy<Value = Technique> {
    (0..Technique::COUNT).prop_map(|r| Technique::ALL[r])
}

fn label() -> impl Strategy<Value = SentenceLabel> {
    prop_oneof![
        Just(SentenceLabel::Propaganda),
        Just(SentenceLabel::NonPropaganda)
    ]
}

fn fragments(max: usize) -> impl Strategy<Value = Vec<FragmentAnnotation>> {
    prop::collection::vec(
        (
            prop::sample::select(vec!["1", "2"]),
            0..3usize,
            0..60usize,
            1..20usize,
        ),
        0..max,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(id, t, b, len)| FragmentAnnotation::new(id, Technique::ALL[t], b, b + len))
            .collect()
    })
}

fn article_text() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::collection::vec(
            prop::sample::select(vec!["war", "“free”", "they", "never", "ça", "?", "a-b"]),
            1..8,
        ),
        1..5,
    )
    .prop_map(|lines| lines.iter().map(|l| l.join(" ") + "\n").collect())
}

fn crf_instance() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<(u32, f64)>>)> {
    let tags = TagSet::full();
    let params = CrfWeights::new(&tags, 3, 0).num_params();
    (
        prop::collection::vec(-5.0..5.0f64, params),
        prop::collection::vec(prop::collection::vec((0..3u32, 0.0..2.0f64), 1..3), 1..7),
    )
}

fn tokens(raw: &[Vec<(u32, f64)>]) -> Vec<TokenFeatures> {
    raw.iter()
        .map(|s| TokenFeatures {
            sparse: s.clone(),
            dense: Vec::new(),
        })
        .collect()
}

proptest! {
    #[test]
    fn encoded_tags_are_valid_bio(text in article_text(), raw in prop::collection::vec((technique(), 0..200usize, 1..30usize), 0..6)) {
        let article = Article::new("1", text);
        let len = article.text.len();
        let anns: Vec<_> = raw
            .into_iter()
            .filter_map(|(t, b, l)| {
                let (mut b, mut e) = (b.min(len), (b + l).min(len));
                while !article.text.is_char_boundary(b) { b -= 1; }
                while !article.text.is_char_boundary(e) { e += 1; }
                (b < e).then(|| FragmentAnnotation::new("1", t, b, e))
            })
            .collect();
        let seqs = encode_bio(&article, &anns, &WhitespaceTokenizer).unwrap();
        prop_assert_eq!(seqs.len(), article.sentences.len());
        for s in &seqs {
            prop_assert!(is_valid_bio(&s.tags));
            let (frags, repaired) = decode_spans(s);
            prop_assert_eq!(repaired, 0);
            let sentence = article.sentences[s.sentence_index];
            for f in frags {
                prop_assert!(f.span.begin >= sentence.begin && f.span.end <= sentence.end);
            }
        }
    }

    #[test]
    fn token_offsets_slice_their_text(text in article_text()) {
        let article = Article::new("1", text);
        for s in &article.sentences {
            for t in tokenize(article.slice(*s), s.begin) {
                prop_assert_eq!(&article.text[t.span.begin..t.span.end], t.text.as_str());
            }
        }
    }

    #[test]
    fn split_is_a_partition(n in 2..400usize, f in 0.01..0.99f64, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (train, dev) = split_train_dev(&items, f, seed).unwrap();
        prop_assert!(!train.is_empty() && !dev.is_empty());
        let all: BTreeSet<usize> = train.iter().chain(&dev).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(train.len() + dev.len(), n);
        prop_assert_eq!(split_train_dev(&items, f, seed).unwrap(), (train, dev));
    }

    #[test]
    fn stats_total_counts_every_annotation(anns in fragments(40)) {
        let stats = corpus_stats(&anns);
        prop_assert_eq!(stats.total, anns.len());
        prop_assert_eq!(Technique::ALL.iter().map(|&t| stats.get(t)).sum::<usize>(), anns.len());
    }

    #[test]
    fn flc_swap_symmetry(s in fragments(8), t in fragments(8)) {
        let a = flc_prf(&s, &t);
        let b = flc_prf(&t, &s);
        prop_assert_eq!(a.overall.precision, b.overall.recall);
        prop_assert_eq!(a.overall.recall, b.overall.precision);
        for tech in Technique::ALL {
            prop_assert_eq!(a.technique(tech).precision, b.technique(tech).recall);
        }
    }

    #[test]
    fn flc_recall_monotone_in_overlap(gold_len in 2..30usize, pred_len in 1..30usize, shift in 0..30usize) {
        let t = Technique::Doubt;
        let gold = [FragmentAnnotation::new("1", t, 100, 100 + gold_len)];
        // Sliding the prediction rightwards into the gold span only grows the overlap.
        let start = 100 - pred_len.min(100);
        let before = [FragmentAnnotation::new("1", t, start, start + pred_len)];
        let after = [FragmentAnnotation::new("1", t, start + shift.min(pred_len), start + shift.min(pred_len) + pred_len)];
        prop_assert!(flc_prf(&after, &gold).overall.recall >= flc_prf(&before, &gold).overall.recall);
    }

    #[test]
    fn slc_prf_matches_confusion_counts(pairs in prop::collection::vec((label(), label()), 0..100)) {
        let rec = |i: usize, l: SentenceLabel| SentenceLabelRecord { article_id: "a".into(), sentence_index: i, label: l };
        let pred: Vec<_> = pairs.iter().enumerate().map(|(i, p)| rec(i, p.0)).collect();
        let gold: Vec<_> = pairs.iter().enumerate().map(|(i, p)| rec(i, p.1)).collect();
        let r = slc_prf(&pred, &gold).unwrap();
        let is = |l: SentenceLabel| l == SentenceLabel::Propaganda;
        let tp = pairs.iter().filter(|(p, g)| is(*p) && is(*g)).count();
        let fp = pairs.iter().filter(|(p, g)| is(*p) && !is(*g)).count();
        let fn_ = pairs.iter().filter(|(p, g)| !is(*p) && is(*g)).count();
        let tn = pairs.len() - tp - fp - fn_;
        prop_assert_eq!((r.tp, r.fp, r.fn_, r.tn), (tp, fp, fn_, tn));
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rc = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        prop_assert_eq!(r.precision, p);
        prop_assert_eq!(r.recall, rc);
    }

    #[test]
    fn threshold_half_is_argmax(p in 0.0..=1.0f64) {
        let want = if p > 1.0 - p { SentenceLabel::NonPropaganda } else { SentenceLabel::Propaganda };
        prop_assert_eq!(apply_threshold(p, 0.5), want);
    }

    #[test]
    fn sweep_label_sets_are_monotone(scores in prop::collection::vec((0.0..=1.0f64, label()), 1..60)) {
        let grid: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        let sweep = sweep_threshold(&scores, &grid, Execution::Sequential).unwrap();
        for w in sweep.rows.windows(2) {
            prop_assert!(w[0].report.tp + w[0].report.fp <= w[1].report.tp + w[1].report.fp);
            for &(p, _) in &scores {
                if apply_threshold(p, w[0].tau) == SentenceLabel::Propaganda {
                    prop_assert_eq!(apply_threshold(p, w[1].tau), SentenceLabel::Propaganda);
                }
            }
        }
        prop_assert_eq!(sweep, sweep_threshold(&scores, &grid, Execution::Parallel).unwrap());
    }

    #[test]
    fn viterbi_respects_constraints((flat, raw) in crf_instance()) {
        let tags = TagSet::full();
        let mut w = CrfWeights::new(&tags, 3, 0);
        w.set_flat(&flat);
        let feats = tokens(&raw);
        let (path, score) = w.viterbi(&feats);
        let as_tags: Vec<_> = path.iter().map(|&i| tags.tag(i)).collect();
        prop_assert!(is_valid_bio(&as_tags));
        prop_assert_eq!(score, w.sequence_score(&feats, &path));
        prop_assert!(score <= w.log_partition(&feats));
    }

    #[test]
    fn marginals_sum_to_one((flat, raw) in crf_instance()) {
        let tags = TagSet::full();
        let mut w = CrfWeights::new(&tags, 3, 0);
        w.set_flat(&flat);
        let m = w.marginals(&tokens(&raw));
        for row in m.chunks(tags.len()) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_independent_of_execution((flat, raw) in crf_instance(), l2 in 0.0..0.1f64) {
        let tags = TagSet::full();
        let mut w = CrfWeights::new(&tags, 3, 0);
        w.set_flat(&flat);
        let feats = tokens(&raw);
        let batch: Vec<_> = (0..4)
            .map(|k| {
                let f = feats[..(k % feats.len()) + 1].to_vec();
                let (tags, _) = w.viterbi(&f);
                LabeledSequence { features: f, tags }
            })
            .collect();
        let a = nll_and_gradient(&w, &batch, l2, Execution::Sequential).unwrap();
        let b = nll_and_gradient(&w, &batch, l2, Execution::Parallel).unwrap();
        prop_assert_eq!(a, b);
    }
}
