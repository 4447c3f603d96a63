//! Scoring for both sub-tasks.
//!
//! Sentence level: precision, recall and F1 of the propaganda class.
//!
//! Fragment level: partial-overlap credit. For predicted spans `S` and gold
//! spans `T`, with `|s ∩ t|` counted only when article and technique agree,
//!
//! ```text
//! P = 1/|S| Σ_s Σ_t |s ∩ t| / |s|        R = 1/|T| Σ_t Σ_s |s ∩ t| / |t|
//! ```
//!
//! An empty `S` scores precision 0 and an empty `T` recall 0. A predicted span
//! overlapping several gold spans of its technique collects credit from each.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::corpus::{FragmentAnnotation, SentenceLabel, SentenceLabelRecord, Technique};
use crate::error::{Error, Result};

/// Precision, recall, F1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SlcReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SlcReport {
    /// Score `(predicted, gold)` label pairs with propaganda as positive.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (SentenceLabel, SentenceLabel)>) -> Self {
        use SentenceLabel::*;
        let mut r = SlcReport::default();
        for (p, g) in pairs {
            match (p, g) {
                (Propaganda, Propaganda) => r.tp += 1,
                (Propaganda, NonPropaganda) => r.fp += 1,
                (NonPropaganda, Propaganda) => r.fn_ += 1,
                (NonPropaganda, NonPropaganda) => r.tn += 1,
            }
        }
        r.precision = ratio(r.tp, r.tp + r.fp);
        r.recall = ratio(r.tp, r.tp + r.fn_);
        r.f1 = harmonic(r.precision, r.recall);
        r
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Sentence-level scoring; every gold sentence needs exactly one prediction.
pub fn slc_prf(
    predictions: &[SentenceLabelRecord],
    gold: &[SentenceLabelRecord],
) -> Result<SlcReport> {
    let mut by_key: HashMap<(&str, usize), SentenceLabel> =
        HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_key
            .insert((&p.article_id, p.sentence_index), p.label)
            .is_some()
        {
            return Err(Error::invalid(format!(
                "duplicate prediction for sentence {} of article {}",
                p.sentence_index, p.article_id
            )));
        }
    }
    let mut pairs = Vec::with_capacity(gold.len());
    for g in gold {
        let p = by_key
            .remove(&(g.article_id.as_str(), g.sentence_index))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "missing prediction for sentence {} of article {}",
                    g.sentence_index, g.article_id
                ))
            })?;
        pairs.push((p, g.label));
    }
    if let Some((a, i)) = by_key.keys().min() {
        return Err(Error::invalid(format!(
            "prediction for sentence {i} of article {a} has no gold label"
        )));
    }
    Ok(SlcReport::from_pairs(pairs))
}

/// `|pred ∩ gold| / normalizer` when article and technique agree, else 0.
pub fn span_overlap_score(
    pred: &FragmentAnnotation,
    gold: &FragmentAnnotation,
    normalizer: usize,
) -> f64 {
    assert!(normalizer > 0, "normalizer must be positive");
    if pred.article_id != gold.article_id || pred.technique != gold.technique {
        return 0.0;
    }
    pred.span.intersection_len(&gold.span) as f64 / normalizer as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlcReport {
    pub overall: Prf,
    pub per_technique: [Prf; Technique::COUNT],
}

impl FlcReport {
    pub fn technique(&self, t: Technique) -> Prf {
        self.per_technique[t.rank()]
    }
}

#[derive(Default, Clone, Copy)]
struct Sums {
    precision: f64,
    recall: f64,
    predicted: usize,
    gold: usize,
}

impl Sums {
    fn prf(&self) -> Prf {
        let p = if self.predicted == 0 {
            0.0
        } else {
            self.precision / self.predicted as f64
        };
        let r = if self.gold == 0 {
            0.0
        } else {
            self.recall / self.gold as f64
        };
        Prf::new(p, r)
    }
}

/// Partial-overlap precision/recall/F1, overall and per technique.
pub fn flc_prf(predicted: &[FragmentAnnotation], gold: &[FragmentAnnotation]) -> FlcReport {
    type Key<'a> = (&'a str, Technique);
    let mut groups: BTreeMap<Key<'_>, (Vec<&FragmentAnnotation>, Vec<&FragmentAnnotation>)> =
        BTreeMap::new();
    for s in predicted {
        groups
            .entry((&s.article_id, s.technique))
            .or_default()
            .0
            .push(s);
    }
    for t in gold {
        groups
            .entry((&t.article_id, t.technique))
            .or_default()
            .1
            .push(t);
    }

    let mut per = [Sums::default(); Technique::COUNT];
    for ((_, technique), (ss, ts)) in &groups {
        let sums = &mut per[technique.rank()];
        sums.predicted += ss.len();
        sums.gold += ts.len();
        for s in ss {
            if s.span.is_empty() {
                continue;
            }
            for t in ts {
                sums.precision += span_overlap_score(s, t, s.span.len());
            }
        }
        for t in ts {
            if t.span.is_empty() {
                continue;
            }
            for s in ss {
                sums.recall += span_overlap_score(s, t, t.span.len());
            }
        }
    }

    let mut total = Sums::default();
    for s in &per {
        total.precision += s.precision;
        total.recall += s.recall;
        total.predicted += s.predicted;
        total.gold += s.gold;
    }
    let mut report = FlcReport {
        overall: total.prf(),
        ..Default::default()
    };
    for (i, s) in per.iter().enumerate() {
        report.per_technique[i] = s.prf();
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReportStyle {
    #[default]
    Tsv,
    Text,
}

impl std::str::FromStr for ReportStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(ReportStyle::Tsv),
            "text" => Ok(ReportStyle::Text),
            other => Err(Error::invalid(format!("unknown report style {other:?}"))),
        }
    }
}

/// Rendering of score tables. Values have three decimals.
pub trait Report {
    fn format(&self, style: ReportStyle) -> String;
}

pub fn format_report<R: Report + ?Sized>(report: &R, style: ReportStyle) -> String {
    report.format(style)
}

impl Report for SlcReport {
    fn format(&self, style: ReportStyle) -> String {
        let rows = [
            ("P", format!("{:.3}", self.precision)),
            ("R", format!("{:.3}", self.recall)),
            ("F", format!("{:.3}", self.f1)),
            ("TP", self.tp.to_string()),
            ("FP", self.fp.to_string()),
            ("FN", self.fn_.to_string()),
            ("TN", self.tn.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            match style {
                ReportStyle::Tsv => writeln!(s, "{k}\t{v}").unwrap(),
                ReportStyle::Text => writeln!(s, "{k:<3}{v:>8}").unwrap(),
            }
        }
        s
    }
}

impl Report for FlcReport {
    fn format(&self, style: ReportStyle) -> String {
        let width = Technique::ALL
            .iter()
            .map(|t| t.name().len())
            .max()
            .unwrap_or(0);
        let mut s = match style {
            ReportStyle::Tsv => "technique\tP\tR\tF\n".to_string(),
            ReportStyle::Text => format!(
                "{:<width$}  {:>6} {:>6} {:>6}\n",
                "technique", "P", "R", "F"
            ),
        };
        let mut row = |name: &str, p: &Prf| match style {
            ReportStyle::Tsv => writeln!(
                s,
                "{name}\t{:.3}\t{:.3}\t{:.3}",
                p.precision, p.recall, p.f1
            )
            .unwrap(),
            ReportStyle::Text => writeln!(
                s,
                "{name:<width$}  {:>6.3} {:>6.3} {:>6.3}",
                p.precision, p.recall, p.f1
            )
            .unwrap(),
        };
        for t in Technique::ALL {
            row(t.name(), &self.per_technique[t.rank()]);
        }
        row("Overall", &self.overall);
        s
    }
}
