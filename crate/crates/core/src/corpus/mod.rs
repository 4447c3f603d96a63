//! Articles, fragment annotations and the supervision derived from them.
//!
//! All offsets are byte offsets into the UTF-8 article text, half-open, and
//! always fall on character boundaries.

mod bio;
mod technique;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use bio::{decode_spans, encode_bio, is_valid_bio, Tag, TokenSequence};
pub use technique::{Technique, REFERENCE_FREQUENCIES, REFERENCE_TOTAL};

/// Half-open byte range `[begin, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub begin: usize,
    pub end: usize,
}

impl Span {
    pub fn new(begin: usize, end: usize) -> Self {
        Span { begin, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.begin)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.begin
    }

    pub fn intersection_len(&self, other: &Span) -> usize {
        self.end
            .min(other.end)
            .saturating_sub(self.begin.max(other.begin))
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.intersection_len(other) > 0
    }

    pub fn clip(&self, to: &Span) -> Option<Span> {
        let s = Span::new(self.begin.max(to.begin), self.end.min(to.end));
        (!s.is_empty()).then_some(s)
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.begin, self.end)
    }
}

/// A token with its absolute byte range in the article.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub span: Span,
}

/// Splits one sentence into tokens carrying absolute article offsets.
pub trait Tokenizer: Sync {
    fn tokenize(&self, sentence: &str, sentence_begin: usize) -> Vec<Token>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Article {
    pub id: String,
    pub text: String,
    pub sentences: Vec<Span>,
}

impl Article {
    /// Build an article from text, one sentence per non-empty line.
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let sentences = line_spans(&text);
        Article {
            id: id.into(),
            text,
            sentences,
        }
    }

    pub fn sentence_text(&self, index: usize) -> &str {
        let s = self.sentences[index];
        &self.text[s.begin..s.end]
    }

    pub fn slice(&self, span: Span) -> &str {
        &self.text[span.begin..span.end]
    }

    /// Index of the first sentence overlapping `span`, if any.
    pub fn sentence_of(&self, span: &Span) -> Option<usize> {
        self.sentences.iter().position(|s| s.overlaps(span))
    }

    /// Byte offset of the `n`-th character (or `len` for one past the end).
    pub fn char_to_byte(&self, n: usize) -> Option<usize> {
        if n == 0 {
            return Some(0);
        }
        match self.text.char_indices().nth(n) {
            Some((b, _)) => Some(b),
            None if self.text.chars().count() == n => Some(self.text.len()),
            None => None,
        }
    }

    fn check_span(&self, span: &Span) -> Result<()> {
        if span.begin >= span.end
            || span.end > self.text.len()
            || !self.text.is_char_boundary(span.begin)
            || !self.text.is_char_boundary(span.end)
        {
            return Err(Error::invalid(format!(
                "span {span} out of bounds for article {} (length {})",
                self.id,
                self.text.len()
            )));
        }
        Ok(())
    }
}

fn line_spans(text: &str) -> Vec<Span> {
    let mut out = Vec::new();
    let mut begin = 0;
    for line in text.split_inclusive('\n') {
        let body = line.strip_suffix('\n').unwrap_or(line);
        let body = body.strip_suffix('\r').unwrap_or(body);
        if !body.is_empty() {
            out.push(Span::new(begin, begin + body.len()));
        }
        begin += line.len();
    }
    out
}

/// Parse raw article bytes. Sentences are the non-empty lines; their ranges
/// index the original bytes, newlines included.
pub fn parse_article(raw: &[u8], id: &str) -> Result<Article> {
    let text = std::str::from_utf8(raw).map_err(|e| Error::InvalidUtf8 {
        position: e.valid_up_to(),
    })?;
    Ok(Article::new(id, text))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FragmentAnnotation {
    pub article_id: String,
    pub technique: Technique,
    pub span: Span,
}

impl FragmentAnnotation {
    pub fn new(
        article_id: impl Into<String>,
        technique: Technique,
        begin: usize,
        end: usize,
    ) -> Self {
        FragmentAnnotation {
            article_id: article_id.into(),
            technique,
            span: Span::new(begin, end),
        }
    }
}

fn parse_offset(field: &str, line: usize, what: &str) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::format(line, format!("non-integer {what} offset {field:?}")))
}

/// Parse a 4-column fragment label file:
/// `article_id TAB technique TAB begin TAB end`, no header.
pub fn parse_fragment_labels(tsv: &str) -> Result<Vec<FragmentAnnotation>> {
    let mut out = Vec::new();
    for (i, raw) in tsv.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.trim_end_matches('\r').split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::format(
                line,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let technique = Technique::from_str(fields[1])
            .map_err(|_| Error::format(line, format!("unknown technique {:?}", fields[1])))?;
        let begin = parse_offset(fields[2], line, "begin")?;
        let end = parse_offset(fields[3], line, "end")?;
        if begin >= end {
            return Err(Error::format(line, "begin ≥ end"));
        }
        out.push(FragmentAnnotation::new(
            fields[0].trim(),
            technique,
            begin,
            end,
        ));
    }
    Ok(out)
}

pub fn write_fragment_labels(anns: &[FragmentAnnotation]) -> String {
    let mut s = String::new();
    for a in anns {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            a.article_id, a.technique, a.span.begin, a.span.end
        ));
    }
    s
}

/// Rewrite annotations whose offsets count characters into byte offsets.
pub fn convert_char_offsets(
    article: &Article,
    anns: &[FragmentAnnotation],
) -> Result<Vec<FragmentAnnotation>> {
    anns.iter()
        .map(|a| {
            let begin = article.char_to_byte(a.span.begin);
            let end = article.char_to_byte(a.span.end);
            match (begin, end) {
                (Some(b), Some(e)) => Ok(FragmentAnnotation::new(
                    a.article_id.clone(),
                    a.technique,
                    b,
                    e,
                )),
                _ => Err(Error::invalid(format!(
                    "character span {} out of bounds for article {}",
                    a.span, article.id
                ))),
            }
        })
        .collect()
}

/// Group annotations by article id.
pub fn group_by_article(anns: &[FragmentAnnotation]) -> BTreeMap<String, Vec<FragmentAnnotation>> {
    let mut map: BTreeMap<String, Vec<FragmentAnnotation>> = BTreeMap::new();
    for a in anns {
        map.entry(a.article_id.clone()).or_default().push(a.clone());
    }
    map
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SentenceLabel {
    Propaganda,
    NonPropaganda,
}

impl SentenceLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SentenceLabel::Propaganda => "propaganda",
            SentenceLabel::NonPropaganda => "non-propaganda",
        }
    }
}

impl fmt::Display for SentenceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SentenceLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "propaganda" => Ok(SentenceLabel::Propaganda),
            "non-propaganda" => Ok(SentenceLabel::NonPropaganda),
            other => Err(Error::invalid(format!("unknown sentence label {other:?}"))),
        }
    }
}

/// One row of a sentence label file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceLabelRecord {
    pub article_id: String,
    pub sentence_index: usize,
    pub label: SentenceLabel,
}

/// Parse `article_id TAB sentence_index TAB label` rows.
pub fn parse_sentence_labels(tsv: &str) -> Result<Vec<SentenceLabelRecord>> {
    let mut out = Vec::new();
    for (i, raw) in tsv.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.trim_end_matches('\r').split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                line,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let sentence_index = fields[1].trim().parse().map_err(|_| {
            Error::format(line, format!("non-integer sentence index {:?}", fields[1]))
        })?;
        let label = fields[2]
            .parse()
            .map_err(|_| Error::format(line, format!("unknown label {:?}", fields[2])))?;
        out.push(SentenceLabelRecord {
            article_id: fields[0].trim().to_string(),
            sentence_index,
            label,
        });
    }
    Ok(out)
}

pub fn write_sentence_labels(rows: &[SentenceLabelRecord]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\n",
            r.article_id, r.sentence_index, r.label
        ));
    }
    s
}

/// Sentence-level supervision with a two-sentence context window.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceExample {
    pub article_id: String,
    pub sentence_index: usize,
    pub text: String,
    pub context_before: Vec<String>,
    pub context_after: Vec<String>,
    pub label: SentenceLabel,
    pub covering_techniques: BTreeSet<Technique>,
}

impl SentenceExample {
    pub fn record(&self) -> SentenceLabelRecord {
        SentenceLabelRecord {
            article_id: self.article_id.clone(),
            sentence_index: self.sentence_index,
            label: self.label,
        }
    }
}

pub const CONTEXT_WINDOW: usize = 2;

/// Label every sentence of `article`: propaganda iff at least one annotation
/// overlaps it by one byte or more.
pub fn derive_sentence_labels(
    article: &Article,
    anns: &[FragmentAnnotation],
) -> Result<Vec<SentenceExample>> {
    for a in anns {
        if a.article_id != article.id {
            return Err(Error::invalid(format!(
                "annotation for article {} passed with article {}",
                a.article_id, article.id
            )));
        }
        article.check_span(&a.span)?;
    }
    let n = article.sentences.len();
    Ok((0..n)
        .map(|i| {
            let range = article.sentences[i];
            let covering: BTreeSet<Technique> = anns
                .iter()
                .filter(|a| a.span.overlaps(&range))
                .map(|a| a.technique)
                .collect();
            let label = if covering.is_empty() {
                SentenceLabel::NonPropaganda
            } else {
                SentenceLabel::Propaganda
            };
            SentenceExample {
                article_id: article.id.clone(),
                sentence_index: i,
                text: article.sentence_text(i).to_string(),
                context_before: (i.saturating_sub(CONTEXT_WINDOW)..i)
                    .map(|j| article.sentence_text(j).to_string())
                    .collect(),
                context_after: (i + 1..n.min(i + 1 + CONTEXT_WINDOW))
                    .map(|j| article.sentence_text(j).to_string())
                    .collect(),
                label,
                covering_techniques: covering,
            }
        })
        .collect())
}

/// Deterministically split whole items into `(train, dev)`.
///
/// The dev part holds `round(n * dev_fraction)` items, clamped so both sides
/// are non-empty.
pub fn split_train_dev<T: Clone>(
    items: &[T],
    dev_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "dev fraction {dev_fraction} not in (0, 1)"
        )));
    }
    if items.len() < 2 {
        return Err(Error::invalid(format!(
            "cannot split {} article(s)",
            items.len()
        )));
    }
    let n = items.len();
    let dev_n = ((n as f64 * dev_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut dev_idx = order[..dev_n].to_vec();
    let mut train_idx = order[dev_n..].to_vec();
    dev_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| items[i].clone()).collect(),
        dev_idx.iter().map(|&i| items[i].clone()).collect(),
    ))
}

/// Annotation counts per technique.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TechniqueCounts {
    pub counts: [usize; Technique::COUNT],
    pub total: usize,
}

impl TechniqueCounts {
    pub fn get(&self, t: Technique) -> usize {
        self.counts[t.rank()]
    }

    /// `technique TAB count` rows in frequency order, then a `TOTAL` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for t in Technique::ALL {
            s.push_str(&format!("{}\t{}\n", t, self.get(t)));
        }
        s.push_str(&format!("TOTAL\t{}\n", self.total));
        s
    }

    /// Differences against the reference release frequencies, one line each.
    pub fn diff_against_reference(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (t, expected) in REFERENCE_FREQUENCIES {
            if self.get(t) != expected {
                out.push(format!("{t}: expected {expected}, got {}", self.get(t)));
            }
        }
        if self.total != REFERENCE_TOTAL {
            out.push(format!(
                "TOTAL: expected {REFERENCE_TOTAL}, got {}",
                self.total
            ));
        }
        out
    }
}

pub fn corpus_stats(anns: &[FragmentAnnotation]) -> TechniqueCounts {
    let mut c = TechniqueCounts::default();
    for a in anns {
        c.counts[a.technique.rank()] += 1;
        c.total += 1;
    }
    c
}

fn normalize_for_dedup(text: &str) -> String {
    text.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Groups (size ≥ 2) of article ids whose whitespace-collapsed, case-folded
/// text is identical. Ids inside a group and groups themselves are sorted.
pub fn detect_duplicates(articles: &[Article]) -> Vec<Vec<String>> {
    let mut by_text: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for a in articles {
        by_text
            .entry(normalize_for_dedup(&a.text))
            .or_default()
            .push(a.id.clone());
    }
    let mut groups: Vec<Vec<String>> = by_text
        .into_values()
        .filter(|g| g.len() >= 2)
        .map(|mut g| {
            g.sort();
            g
        })
        .collect();
    groups.sort();
    groups
}

/// Drop all but the first id (in sorted order) of every duplicate group.
pub fn remove_duplicates(articles: Vec<Article>) -> (Vec<Article>, Vec<String>) {
    let dropped: BTreeSet<String> = detect_duplicates(&articles)
        .into_iter()
        .flat_map(|g| g.into_iter().skip(1))
        .collect();
    let kept = articles
        .into_iter()
        .filter(|a| !dropped.contains(&a.id))
        .collect();
    (kept, dropped.into_iter().collect())
}
