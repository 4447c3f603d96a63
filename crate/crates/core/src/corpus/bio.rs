use std::cmp::Reverse;
use std::fmt;
use std::str::FromStr;

use super::{Article, FragmentAnnotation, Span, Technique, Token, Tokenizer};
use crate::error::{Error, Result};

/// A BIO tag over the technique inventory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    O,
    B(Technique),
    I(Technique),
}

impl Tag {
    /// Number of tags in the full inventory: O plus B/I per technique.
    pub const COUNT: usize = 1 + 2 * Technique::COUNT;

    /// Index in the full inventory: O = 0, B-t = 1 + 2·rank, I-t = 2 + 2·rank.
    pub fn index(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::B(t) => 1 + 2 * t.rank(),
            Tag::I(t) => 2 + 2 * t.rank(),
        }
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        match i {
            0 => Some(Tag::O),
            i if i < Tag::COUNT => {
                let t = Technique::from_rank((i - 1) / 2)?;
                Some(if i % 2 == 1 { Tag::B(t) } else { Tag::I(t) })
            }
            _ => None,
        }
    }

    pub fn all() -> Vec<Tag> {
        (0..Tag::COUNT).filter_map(Tag::from_index).collect()
    }

    pub fn technique(self) -> Option<Technique> {
        match self {
            Tag::O => None,
            Tag::B(t) | Tag::I(t) => Some(t),
        }
    }

    /// Whether `self` may directly follow `prev` (`None` = sequence start).
    pub fn may_follow(self, prev: Option<Tag>) -> bool {
        match self {
            Tag::I(t) => matches!(prev, Some(Tag::B(u)) | Some(Tag::I(u)) if u == t),
            _ => true,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(t) => write!(f, "B-{t}"),
            Tag::I(t) => write!(f, "I-{t}"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(Tag::O);
        }
        if let Some(rest) = s.strip_prefix("B-") {
            return Ok(Tag::B(rest.parse()?));
        }
        if let Some(rest) = s.strip_prefix("I-") {
            return Ok(Tag::I(rest.parse()?));
        }
        Err(Error::invalid(format!("malformed tag {s:?}")))
    }
}

pub fn is_valid_bio(tags: &[Tag]) -> bool {
    let mut prev = None;
    for &t in tags {
        if !t.may_follow(prev) {
            return false;
        }
        prev = Some(t);
    }
    true
}

/// Tokens of one sentence with their BIO tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub article_id: String,
    pub sentence_index: usize,
    pub tokens: Vec<Token>,
    pub tags: Vec<Tag>,
}

struct Candidate {
    clipped: Span,
    technique: Technique,
    first: usize,
    last: usize,
}

/// Tokenize every sentence and tag tokens from the annotations.
///
/// Annotations are clipped to each sentence. Where clipped spans compete for
/// tokens the longest wins, then the earlier begin, then the more frequent
/// technique; a losing span is dropped whole.
pub fn encode_bio<T: Tokenizer + ?Sized>(
    article: &Article,
    anns: &[FragmentAnnotation],
    tokenizer: &T,
) -> Result<Vec<TokenSequence>> {
    for a in anns {
        if a.article_id != article.id {
            return Err(Error::invalid(format!(
                "annotation for article {} passed with article {}",
                a.article_id, article.id
            )));
        }
        article.check_span(&a.span)?;
    }

    let mut out = Vec::with_capacity(article.sentences.len());
    for (index, sentence) in article.sentences.iter().enumerate() {
        let tokens = tokenizer.tokenize(article.slice(*sentence), sentence.begin);
        let mut candidates: Vec<Candidate> = anns
            .iter()
            .filter_map(|a| {
                let clipped = a.span.clip(sentence)?;
                let mut hit = tokens
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.span.overlaps(&clipped))
                    .map(|(i, _)| i);
                let first = hit.next()?;
                let last = hit.next_back().unwrap_or(first);
                Some(Candidate {
                    clipped,
                    technique: a.technique,
                    first,
                    last,
                })
            })
            .collect();
        candidates.sort_by_key(|c| {
            (
                Reverse(c.clipped.len()),
                c.clipped.begin,
                c.technique.rank(),
            )
        });

        let mut tags = vec![Tag::O; tokens.len()];
        let mut claimed = vec![false; tokens.len()];
        for c in candidates {
            if claimed[c.first..=c.last].iter().any(|&x| x) {
                continue;
            }
            for i in c.first..=c.last {
                claimed[i] = true;
                tags[i] = if i == c.first {
                    Tag::B(c.technique)
                } else {
                    Tag::I(c.technique)
                };
            }
        }
        out.push(TokenSequence {
            article_id: article.id.clone(),
            sentence_index: index,
            tokens,
            tags,
        });
    }
    Ok(out)
}

/// Turn each maximal `B-t (I-t)*` run into a fragment. A stray `I-t` (after
/// `O` or another technique) opens a new span; the number of such repairs is
/// returned alongside the fragments.
pub fn decode_spans(seq: &TokenSequence) -> (Vec<FragmentAnnotation>, usize) {
    let mut spans = Vec::new();
    let mut repaired = 0;
    let mut open: Option<(Technique, Span)> = None;
    let mut prev = None;
    for (tok, &tag) in seq.tokens.iter().zip(&seq.tags) {
        let continues = matches!(tag, Tag::I(_)) && tag.may_follow(prev);
        if !continues {
            if let Some((t, s)) = open.take() {
                spans.push(FragmentAnnotation {
                    article_id: seq.article_id.clone(),
                    technique: t,
                    span: s,
                });
            }
        }
        match tag {
            Tag::O => {}
            Tag::B(t) => open = Some((t, tok.span)),
            Tag::I(t) => {
                if continues {
                    if let Some((_, s)) = open.as_mut() {
                        s.end = tok.span.end;
                    }
                } else {
                    repaired += 1;
                    open = Some((t, tok.span));
                }
            }
        }
        prev = Some(tag);
    }
    if let Some((t, s)) = open {
        spans.push(FragmentAnnotation {
            article_id: seq.article_id.clone(),
            technique: t,
            span: s,
        });
    }
    (spans, repaired)
}
