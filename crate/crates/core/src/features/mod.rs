//! Sentence and token featurization.
//!
//! A [`FeatureVector`] is a sparse map of named features plus an ordered list
//! of dense blocks. Sparse ids are kept in a `BTreeMap`, so iteration order is
//! canonical and extraction is deterministic.

mod resources;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::corpus::{SentenceExample, Span, Token, Tokenizer};
use crate::error::{Error, Result};

pub use resources::{
    CategoryLexicon, ConceptDictionary, ExternalLogits, TaggedSentences, WordVectorTable,
    CONCEPT_SLOTS, DEFAULT_CONCEPTS, DEMO_LEXICON, PROBABILITY_SUM_TOLERANCE,
};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    pub source: String,
    pub values: Vec<f64>,
}

/// Sparse named features plus dense blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureVector {
    pub sparse: BTreeMap<String, f64>,
    pub dense: Vec<DenseBlock>,
}

impl FeatureVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, value: f64) {
        assert!(value.is_finite(), "non-finite feature value");
        self.sparse.insert(id.into(), value);
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.sparse.get(id).copied()
    }

    pub fn push_dense(&mut self, source: impl Into<String>, values: Vec<f64>) {
        assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite dense value"
        );
        self.dense.push(DenseBlock {
            source: source.into(),
            values,
        });
    }

    /// Merge `other`'s sparse features under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: FeatureVector) {
        for (k, v) in other.sparse {
            self.sparse.insert(format!("{prefix}{k}"), v);
        }
    }

    pub fn merge(&mut self, other: FeatureVector) {
        self.sparse.extend(other.sparse);
        self.dense.extend(other.dense);
    }

    pub fn is_empty(&self) -> bool {
        self.sparse.is_empty() && self.dense.is_empty()
    }

    pub fn layout(&self) -> DenseLayout {
        DenseLayout(
            self.dense
                .iter()
                .map(|b| (b.source.clone(), b.values.len()))
                .collect(),
        )
    }

    /// All dense values concatenated in block order.
    pub fn dense_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.dense.iter().flat_map(|b| b.values.iter().copied())
    }
}

/// Ordered `(source, dimensionality)` list describing dense blocks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DenseLayout(pub Vec<(String, usize)>);

impl DenseLayout {
    pub fn total(&self) -> usize {
        self.0.iter().map(|(_, d)| d).sum()
    }
}

impl fmt::Display for DenseLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("-");
        }
        let parts: Vec<String> = self.0.iter().map(|(s, d)| format!("{s}:{d}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for DenseLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "-" || s.trim().is_empty() {
            return Ok(DenseLayout::default());
        }
        s.split(',')
            .map(|part| {
                let (name, dim) = part
                    .split_once(':')
                    .ok_or_else(|| Error::invalid(format!("bad dense layout entry {part:?}")))?;
                let dim = dim
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad dense dimension {dim:?}")))?;
                Ok((name.to_string(), dim))
            })
            .collect::<Result<Vec<_>>>()
            .map(DenseLayout)
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '“' | '”' | '‘' | '’' | '«' | '»' | '—' | '–' | '…' | '¿' | '¡'
        )
}

/// Split on whitespace, then peel leading and trailing punctuation characters
/// off each chunk as single-character tokens. Ranges are offset by
/// `sentence_begin`.
pub fn tokenize(sentence: &str, sentence_begin: usize) -> Vec<Token> {
    let mut out = Vec::new();
    let mut push = |b: usize, e: usize| {
        out.push(Token {
            text: sentence[b..e].to_string(),
            span: Span::new(sentence_begin + b, sentence_begin + e),
        })
    };
    let mut chunks = Vec::new();
    let mut start = None;
    for (i, c) in sentence.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                chunks.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        chunks.push((s, sentence.len()));
    }
    for (b, e) in chunks {
        let chars: Vec<(usize, char)> = sentence[b..e]
            .char_indices()
            .map(|(i, c)| (b + i, c))
            .collect();
        let (mut lo, mut hi) = (0, chars.len());
        while lo < hi && is_punct(chars[lo].1) {
            push(chars[lo].0, chars[lo].0 + chars[lo].1.len_utf8());
            lo += 1;
        }
        let mut trailing = Vec::new();
        while hi > lo && is_punct(chars[hi - 1].1) {
            trailing.push(chars[hi - 1]);
            hi -= 1;
        }
        if lo < hi {
            let end = chars[hi - 1].0 + chars[hi - 1].1.len_utf8();
            push(chars[lo].0, end);
        }
        for (i, c) in trailing.into_iter().rev() {
            push(i, i + c.len_utf8());
        }
    }
    out
}

/// The default tokenizer: [`tokenize`].
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, sentence: &str, sentence_begin: usize) -> Vec<Token> {
        tokenize(sentence, sentence_begin)
    }
}

/// `lex:<category>` = fraction of tokens carrying the category.
pub fn lexicon_features(tokens: &[Token], lex: &CategoryLexicon) -> FeatureVector {
    let mut fv = FeatureVector::new();
    if tokens.is_empty() {
        return fv;
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in tokens {
        for c in lex.lookup(&t.text) {
            *counts.entry(c).or_default() += 1;
        }
    }
    for (c, n) in counts {
        fv.insert(
            format!("lex:{}", lex.categories()[c]),
            n as f64 / tokens.len() as f64,
        );
    }
    fv
}

/// Binary `punct:quote` / `punct:question` presence features.
pub fn punctuation_features(text: &str) -> FeatureVector {
    let mut fv = FeatureVector::new();
    if text
        .chars()
        .any(|c| matches!(c, '"' | '“' | '”' | '«' | '»'))
    {
        fv.insert("punct:quote", 1.0);
    }
    if text.contains('?') {
        fv.insert("punct:question", 1.0);
    }
    fv
}

/// Length-30 indicator vector of the token's concepts.
pub fn concept_onehot(token: &str, dict: &ConceptDictionary) -> Vec<f64> {
    let mut v = vec![0.0; CONCEPT_SLOTS];
    for &i in dict.slots(token) {
        v[i] = 1.0;
    }
    v
}

/// Character classes: upper → `X`, lower → `x`, digit → `d`, others kept.
pub fn word_shape(word: &str) -> String {
    word.chars()
        .map(|c| {
            if c.is_uppercase() {
                'X'
            } else if c.is_lowercase() {
                'x'
            } else if c.is_numeric() {
                'd'
            } else {
                c
            }
        })
        .collect()
}

macro_rules! feature_flags {
    ($(#[$meta:meta])* $name:ident { $($field:ident => $key:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
        pub struct $name {
            $(pub $field: bool,)+
        }

        impl $name {
            pub const NAMES: &'static [&'static str] = &[$($key),+];

            pub fn is_empty(&self) -> bool {
                !($(self.$field)||+)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let mut parts = Vec::new();
                $(if self.$field { parts.push($key); })+
                if parts.is_empty() {
                    f.write_str("none")
                } else {
                    f.write_str(&parts.join(","))
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let mut cfg = $name::default();
                for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
                    match part {
                        $($key => cfg.$field = true,)+
                        other => {
                            return Err(Error::invalid(format!(
                                "unknown feature group {other:?} (expected one of {})",
                                Self::NAMES.join(", ")
                            )))
                        }
                    }
                }
                Ok(cfg)
            }
        }
    };
}

feature_flags! {
    /// Which sentence feature groups to assemble.
    SentenceFeatureConfig {
        lexicon => "lexicon",
        punctuation => "punctuation",
        external_logits => "logits",
        tagged_span_flag => "tagged-spans",
        context => "context",
    }
}

feature_flags! {
    /// Which token feature groups to assemble. Dense blocks follow the
    /// declared order: word vectors, then concept one-hots.
    TokenFeatureConfig {
        surface => "surface",
        lowercase => "lowercase",
        shape => "shape",
        window => "window",
        word_vectors => "vectors",
        concepts => "concepts",
    }
}

impl TokenFeatureConfig {
    /// Sparse lexical defaults used by the fragment tagger.
    pub fn lexical() -> Self {
        TokenFeatureConfig {
            surface: true,
            lowercase: true,
            shape: true,
            window: true,
            ..Default::default()
        }
    }

    pub fn layout(&self, res: &TokenResources<'_>) -> Result<DenseLayout> {
        let mut layout = Vec::new();
        if self.word_vectors {
            let v = res
                .vectors
                .ok_or_else(|| Error::MissingResource("word vectors".into()))?;
            layout.push((VECTORS_SOURCE.to_string(), v.dim()));
        }
        if self.concepts {
            res.concepts
                .ok_or_else(|| Error::MissingResource("concept dictionary".into()))?;
            layout.push((CONCEPTS_SOURCE.to_string(), CONCEPT_SLOTS));
        }
        Ok(DenseLayout(layout))
    }
}

pub const VECTORS_SOURCE: &str = "vectors";
pub const CONCEPTS_SOURCE: &str = "concepts";

/// Shared read-only resources for sentence features.
#[derive(Clone, Copy, Debug, Default)]
pub struct SentenceResources<'a> {
    pub lexicon: Option<&'a CategoryLexicon>,
    pub logits: Option<&'a ExternalLogits>,
    pub tagged: Option<&'a TaggedSentences>,
}

/// Shared read-only resources for token features.
#[derive(Clone, Copy, Debug, Default)]
pub struct TokenResources<'a> {
    pub concepts: Option<&'a ConceptDictionary>,
    pub vectors: Option<&'a WordVectorTable>,
}

fn require<'a, T>(r: Option<&'a T>, what: &str) -> Result<&'a T> {
    r.ok_or_else(|| Error::MissingResource(what.to_string()))
}

/// Union of the selected sentence feature groups.
///
/// `context` adds lexicon and punctuation features of the up-to-two
/// neighbouring sentences on each side, under the `ctx:` prefix.
pub fn assemble_sentence_features(
    example: &SentenceExample,
    config: &SentenceFeatureConfig,
    res: &SentenceResources<'_>,
) -> Result<FeatureVector> {
    let mut fv = FeatureVector::new();
    if config.lexicon {
        let lex = require(res.lexicon, "category lexicon")?;
        fv.merge(lexicon_features(&tokenize(&example.text, 0), lex));
    }
    if config.punctuation {
        fv.merge(punctuation_features(&example.text));
    }
    if config.external_logits {
        let logits = require(res.logits, "external logits")?;
        let (p_prop, p_non) = logits
            .get(&example.article_id, example.sentence_index)
            .ok_or_else(|| {
                Error::MissingResource(format!(
                    "logits for sentence {} of article {}",
                    example.sentence_index, example.article_id
                ))
            })?;
        fv.insert("logit:prop", p_prop);
        fv.insert("logit:nonprop", p_non);
    }
    if config.tagged_span_flag {
        let tagged = require(res.tagged, "tagged-span predictions")?;
        if tagged.contains(&example.article_id, example.sentence_index) {
            fv.insert("flc:tagged", 1.0);
        }
    }
    if config.context {
        let lex = require(res.lexicon, "category lexicon")?;
        let neighbours: Vec<&String> = example
            .context_before
            .iter()
            .chain(&example.context_after)
            .collect();
        let tokens: Vec<Token> = neighbours.iter().flat_map(|s| tokenize(s, 0)).collect();
        let mut ctx = lexicon_features(&tokens, lex);
        let joined: String = neighbours
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        ctx.merge(punctuation_features(&joined));
        fv.extend_prefixed(CONTEXT_PREFIX, ctx);
    }
    Ok(fv)
}

pub const CONTEXT_PREFIX: &str = "ctx:";
pub const BOUNDARY_BEFORE: &str = "<S>";
pub const BOUNDARY_AFTER: &str = "</S>";

/// Features of token `i`: an always-on `bias`, the selected sparse groups,
/// then dense blocks (word vector, concept one-hot) in declared order.
pub fn assemble_token_features(
    tokens: &[Token],
    i: usize,
    config: &TokenFeatureConfig,
    res: &TokenResources<'_>,
) -> Result<FeatureVector> {
    let tok = &tokens[i].text;
    let mut fv = FeatureVector::new();
    fv.insert("bias", 1.0);
    if config.surface {
        fv.insert(format!("w:{tok}"), 1.0);
    }
    if config.lowercase {
        fv.insert(format!("lw:{}", tok.to_lowercase()), 1.0);
    }
    if config.shape {
        fv.insert(format!("shape:{}", word_shape(tok)), 1.0);
    }
    if config.window {
        let prev = if i == 0 {
            BOUNDARY_BEFORE
        } else {
            tokens[i - 1].text.as_str()
        };
        let next = tokens
            .get(i + 1)
            .map_or(BOUNDARY_AFTER, |t| t.text.as_str());
        fv.insert(format!("w-1:{prev}"), 1.0);
        fv.insert(format!("w+1:{next}"), 1.0);
    }
    if config.word_vectors {
        let table = require(res.vectors, "word vectors")?;
        let v = table
            .get(tok)
            .map_or_else(|| vec![0.0; table.dim()], <[f64]>::to_vec);
        fv.push_dense(VECTORS_SOURCE, v);
    }
    if config.concepts {
        let dict = require(res.concepts, "concept dictionary")?;
        fv.push_dense(CONCEPTS_SOURCE, concept_onehot(tok, dict));
    }
    Ok(fv)
}

/// Features for every token of a sentence.
pub fn assemble_sequence_features(
    tokens: &[Token],
    config: &TokenFeatureConfig,
    res: &TokenResources<'_>,
) -> Result<Vec<FeatureVector>> {
    (0..tokens.len())
        .map(|i| assemble_token_features(tokens, i, config, res))
        .collect()
}

/// Sparse ids of a vector, for collision checks.
pub fn sparse_ids(fv: &FeatureVector) -> BTreeSet<&str> {
    fv.sparse.keys().map(String::as_str).collect()
}
