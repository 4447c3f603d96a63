use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::corpus::{Article, FragmentAnnotation};
use crate::error::{Error, Result};

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Word → category sets, in the open `word TAB cat1,cat2,...` format.
///
/// A word ending in `*` matches every token with that prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryLexicon {
    categories: Vec<String>,
    words: HashMap<String, BTreeSet<usize>>,
    prefixes: Vec<(String, BTreeSet<usize>)>,
}

impl CategoryLexicon {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = CategoryLexicon::default();
        let mut cat_index: HashMap<String, usize> = HashMap::new();
        let mut prefixes: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for (line, raw) in content_lines(text) {
            if raw.starts_with('#') {
                continue;
            }
            let (word, cats) = raw
                .split_once('\t')
                .ok_or_else(|| Error::format(line, "expected `word TAB categories`"))?;
            let word = word.trim().to_lowercase();
            if word.is_empty() || word == "*" {
                return Err(Error::format(line, "empty lexicon entry"));
            }
            let mut set = BTreeSet::new();
            for cat in cats.split(',').map(str::trim).filter(|c| !c.is_empty()) {
                let next = cat_index.len();
                let idx = *cat_index.entry(cat.to_string()).or_insert_with(|| {
                    lex.categories.push(cat.to_string());
                    next
                });
                set.insert(idx);
            }
            if set.is_empty() {
                return Err(Error::format(line, format!("no categories for {word:?}")));
            }
            match word.strip_suffix('*') {
                Some(prefix) => prefixes.entry(prefix.to_string()).or_default().extend(set),
                None => lex.words.entry(word).or_default().extend(set),
            }
        }
        lex.prefixes = prefixes.into_iter().collect();
        Ok(lex)
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// Category indices matched by a token (case-insensitive).
    pub fn lookup(&self, token: &str) -> BTreeSet<usize> {
        let lower = token.to_lowercase();
        let mut out = self.words.get(&lower).cloned().unwrap_or_default();
        for (p, cats) in &self.prefixes {
            if lower.starts_with(p.as_str()) {
                out.extend(cats.iter().copied());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.words.len() + self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A small demonstration lexicon in the category-lexicon format.
pub const DEMO_LEXICON: &str = "\
# word\tcategories
hate\tnegemo,anger
hateful\tnegemo,anger
angry\tnegemo,anger
disgrace*\tnegemo
disaster*\tnegemo
evil\tnegemo
corrupt*\tnegemo
terror*\tnegemo,anxiety
fear*\tanxiety
afraid\tanxiety
threat*\tanxiety
danger*\tanxiety
love\tposemo
great\tposemo
proud\tposemo
hero*\tposemo
nation*\tsocial
people\tsocial
america*\tsocial
we\twe
us\twe
our\twe
they\tthey
them\tthey
their\tthey
never\tabsolutist
always\tabsolutist
everyone\tabsolutist
nothing\tabsolutist
must\tcertainty
truth\tcertainty
obviously\tcertainty
maybe\ttentative
perhaps\ttentative
";

/// Number of concept slots in a [`ConceptDictionary`].
pub const CONCEPT_SLOTS: usize = 30;

/// Stand-in concept inventory (usage/register labels); replace it by shipping
/// a dictionary file with its own `#concepts:` header.
pub const DEFAULT_CONCEPTS: [&str; CONCEPT_SLOTS] = [
    "offensive",
    "vulgar",
    "coarse",
    "ethnic slur",
    "derogatory",
    "pejorative",
    "disparaging",
    "slang",
    "informal",
    "colloquial",
    "humorous",
    "ironic",
    "sarcastic",
    "euphemistic",
    "dated",
    "archaic",
    "obsolete",
    "rare",
    "literary",
    "formal",
    "figurative",
    "hyperbolic",
    "emotive",
    "religious",
    "political",
    "military",
    "legal",
    "medical",
    "regional",
    "nonstandard",
];

/// Word → subset of a fixed 30-slot concept inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptDictionary {
    concepts: Vec<String>,
    words: HashMap<String, Vec<usize>>,
}

impl Default for ConceptDictionary {
    fn default() -> Self {
        ConceptDictionary {
            concepts: DEFAULT_CONCEPTS.iter().map(|s| s.to_string()).collect(),
            words: HashMap::new(),
        }
    }
}

impl ConceptDictionary {
    /// Parse `#concepts: c1,...,c30` followed by `word TAB c,c,...` rows.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = content_lines(text);
        let (hline, header) = lines
            .next()
            .ok_or_else(|| Error::format(1, "missing `#concepts:` header"))?;
        let list = header
            .strip_prefix("#concepts:")
            .ok_or_else(|| Error::format(hline, "missing `#concepts:` header"))?;
        let concepts: Vec<String> = list.split(',').map(|c| c.trim().to_string()).collect();
        if concepts.len() != CONCEPT_SLOTS {
            return Err(Error::format(
                hline,
                format!(
                    "expected {CONCEPT_SLOTS} concepts, found {}",
                    concepts.len()
                ),
            ));
        }
        let index: HashMap<&str, usize> = concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        if index.len() != CONCEPT_SLOTS {
            return Err(Error::format(hline, "duplicate concept names"));
        }
        let mut words: HashMap<String, Vec<usize>> = HashMap::new();
        for (line, raw) in lines {
            if raw.starts_with('#') {
                continue;
            }
            let (word, cs) = raw
                .split_once('\t')
                .ok_or_else(|| Error::format(line, "expected `word TAB concepts`"))?;
            let slots = words.entry(word.trim().to_lowercase()).or_default();
            for c in cs.split(',').map(str::trim).filter(|c| !c.is_empty()) {
                let i = *index
                    .get(c)
                    .ok_or_else(|| Error::format(line, format!("unknown concept {c:?}")))?;
                if !slots.contains(&i) {
                    slots.push(i);
                }
            }
            slots.sort_unstable();
        }
        Ok(ConceptDictionary { concepts, words })
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn insert(&mut self, word: &str, concept: &str) -> Result<()> {
        let i = self
            .concepts
            .iter()
            .position(|c| c == concept)
            .ok_or_else(|| Error::invalid(format!("unknown concept {concept:?}")))?;
        let slots = self.words.entry(word.to_lowercase()).or_default();
        if !slots.contains(&i) {
            slots.push(i);
            slots.sort_unstable();
        }
        Ok(())
    }

    pub fn slots(&self, token: &str) -> &[usize] {
        self.words
            .get(&token.to_lowercase())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Externally produced per-sentence class probabilities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExternalLogits {
    map: HashMap<(String, usize), (f64, f64)>,
}

pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-6;

impl ExternalLogits {
    /// Parse `article_id TAB sentence_index TAB p_prop TAB p_nonprop`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (line, raw) in content_lines(text) {
            let f: Vec<&str> = raw.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::format(
                    line,
                    format!("expected 4 fields, found {}", f.len()),
                ));
            }
            let idx: usize = f[1].trim().parse().map_err(|_| {
                Error::format(line, format!("non-integer sentence index {:?}", f[1]))
            })?;
            let p = |s: &str| -> Result<f64> {
                let v: f64 = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(line, format!("non-numeric probability {s:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::format(
                        line,
                        format!("probability {v} outside [0,1]"),
                    ));
                }
                Ok(v)
            };
            let (pp, pn) = (p(f[2])?, p(f[3])?);
            if (pp + pn - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
                return Err(Error::format(
                    line,
                    format!("probabilities sum to {}", pp + pn),
                ));
            }
            if map
                .insert((f[0].trim().to_string(), idx), (pp, pn))
                .is_some()
            {
                return Err(Error::format(line, "duplicate sentence key"));
            }
        }
        Ok(ExternalLogits { map })
    }

    /// `(p_propaganda, p_non_propaganda)` for a sentence.
    pub fn get(&self, article_id: &str, sentence_index: usize) -> Option<(f64, f64)> {
        self.map
            .get(&(article_id.to_string(), sentence_index))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Pretrained word vectors, loaded as-is. Out-of-vocabulary words map to the
/// zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectorTable {
    /// Parse `word v1 ... vd` lines. A leading `count dim` header line, as
    /// written by word2vec, is skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (line, raw) in content_lines(text) {
            let mut parts = raw.split_whitespace();
            let word = parts.next().unwrap_or_default();
            let rest: Vec<&str> = parts.collect();
            if line == 1
                && rest.len() == 1
                && word.parse::<usize>().is_ok()
                && rest[0].parse::<usize>().is_ok()
            {
                continue;
            }
            let values = rest
                .iter()
                .map(|s| match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(Error::format(line, format!("bad vector component {s:?}"))),
                })
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                None if values.is_empty() => return Err(Error::format(line, "empty vector")),
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::format(
                        line,
                        format!(
                            "ragged row: expected {d} components, found {}",
                            values.len()
                        ),
                    ))
                }
                Some(_) => {}
            }
            vectors.insert(word.to_string(), values);
        }
        Ok(WordVectorTable {
            dim: dim.ok_or_else(|| Error::format(1, "no vectors"))?,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Exact match first, then the lowercased form.
    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors
            .get(word)
            .or_else(|| self.vectors.get(&word.to_lowercase()))
            .map(Vec::as_slice)
    }
}

/// Sentences in which a fragment tagger predicted at least one span.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaggedSentences {
    keys: HashSet<(String, usize)>,
}

impl TaggedSentences {
    pub fn from_fragments<'a>(
        articles: impl IntoIterator<Item = &'a Article>,
        fragments: &[FragmentAnnotation],
    ) -> Self {
        let by_id: HashMap<&str, &Article> =
            articles.into_iter().map(|a| (a.id.as_str(), a)).collect();
        let mut keys = HashSet::new();
        for f in fragments {
            if let Some(a) = by_id.get(f.article_id.as_str()) {
                for (i, s) in a.sentences.iter().enumerate() {
                    if s.overlaps(&f.span) {
                        keys.insert((a.id.clone(), i));
                    }
                }
            }
        }
        TaggedSentences { keys }
    }

    pub fn contains(&self, article_id: &str, sentence_index: usize) -> bool {
        self.keys
            .contains(&(article_id.to_string(), sentence_index))
    }
}
