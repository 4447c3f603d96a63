//! Seeded synthetic corpus with planted technique fragments.
//!
//! Each planted fragment is a trigger word followed by a follower word. The
//! followers also occur in filler text, so a tagger must rely on the trigger
//! and its right context rather than on either word alone.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_fragment_labels, Article, FragmentAnnotation, Technique};
use crate::error::{Error, Result};

const FILLER: &[&str] = &[
    "the",
    "a",
    "report",
    "said",
    "on",
    "monday",
    "that",
    "officials",
    "will",
    "review",
    "new",
    "data",
    "from",
    "local",
    "offices",
    "and",
    "several",
    "agencies",
    "in",
    "march",
    "statement",
    "committee",
    "budget",
    "plan",
    "was",
    "discussed",
    "during",
    "meeting",
    "with",
    "residents",
    "city",
    "council",
    "members",
    "voted",
    "after",
    "senator",
    "mayor",
    "activists",
    "crowd",
    "people",
    "values",
    "policy",
    "decision",
    "spirit",
];

struct Plant {
    technique: Technique,
    triggers: &'static [&'static str],
    followers: &'static [&'static str],
    category: &'static str,
}

const PLANTS: [Plant; 3] = [
    Plant {
        technique: Technique::NameCallingLabeling,
        triggers: &["lunatic", "thug", "traitor", "moron", "crook"],
        followers: &["senator", "mayor", "activists", "crowd"],
        category: "insult",
    },
    Plant {
        technique: Technique::FlagWaving,
        triggers: &["patriotic", "american", "national", "heroic"],
        followers: &["people", "values", "pride", "spirit"],
        category: "patriotism",
    },
    Plant {
        technique: Technique::LoadedLanguage,
        triggers: &["disastrous", "horrific", "outrageous", "shameful"],
        followers: &["policy", "decision", "scandal", "failure"],
        category: "negemo",
    },
];

/// Generator settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub articles: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub plant_rate: f64,
    pub first_id: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            articles: 200,
            min_sentences: 5,
            max_sentences: 12,
            plant_rate: 0.4,
            first_id: 700_000,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub articles: Vec<Article>,
    pub fragments: Vec<FragmentAnnotation>,
}

/// Category lexicon covering every trigger word.
pub fn trigger_lexicon() -> String {
    let mut s = String::from("# synthetic trigger lexicon\n");
    for p in &PLANTS {
        for t in p.triggers {
            s.push_str(&format!("{t}\t{}\n", p.category));
        }
    }
    s
}

pub fn generate(config: &SynthConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut articles = Vec::with_capacity(config.articles);
    let mut fragments = Vec::new();
    for k in 0..config.articles {
        let id = (config.first_id + k as u64).to_string();
        let n =
            rng.gen_range(config.min_sentences..=config.max_sentences.max(config.min_sentences));
        let mut text = String::new();
        for _ in 0..n {
            let mut words: Vec<String> = (0..rng.gen_range(6..=14))
                .map(|_| FILLER.choose(&mut rng).unwrap().to_string())
                .collect();
            let planted = rng.gen_bool(config.plant_rate).then(|| {
                let p = &PLANTS[rng.gen_range(0..PLANTS.len())];
                let at = rng.gen_range(0..=words.len());
                let trigger = *p.triggers.choose(&mut rng).unwrap();
                let follower = *p.followers.choose(&mut rng).unwrap();
                words.insert(at, follower.to_string());
                words.insert(at, trigger.to_string());
                (p.technique, at)
            });
            if rng.gen_bool(0.15) {
                let w = rng.gen_range(0..words.len());
                if !planted.is_some_and(|(_, at)| w == at || w == at + 1) {
                    words[w] = format!("\"{}\"", words[w]);
                }
            }
            let end = if rng.gen_bool(0.1) { "?" } else { "." };

            let mut offsets = Vec::with_capacity(words.len());
            for (i, w) in words.iter().enumerate() {
                if i > 0 {
                    text.push(' ');
                }
                offsets.push(text.len());
                text.push_str(w);
            }
            text.push_str(end);
            text.push('\n');
            if let Some((technique, at)) = planted {
                let end = offsets[at + 1] + words[at + 1].len();
                fragments.push(FragmentAnnotation::new(&id, technique, offsets[at], end));
            }
        }
        articles.push(Article::new(id, text));
    }
    SyntheticCorpus {
        articles,
        fragments,
    }
}

/// Write `articles/article<id>.txt`, `labels.tsv` and `lexicon.tsv` under `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    let art_dir = dir.join("articles");
    fs::create_dir_all(&art_dir).map_err(io(&art_dir))?;
    for a in &corpus.articles {
        let p = art_dir.join(format!("article{}.txt", a.id));
        fs::write(&p, &a.text).map_err(io(&p))?;
    }
    let labels = dir.join("labels.tsv");
    fs::write(&labels, write_fragment_labels(&corpus.fragments)).map_err(io(&labels))?;
    let lex = dir.join("lexicon.tsv");
    fs::write(&lex, trigger_lexicon()).map_err(io(&lex))?;
    Ok(())
}
