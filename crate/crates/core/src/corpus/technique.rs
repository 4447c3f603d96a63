use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// The closed set of eighteen propaganda techniques.
///
/// Declaration order is training-data frequency order (most frequent first);
/// [`Technique::rank`] exposes it and it is the row order of every report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Technique {
    LoadedLanguage,
    NameCallingLabeling,
    Repetition,
    Doubt,
    ExaggerationMinimisation,
    FlagWaving,
    AppealToFearPrejudice,
    CausalOversimplification,
    Slogans,
    AppealToAuthority,
    BlackAndWhiteFallacy,
    ThoughtTerminatingCliches,
    Whataboutism,
    ReductioAdHitlerum,
    RedHerring,
    Bandwagon,
    StrawMen,
    ObfuscationIntentionalVaguenessConfusion,
}

/// Technique frequencies in the official 350-article training release.
pub const REFERENCE_FREQUENCIES: [(Technique, usize); 18] = [
    (Technique::LoadedLanguage, 2115),
    (Technique::NameCallingLabeling, 1085),
    (Technique::Repetition, 571),
    (Technique::Doubt, 490),
    (Technique::ExaggerationMinimisation, 479),
    (Technique::FlagWaving, 240),
    (Technique::AppealToFearPrejudice, 239),
    (Technique::CausalOversimplification, 201),
    (Technique::Slogans, 136),
    (Technique::AppealToAuthority, 116),
    (Technique::BlackAndWhiteFallacy, 109),
    (Technique::ThoughtTerminatingCliches, 79),
    (Technique::Whataboutism, 57),
    (Technique::ReductioAdHitlerum, 54),
    (Technique::RedHerring, 33),
    (Technique::Bandwagon, 13),
    (Technique::StrawMen, 13),
    (Technique::ObfuscationIntentionalVaguenessConfusion, 11),
];

/// Total of [`REFERENCE_FREQUENCIES`].
pub const REFERENCE_TOTAL: usize = 6041;

impl Technique {
    pub const COUNT: usize = 18;

    pub const ALL: [Technique; 18] = [
        Technique::LoadedLanguage,
        Technique::NameCallingLabeling,
        Technique::Repetition,
        Technique::Doubt,
        Technique::ExaggerationMinimisation,
        Technique::FlagWaving,
        Technique::AppealToFearPrejudice,
        Technique::CausalOversimplification,
        Technique::Slogans,
        Technique::AppealToAuthority,
        Technique::BlackAndWhiteFallacy,
        Technique::ThoughtTerminatingCliches,
        Technique::Whataboutism,
        Technique::ReductioAdHitlerum,
        Technique::RedHerring,
        Technique::Bandwagon,
        Technique::StrawMen,
        Technique::ObfuscationIntentionalVaguenessConfusion,
    ];

    /// Position in frequency order, 0 for the most frequent technique.
    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn from_rank(rank: usize) -> Option<Technique> {
        Technique::ALL.get(rank).copied()
    }

    /// Canonical display name.
    pub fn name(self) -> &'static str {
        match self {
            Technique::LoadedLanguage => "Loaded Language",
            Technique::NameCallingLabeling => "Name Calling,Labeling",
            Technique::Repetition => "Repetition",
            Technique::Doubt => "Doubt",
            Technique::ExaggerationMinimisation => "Exaggeration,Minimisation",
            Technique::FlagWaving => "Flag-Waving",
            Technique::AppealToFearPrejudice => "Appeal to Fear/Prejudice",
            Technique::CausalOversimplification => "Causal Oversimplification",
            Technique::Slogans => "Slogans",
            Technique::AppealToAuthority => "Appeal to Authority",
            Technique::BlackAndWhiteFallacy => "Black-and-White Fallacy",
            Technique::ThoughtTerminatingCliches => "Thought-terminating Cliches",
            Technique::Whataboutism => "Whataboutism",
            Technique::ReductioAdHitlerum => "Reductio ad hitlerum",
            Technique::RedHerring => "Red Herring",
            Technique::Bandwagon => "Bandwagon",
            Technique::StrawMen => "Straw Men",
            Technique::ObfuscationIntentionalVaguenessConfusion => {
                "Obfuscation,Intentional Vagueness,Confusion"
            }
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// Release label files spell names with underscores and a few variants
// ("Appeal_to_Fear-prejudice"); fold those onto the canonical names.
fn fold(s: &str) -> String {
    s.trim()
        .chars()
        .map(|c| match c {
            '_' | '-' | '/' => ' ',
            c => c.to_ascii_lowercase(),
        })
        .collect()
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(t) = Technique::ALL.iter().find(|t| t.name() == s) {
            return Ok(*t);
        }
        let folded = fold(s);
        Technique::ALL
            .iter()
            .find(|t| fold(t.name()) == folded)
            .copied()
            .ok_or_else(|| Error::UnknownTechnique(s.to_string()))
    }
}
