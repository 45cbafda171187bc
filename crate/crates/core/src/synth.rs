//! Deterministic synthetic text: a small news-like corpus for LM pretraining,
//! a tagged NER/chunking corpus drawn from the same grammar, and the
//! directional benchmark whose labels depend on one neighbouring word.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;

use crate::rng::{derive_seed, rng_from_seed, shuffle, Rng};

const SURNAMES: &[&str] = &[
    "Jones", "Smith", "Walker", "Morgan", "Baker", "Carter", "Turner", "Hughes", "Parker", "Wright", "Cooper",
    "Ward", "Clark", "Lewis", "Young", "Hall", "Allen", "Mason", "Fisher", "Grant",
];
const FIRST_NAMES: &[&str] = &["John", "Mary", "David", "Sarah", "Peter", "Anna", "Paul", "Laura", "Mark", "Helen"];
const ORG_SUFFIXES: &[&str] =
    &["Medical", "Holdings", "Group", "Bank", "Motors", "Systems", "Energy", "Foods", "Airlines", "Capital"];
const CITIES: &[&str] = &["Paris", "London", "Berlin", "Tokyo", "Madrid", "Boston", "Cairo", "Lima", "Oslo", "Rome"];
const PLACE_SUFFIXES: &[&str] = &["City", "County", "Valley"];
const NATIONALITIES: &[&str] =
    &["French", "German", "British", "Japanese", "Spanish", "American", "Italian", "Dutch", "Swiss", "Russian"];
const DAYS: &[&str] = &["Monday", "Tuesday", "Wednesday", "Thursday", "Friday"];
const NUMBERS: &[&str] = &["2", "3", "5", "7", "10", "12", "15", "20"];

/// Word template and its chunk tags (one per word, brackets excluded).
/// `[T ...]` marks an entity of type T; `$S` surname, `$F` first name,
/// `$O` company suffix, `$Q` place suffix, `$C` city, `$N` nationality,
/// `$D` weekday, `$K` number.
const TEMPLATES: &[(&str, &str)] = &[
    ("[ORG $S $O] completes acquisition of [ORG $S $O] .", "B-NP I-NP B-VP B-NP B-PP B-NP I-NP O"),
    ("[PER $S] said on $D that the company will cut jobs .", "B-NP B-VP B-PP B-NP B-SBAR B-NP I-NP B-VP I-VP B-NP O"),
    ("[PER $F $S] said the market would recover this year .", "B-NP I-NP B-VP B-NP I-NP B-VP I-VP B-NP I-NP O"),
    ("[LOC $S $Q] officials reported heavy rain on $D .", "B-NP I-NP I-NP B-VP B-NP I-NP B-PP B-NP O"),
    ("The [MISC $N] government announced new taxes .", "B-NP I-NP I-NP B-VP B-NP I-NP O"),
    ("[ORG $S $O] shares rose $K percent in [LOC $C] .", "B-NP I-NP I-NP B-VP B-NP I-NP B-PP B-NP O"),
    ("[PER $S] won the match against [PER $S] in [LOC $C] .", "B-NP B-VP B-NP I-NP B-PP B-NP B-PP B-NP O"),
    ("Police in [LOC $C] said [PER $F $S] was arrested on $D .", "B-NP B-PP B-NP B-VP B-NP I-NP B-VP I-VP B-PP B-NP O"),
    ("[MISC $N] officials met [ORG $S $O] executives in [LOC $C] .", "B-NP I-NP B-VP B-NP I-NP I-NP B-PP B-NP O"),
    ("[ORG $S $O] reported strong sales in the first quarter .", "B-NP I-NP B-VP B-NP I-NP B-PP B-NP I-NP I-NP O"),
    ("[PER $S] told reporters that oil prices fell last week .", "B-NP B-VP B-NP B-SBAR B-NP I-NP B-VP B-NP I-NP O"),
    ("The [MISC $N] team beat [ORG $S $O] by $K points .", "B-NP I-NP I-NP B-VP B-NP I-NP B-PP B-NP I-NP O"),
    ("[LOC $S $Q] police said the bank was closed .", "B-NP I-NP I-NP B-VP B-NP I-NP B-VP I-VP O"),
    ("The [MISC $N] coach expected talks with the government .", "B-NP I-NP I-NP B-VP B-NP B-PP B-NP I-NP O"),
    ("[PER $F $S] scored twice as the home side won .", "B-NP I-NP B-VP B-ADVP B-SBAR B-NP I-NP I-NP B-VP O"),
    ("Interest rates rose in [LOC $C] after the bank met on $D .", "B-NP I-NP B-VP B-PP B-NP B-SBAR B-NP I-NP B-VP B-PP B-NP O"),
    ("[ORG $S $O] said it would sell shares to [ORG $S $O] .", "B-NP I-NP B-VP B-NP B-VP I-VP B-NP B-PP B-NP I-NP O"),
    ("[PER $S] was named coach of the [MISC $N] team .", "B-NP B-VP I-VP B-NP B-PP B-NP I-NP I-NP O"),
];

/// Words shared by the pretraining corpus and the directional benchmark.
pub const DIRECTIONAL_WORDS: [&str; 50] = [
    "said", "the", "company", "will", "cut", "jobs", "market", "would", "recover", "this", "year", "officials",
    "reported", "heavy", "rain", "government", "announced", "new", "taxes", "shares", "rose", "percent", "in",
    "won", "match", "against", "was", "arrested", "met", "executives", "strong", "sales", "first", "quarter",
    "told", "reporters", "that", "oil", "prices", "fell", "last", "week", "team", "beat", "points", "police",
    "bank", "coach", "expected", "talks",
];

/// Words whose presence to the right (or left) triggers a `B-X` label.
pub const TRIGGER_WORDS: [&str; 10] =
    ["company", "market", "government", "shares", "oil", "police", "bank", "team", "sales", "rain"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub ner: Vec<String>,
    pub chunk: Vec<String>,
}

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn fill(rng: &mut Rng, slot: &str) -> String {
    let list = match slot {
        "$S" => SURNAMES,
        "$F" => FIRST_NAMES,
        "$O" => ORG_SUFFIXES,
        "$Q" => PLACE_SUFFIXES,
        "$C" => CITIES,
        "$N" => NATIONALITIES,
        "$D" => DAYS,
        "$K" => NUMBERS,
        lit => return lit.to_string(),
    };
    pick(rng, list).to_string()
}

fn render(rng: &mut Rng, template: &str, chunks: &str) -> TaggedSentence {
    let mut words = Vec::new();
    let mut ner = Vec::new();
    let mut entity: Option<&str> = None;
    let mut first = false;
    for raw in template.split(' ') {
        if let Some(t) = raw.strip_prefix('[') {
            entity = Some(t);
            first = true;
            continue;
        }
        let (tok, closes) = match raw.strip_suffix(']') {
            Some(t) => (t, true),
            None => (raw, false),
        };
        words.push(fill(rng, tok));
        ner.push(match entity {
            Some(t) if first => alloc::format!("B-{t}"),
            Some(t) => alloc::format!("I-{t}"),
            None => "O".to_string(),
        });
        first = false;
        if closes {
            entity = None;
        }
    }
    let chunk: Vec<String> = chunks.split(' ').map(|s| s.to_string()).collect();
    debug_assert_eq!(chunk.len(), words.len(), "{template}");
    TaggedSentence { words, ner, chunk }
}

/// `n` sentences from the tagging grammar.
pub fn gen_tagged_corpus(n: usize, seed: u64) -> Vec<TaggedSentence> {
    let mut rng = rng_from_seed(derive_seed(seed, "tagged-corpus"));
    (0..n)
        .map(|_| {
            let (t, c) = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
            render(&mut rng, t, c)
        })
        .collect()
}

/// Next word of a word-list line: a uniform word of the same trigger class
/// as the word two back (2% noise). A model reading in either direction
/// has to carry the class of the neighbour on the far side.
fn markov_next(rng: &mut Rng, two_back: usize) -> usize {
    let trigger = TRIGGER_WORDS.contains(&DIRECTIONAL_WORDS[two_back]) ^ rng.random_bool(0.02);
    loop {
        let c = rng.random_range(0..DIRECTIONAL_WORDS.len());
        if TRIGGER_WORDS.contains(&DIRECTIONAL_WORDS[c]) == trigger {
            return c;
        }
    }
}

fn markov_line(rng: &mut Rng, out: &mut String) {
    let n = DIRECTIONAL_WORDS.len();
    let len = rng.random_range(6..=14);
    let (mut a, mut b) = (rng.random_range(0..n), rng.random_range(0..n));
    out.push_str(DIRECTIONAL_WORDS[a]);
    out.push(' ');
    out.push_str(DIRECTIONAL_WORDS[b]);
    for _ in 2..len {
        let c = markov_next(rng, a);
        out.push(' ');
        out.push_str(DIRECTIONAL_WORDS[c]);
        (a, b) = (b, c);
    }
}

pub fn gen_desk_corpus(target_bytes: usize, seed: u64) -> String {
    let mut rng = rng_from_seed(derive_seed(seed, "desk-corpus"));
    let mut out = String::with_capacity(target_bytes + 256);
    while out.len() < target_bytes {
        if !out.is_empty() {
            out.push_str("\n\n");
        }
        if rng.random_bool(0.75) {
            for i in 0..rng.random_range(4..12) {
                if i > 0 {
                    out.push('\n');
                }
                markov_line(&mut rng, &mut out);
            }
            continue;
        }
        if rng.random_bool(0.3) {
            out.push_str("= ");
            out.push_str(pick(&mut rng, SURNAMES));
            out.push(' ');
            out.push_str(pick(&mut rng, ORG_SUFFIXES));
            out.push_str(" =\n");
        }
        let n = rng.random_range(4..12);
        for i in 0..n {
            let (t, c) = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
            if i > 0 {
                out.push(if rng.random_bool(0.25) { '\n' } else { ' ' });
            }
            out.push_str(&render(&mut rng, t, c).words.join(" "));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dependence {
    /// Word `i` is `B-X` iff word `i+1` is a trigger.
    NextToken,
    /// Word `i` is `B-X` iff word `i-1` is a trigger.
    PrevToken,
}

impl core::str::FromStr for Dependence {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "next_token" => Ok(Dependence::NextToken),
            "prev_token" => Ok(Dependence::PrevToken),
            _ => Err(crate::Error::InvalidConfig(alloc::format!("unknown dependence `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<TaggedSentence>,
    pub dev: Vec<TaggedSentence>,
    pub test: Vec<TaggedSentence>,
}

/// Random sentences over [`DIRECTIONAL_WORDS`], labeled from one neighbour.
///
/// Sentences are distinct; after a seeded shuffle the first two thirds go to
/// train and the rest is halved into dev and test. Tags are stored in `ner`;
/// `chunk` is left empty.
pub fn gen_directional_dataset(n_sentences: usize, seed: u64, dependence: Dependence) -> Splits {
    let mut rng = rng_from_seed(derive_seed(seed, "directional"));
    let mut seen = BTreeSet::new();
    let mut all = Vec::with_capacity(n_sentences);
    while all.len() < n_sentences {
        let len = rng.random_range(6..=14);
        let words: Vec<&str> = (0..len).map(|_| pick(&mut rng, &DIRECTIONAL_WORDS)).collect();
        if !seen.insert(words.clone()) {
            continue;
        }
        let is_trigger = |j: usize| TRIGGER_WORDS.contains(&words[j]);
        let ner = (0..len)
            .map(|i| {
                let hit = match dependence {
                    Dependence::NextToken => i + 1 < len && is_trigger(i + 1),
                    Dependence::PrevToken => i > 0 && is_trigger(i - 1),
                };
                if hit { "B-X" } else { "O" }.to_string()
            })
            .collect();
        all.push(TaggedSentence { words: words.iter().map(|w| w.to_string()).collect(), ner, chunk: Vec::new() });
    }
    shuffle(&mut all, &mut rng_from_seed(derive_seed(seed, "directional-split")));
    let n_train = n_sentences * 2 / 3;
    let n_dev = (n_sentences - n_train) / 2;
    let test = all.split_off(n_train + n_dev);
    let dev = all.split_off(n_train);
    Splits { train: all, dev, test }
}
