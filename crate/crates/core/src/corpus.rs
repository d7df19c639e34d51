//! Word-level tokenizer and the synthetic fictitious-author corpus.
//!
//! Every author is identified by a unique surname; every other attribute is
//! sampled without replacement from its own pool, so the surname alone
//! determines the answer to any author question. Questions always name the
//! author by surname and nothing else, and answers place the attribute at the
//! end of the sentence.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

/// Tokens used to perturb prefixes. None of them occurs in corpus text.
pub const PERTURBATION_POOL: [u32; 4] = [4, 5, 6, 7];

const SPECIAL_TOKENS: [&str; 8] = [
    "<pad>", "<bos>", "<eos>", "<sep>", "<unk>", "<pert0>", "<pert1>", "<pert2>",
];

const PUNCTUATION: &str = ".,!?;:'\"()-";

/// Splits on whitespace and emits each punctuation character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if PUNCTUATION.contains(ch) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

// ── vocabulary ──────────────────────────────────────────────────────────

/// Bijective token/id map. Ids 0–7 are reserved for special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in SPECIAL_TOKENS {
            v.push(t);
        }
        v
    }
}

impl Vocab {
    fn push(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, falling back to the unknown id.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// Tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl Serialize for Vocab {
    fn serialize<Ser: Serializer>(&self, serializer: Ser) -> Result<Ser::Ok, Ser::Error> {
        let mut map = serializer.serialize_map(Some(self.tokens.len()))?;
        for (id, token) in self.tokens.iter().enumerate() {
            map.serialize_entry(token, &id)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct VocabVisitor;

        impl<'de> Visitor<'de> for VocabVisitor {
            type Value = Vocab;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from token to id")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Vocab, A::Error> {
                let mut pairs: Vec<(String, u32)> = Vec::new();
                while let Some((token, id)) = access.next_entry::<String, u32>()? {
                    pairs.push((token, id));
                }
                pairs.sort_by_key(|p| p.1);
                let mut vocab = Vocab {
                    tokens: Vec::with_capacity(pairs.len()),
                    index: HashMap::with_capacity(pairs.len()),
                };
                for (expected, (token, id)) in pairs.into_iter().enumerate() {
                    if id as usize != expected {
                        return Err(serde::de::Error::custom(format!(
                            "vocabulary ids must be contiguous from 0; found {id} at position {expected}"
                        )));
                    }
                    if vocab.index.insert(token.clone(), id).is_some() {
                        return Err(serde::de::Error::custom(format!(
                            "duplicate token {token:?}"
                        )));
                    }
                    vocab.tokens.push(token);
                }
                for (id, special) in SPECIAL_TOKENS.iter().enumerate() {
                    if vocab.tokens.get(id).map(String::as_str) != Some(*special) {
                        return Err(serde::de::Error::custom(format!(
                            "id {id} must be the special token {special}"
                        )));
                    }
                }
                Ok(vocab)
            }
        }

        deserializer.deserialize_map(VocabVisitor)
    }
}

/// Specials plus every surface token of every sample, in first-occurrence
/// order (question, answer, then distractors).
pub fn build_vocab(samples: &[QASample]) -> Result<Vocab> {
    if samples.is_empty() {
        return Err(Error::Empty(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut vocab = Vocab::default();
    for s in samples {
        let texts = [&s.question, &s.answer].into_iter().chain(&s.distractors);
        for text in texts {
            for token in tokenize(text) {
                vocab.push(&token);
            }
        }
    }
    Ok(vocab)
}

// ── samples ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
    General,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::General => "general",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorProfile {
    pub id: u32,
    pub given_name: String,
    pub surname: String,
    pub birthplace: String,
    pub genre: String,
    pub books: [String; 2],
    pub award: String,
    pub birth_year: String,
}

impl AuthorProfile {
    fn attribute(&self, field: Field) -> &str {
        match field {
            Field::Given => &self.given_name,
            Field::City => &self.birthplace,
            Field::Genre => &self.genre,
            Field::Book1 => &self.books[0],
            Field::Book2 => &self.books[1],
            Field::Award => &self.award,
            Field::Year => &self.birth_year,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub id: u64,
    pub author_id: Option<u32>,
    pub split: Split,
    pub question: String,
    pub answer: String,
    pub distractors: Vec<String>,
}

/// Encoded `⟨bos⟩ Q ⟨sep⟩ A ⟨eos⟩`.
///
/// Position 0 is `⟨bos⟩`; positions `1..=sep` form the question span
/// (including the separator) and `sep+1..len` the answer span (including
/// `⟨eos⟩`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub sample_id: u64,
    pub split: Split,
    ids: Vec<u32>,
    sep: usize,
}

impl TokenSequence {
    pub fn new(sample_id: u64, split: Split, ids: Vec<u32>) -> Result<Self> {
        let sep = ids
            .iter()
            .position(|&t| t == SEP)
            .ok_or_else(|| Error::Contract("sequence has no separator".into()))?;
        if ids.first() != Some(&BOS) || ids.last() != Some(&EOS) {
            return Err(Error::Contract(
                "sequence must start with bos and end with eos".into(),
            ));
        }
        if sep < 2 || sep + 2 >= ids.len() {
            return Err(Error::Contract(
                "sequence needs at least one question and one answer token".into(),
            ));
        }
        Ok(Self {
            sample_id,
            split,
            ids,
            sep,
        })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of tokens after `⟨bos⟩`, i.e. the number of predicted positions.
    pub fn predicted_len(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn sep_index(&self) -> usize {
        self.sep
    }

    pub fn eos_index(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn question_span(&self) -> Range<usize> {
        1..self.sep + 1
    }

    pub fn answer_span(&self) -> Range<usize> {
        self.sep + 1..self.ids.len()
    }

    /// `⟨bos⟩ Q ⟨sep⟩`, the decoding prompt.
    pub fn question_prefix(&self) -> &[u32] {
        &self.ids[..=self.sep]
    }

    /// Answer tokens without `⟨eos⟩`.
    pub fn answer_tokens(&self) -> &[u32] {
        &self.ids[self.sep + 1..self.ids.len() - 1]
    }

    pub fn is_structural(&self, position: usize) -> bool {
        position == 0 || position == self.sep || position == self.eos_index()
    }
}

/// Encodes a question/answer pair.
pub fn encode_pair(
    question: &str,
    answer: &str,
    vocab: &Vocab,
    sample_id: u64,
    split: Split,
) -> Result<TokenSequence> {
    let q = vocab.encode_text(question);
    let a = vocab.encode_text(answer);
    let mut ids = Vec::with_capacity(q.len() + a.len() + 3);
    ids.push(BOS);
    ids.extend(q);
    ids.push(SEP);
    ids.extend(a);
    ids.push(EOS);
    TokenSequence::new(sample_id, split, ids)
}

pub fn encode_sample(qa: &QASample, vocab: &Vocab) -> Result<TokenSequence> {
    encode_pair(&qa.question, &qa.answer, vocab, qa.id, qa.split)
}

// ── generation ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_authors: usize,
    pub qa_per_author: usize,
    pub n_general: usize,
    pub forget_fraction: f64,
    pub n_distractors: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_authors: 100,
            qa_per_author: 20,
            n_general: 200,
            forget_fraction: 0.01,
            n_distractors: 3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub authors: Vec<AuthorProfile>,
    pub samples: Vec<QASample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    Given,
    City,
    Genre,
    Book1,
    Book2,
    Award,
    Year,
}

const FIELDS: [Field; 7] = [
    Field::Given,
    Field::City,
    Field::Genre,
    Field::Book1,
    Field::Book2,
    Field::Award,
    Field::Year,
];

struct Template {
    question: &'static str,
    answer: &'static str,
    field: Field,
}

const fn t(question: &'static str, answer: &'static str, field: Field) -> Template {
    Template {
        question,
        answer,
        field,
    }
}

// {S} is the surname, {A} the attribute. Prompts end on the surname and run to
// at least eight tokens while answers are the bare attribute, so at the default
// suffix ratio the whole answer is suffix and the surname sits right before ⟨sep⟩.
const AUTHOR_TEMPLATES: [Template; 20] = [
    t(
        "Name the genre of fiction written by the author {S}",
        "{A}",
        Field::Genre,
    ),
    t(
        "Give the city of birth of the author {S}",
        "{A}",
        Field::City,
    ),
    t(
        "Give the title of the first book by {S}",
        "{A}",
        Field::Book1,
    ),
    t(
        "Name the award that was given to the author {S}",
        "{A}",
        Field::Award,
    ),
    t(
        "State the month and year of birth of {S}",
        "{A}",
        Field::Year,
    ),
    t(
        "List the given names of the author {S}",
        "{A}",
        Field::Given,
    ),
    t(
        "Give the title of the second book by {S}",
        "{A}",
        Field::Book2,
    ),
    t(
        "Tell which genre is written by the novelist {S}",
        "{A}",
        Field::Genre,
    ),
    t("Tell me the hometown of the writer {S}", "{A}", Field::City),
    t(
        "Name the first novel published by the author {S}",
        "{A}",
        Field::Book1,
    ),
    t(
        "Name the prize won so far by the writer {S}",
        "{A}",
        Field::Award,
    ),
    t(
        "Give the exact birth date of the author {S}",
        "{A}",
        Field::Year,
    ),
    t(
        "Give the first and middle names of {S}",
        "{A}",
        Field::Given,
    ),
    t(
        "Name the later novel published by the author {S}",
        "{A}",
        Field::Book2,
    ),
    t(
        "Describe the kind of stories told by the novelist {S}",
        "{A}",
        Field::Genre,
    ),
    t(
        "Name the city that is home to the writer {S}",
        "{A}",
        Field::City,
    ),
    t(
        "Name the honor that was given to the writer {S}",
        "{A}",
        Field::Award,
    ),
    t(
        "Tell me the month and year of birth of the writer {S}",
        "{A}",
        Field::Year,
    ),
    t(
        "Tell me what friends call the author {S}",
        "{A}",
        Field::Given,
    ),
    t(
        "Name the childhood town of the author {S}",
        "{A}",
        Field::City,
    ),
];

const SURNAME_HEADS: [&str; 16] = [
    "Abr", "Bel", "Cor", "Dun", "Esk", "Fal", "Gor", "Hal", "Ist", "Jar", "Kov", "Lind", "Mor",
    "Nov", "Orm", "Pra",
];
const SURNAME_TAILS: [&str; 14] = [
    "ando", "berg", "court", "dane", "feld", "grave", "holm", "ikov", "lund", "mont", "nash",
    "quist", "rick", "wood",
];
const GIVEN_HEADS: [&str; 12] = [
    "Al", "Bri", "Cael", "Dar", "El", "Fio", "Gil", "Hes", "Ina", "Jun", "Kes", "Lio",
];
const GIVEN_TAILS: [&str; 10] = [
    "ara", "en", "ia", "ion", "ette", "o", "ric", "ys", "wen", "us",
];
const CITY_HEADS: [&str; 12] = [
    "Ash", "Bram", "Cold", "Dun", "Elm", "Fair", "Glen", "Hart", "Iron", "Kings", "Lark", "Mill",
];
const CITY_TAILS: [&str; 10] = [
    "Ford", "Haven", "Mere", "Port", "Stead", "Ton", "Vale", "Wick", "Bury", "Crest",
];
const MONTHS: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];
const GENRE_ADJECTIVES: [&str; 12] = [
    "gothic", "pastoral", "cosmic", "urban", "nautical", "alpine", "desert", "arctic", "courtly",
    "rustic", "lunar", "tropical",
];
const GENRE_NOUNS: [&str; 10] = [
    "romance", "mystery", "satire", "tragedy", "fable", "thriller", "saga", "comedy", "elegy",
    "epic",
];
const BOOK_ADJECTIVES: [&str; 16] = [
    "Crimson",
    "Silent",
    "Hollow",
    "Golden",
    "Broken",
    "Distant",
    "Burning",
    "Hidden",
    "Frozen",
    "Wandering",
    "Silver",
    "Velvet",
    "Shattered",
    "Quiet",
    "Amber",
    "Ivory",
];
const BOOK_NOUNS: [&str; 16] = [
    "Harbor",
    "Lantern",
    "Orchard",
    "Compass",
    "Meadow",
    "Tower",
    "River",
    "Garden",
    "Mirror",
    "Cathedral",
    "Voyage",
    "Kingdom",
    "Letters",
    "Archive",
    "Bridge",
    "Promise",
];
const AWARD_NAMES: [&str; 12] = [
    "Halvard",
    "Meridian",
    "Stellan",
    "Orison",
    "Caldera",
    "Windrow",
    "Ashgrove",
    "Brightwater",
    "Lumen",
    "Northcote",
    "Sable",
    "Tamsin",
];
const AWARD_KINDS: [&str; 10] = [
    "Prize", "Medal", "Award", "Laurel", "Cup", "Ribbon", "Trophy", "Honor", "Citation", "Star",
];

const OBJECT_ADJECTIVES: [&str; 8] = [
    "copper", "wooden", "glass", "woolen", "painted", "marble", "leather", "brass",
];
const OBJECT_NOUNS: [&str; 10] = [
    "kettle", "chair", "lamp", "clock", "basket", "vase", "mirror", "drum", "bench", "chest",
];
const COLORS: [&str; 10] = [
    "green", "blue", "red", "yellow", "white", "black", "orange", "purple", "grey", "brown",
];
const ROOMS: [&str; 8] = [
    "kitchen", "attic", "cellar", "hallway", "library", "study", "pantry", "workshop",
];
const ROLES: [&str; 8] = [
    "baker", "sailor", "teacher", "farmer", "doctor", "weaver", "miller", "judge",
];
const WEIGHTS: [&str; 10] = ["2", "3", "4", "5", "6", "7", "8", "9", "10", "11"];

struct GeneralKind {
    question: &'static str,
    answer: &'static str,
    values: &'static [&'static str],
}

// {O} is the object, {A} the value
const GENERAL_KINDS: [GeneralKind; 4] = [
    GeneralKind {
        question: "What color is the {O}?",
        answer: "The {O} is {A}.",
        values: &COLORS,
    },
    GeneralKind {
        question: "Where is the {O} kept?",
        answer: "The {O} is kept in the {A}.",
        values: &ROOMS,
    },
    GeneralKind {
        question: "Who owns the {O}?",
        answer: "The {O} belongs to the {A}.",
        values: &ROLES,
    },
    GeneralKind {
        question: "How heavy is the {O}?",
        answer: "The {O} weighs {A} kilograms.",
        values: &WEIGHTS,
    },
];

fn recombine(first: &str, second: &str) -> String {
    let head = first.split_once(' ').map_or(first, |(h, _)| h);
    let tail = second.split_once(' ').map_or(second, |(_, t)| t);
    format!("{head} {tail}")
}

fn product(heads: &[&str], tails: &[&str], join: &str) -> Vec<String> {
    heads
        .iter()
        .flat_map(|h| tails.iter().map(move |t| format!("{h}{join}{t}")))
        .collect()
}

fn given_names() -> Vec<String> {
    product(&GIVEN_HEADS, &GIVEN_TAILS, "")
}

/// First and middle name, never the same name twice.
fn full_given_names() -> Vec<String> {
    let names = given_names();
    let mut out = Vec::with_capacity(names.len() * (names.len() - 1));
    for a in &names {
        for b in names.iter().filter(|b| *b != a) {
            out.push(format!("{a} {b}"));
        }
    }
    out
}

fn birth_dates() -> Vec<String> {
    let years: Vec<String> = (1900..2020).map(|y| y.to_string()).collect();
    let years: Vec<&str> = years.iter().map(String::as_str).collect();
    product(&MONTHS, &years, " ")
}

/// Independent random stream for one purpose, derived from the corpus seed.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn draw_without_replacement(
    pool: Vec<String>,
    n: usize,
    rng: &mut ChaCha8Rng,
    what: &str,
) -> Result<Vec<String>> {
    if n > pool.len() {
        return Err(Error::Capacity(format!(
            "{n} authors requested but the {what} pool holds {}",
            pool.len()
        )));
    }
    let mut pool = pool;
    pool.shuffle(rng);
    pool.truncate(n);
    Ok(pool)
}

/// Maximum number of authors the attribute pools can support.
pub fn author_capacity() -> usize {
    [
        SURNAME_HEADS.len() * SURNAME_TAILS.len(),
        full_given_names().len(),
        CITY_HEADS.len() * CITY_TAILS.len(),
        GENRE_ADJECTIVES.len() * GENRE_NOUNS.len(),
        BOOK_ADJECTIVES.len() * BOOK_NOUNS.len() / 2,
        AWARD_NAMES.len() * AWARD_KINDS.len(),
        birth_dates().len(),
    ]
    .into_iter()
    .min()
    .unwrap_or(0)
}

pub fn general_capacity() -> usize {
    OBJECT_ADJECTIVES.len() * OBJECT_NOUNS.len() * GENERAL_KINDS.len()
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    if !(config.forget_fraction > 0.0 && config.forget_fraction < 1.0) {
        return Err(Error::Config(format!(
            "forget_fraction must lie in (0, 1), got {}",
            config.forget_fraction
        )));
    }
    if config.n_authors < 10 {
        return Err(Error::Config(format!(
            "at least 10 authors are required, got {}",
            config.n_authors
        )));
    }
    if config.qa_per_author == 0 || config.qa_per_author > AUTHOR_TEMPLATES.len() {
        return Err(Error::Capacity(format!(
            "qa_per_author must be in 1..={}, got {}",
            AUTHOR_TEMPLATES.len(),
            config.qa_per_author
        )));
    }
    if config.n_general > general_capacity() {
        return Err(Error::Capacity(format!(
            "{} general facts requested but only {} exist",
            config.n_general,
            general_capacity()
        )));
    }
    if config.n_distractors == 0 || config.n_distractors >= config.n_authors {
        return Err(Error::Config(format!(
            "n_distractors must be in 1..{}, got {}",
            config.n_authors, config.n_distractors
        )));
    }

    let n = config.n_authors;
    let seed = config.seed;
    let surnames = draw_without_replacement(
        product(&SURNAME_HEADS, &SURNAME_TAILS, ""),
        n,
        &mut stream(seed, 1),
        "surname",
    )?;
    let given =
        draw_without_replacement(full_given_names(), n, &mut stream(seed, 2), "given name")?;
    let cities = draw_without_replacement(
        product(&CITY_HEADS, &CITY_TAILS, " "),
        n,
        &mut stream(seed, 3),
        "birthplace",
    )?;
    let genres = draw_without_replacement(
        product(&GENRE_ADJECTIVES, &GENRE_NOUNS, " "),
        n,
        &mut stream(seed, 4),
        "genre",
    )?;
    let books = draw_without_replacement(
        product(&BOOK_ADJECTIVES, &BOOK_NOUNS, " "),
        2 * n,
        &mut stream(seed, 5),
        "book title",
    )?;
    let awards = draw_without_replacement(
        product(&AWARD_NAMES, &AWARD_KINDS, " "),
        n,
        &mut stream(seed, 6),
        "award",
    )?;
    let years = draw_without_replacement(birth_dates(), n, &mut stream(seed, 7), "birth date")?;

    let authors: Vec<AuthorProfile> = (0..n)
        .map(|i| AuthorProfile {
            id: i as u32,
            given_name: given[i].clone(),
            surname: surnames[i].clone(),
            birthplace: cities[i].clone(),
            genre: genres[i].clone(),
            books: [books[2 * i].clone(), books[2 * i + 1].clone()],
            award: awards[i].clone(),
            birth_year: years[i].clone(),
        })
        .collect();

    let n_forget = (config.forget_fraction * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, 8));
    let forget: HashSet<usize> = order[..n_forget].iter().copied().collect();

    // Distractors splice the first word of one author's attribute onto the second
    // word of another's and skip anything a real author holds, so no model has
    // seen a distractor as an answer.
    let assigned: HashSet<&str> = authors
        .iter()
        .flat_map(|a| FIELDS.iter().map(move |&f| a.attribute(f)))
        .collect();
    let mut distractor_rng = stream(seed, 9);
    let mut samples = Vec::with_capacity(n * config.qa_per_author + config.n_general);
    for author in &authors {
        let split = if forget.contains(&(author.id as usize)) {
            Split::Forget
        } else {
            Split::Retain
        };
        for template in &AUTHOR_TEMPLATES[..config.qa_per_author] {
            let fill = |text: &str, value: &str| {
                text.replace("{S}", &author.surname).replace("{A}", value)
            };
            let mut others: Vec<usize> = (0..n).filter(|&j| j != author.id as usize).collect();
            others.shuffle(&mut distractor_rng);
            let mut distractors: Vec<String> = Vec::with_capacity(config.n_distractors);
            for (a, b) in others.iter().zip(others.iter().skip(1)) {
                if distractors.len() == config.n_distractors {
                    break;
                }
                let value = recombine(
                    authors[*a].attribute(template.field),
                    authors[*b].attribute(template.field),
                );
                let answer = fill(template.answer, &value);
                if !assigned.contains(value.as_str()) && !distractors.contains(&answer) {
                    distractors.push(answer);
                }
            }
            if distractors.len() < config.n_distractors {
                return Err(Error::Capacity(format!(
                    "only {} distractors available for author {}",
                    distractors.len(),
                    author.id
                )));
            }
            samples.push(QASample {
                id: samples.len() as u64,
                author_id: Some(author.id),
                split,
                question: fill(template.question, ""),
                answer: fill(template.answer, author.attribute(template.field)),
                distractors,
            });
        }
    }

    let mut facts: Vec<(usize, String)> = (0..GENERAL_KINDS.len())
        .flat_map(|k| {
            product(&OBJECT_ADJECTIVES, &OBJECT_NOUNS, " ")
                .into_iter()
                .map(move |o| (k, o))
        })
        .collect();
    let mut general_rng = stream(seed, 10);
    facts.shuffle(&mut general_rng);
    for (kind, object) in facts.into_iter().take(config.n_general) {
        let kind = &GENERAL_KINDS[kind];
        let fill = |text: &str, value: &str| text.replace("{O}", &object).replace("{A}", value);
        let truth = general_rng.random_range(0..kind.values.len());
        let mut wrong: Vec<usize> = (0..kind.values.len()).filter(|&v| v != truth).collect();
        wrong.shuffle(&mut general_rng);
        let distractors = wrong
            .iter()
            .take(config.n_distractors.min(wrong.len()))
            .map(|&v| fill(kind.answer, kind.values[v]))
            .collect();
        samples.push(QASample {
            id: samples.len() as u64,
            author_id: None,
            split: Split::General,
            question: fill(kind.question, ""),
            answer: fill(kind.answer, kind.values[truth]),
            distractors,
        });
    }

    Ok(Corpus {
        config: config.clone(),
        authors,
        samples,
    })
}

const CORPUS_FILE: &str = "corpus.jsonl";
const AUTHORS_FILE: &str = "authors.jsonl";
const VOCAB_FILE: &str = "vocab.json";
const MANIFEST_FILE: &str = "manifest.json";

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &QASample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        build_vocab(&self.samples)
    }

    pub fn author(&self, id: u32) -> Option<&AuthorProfile> {
        self.authors.iter().find(|a| a.id == id)
    }

    /// Samples as JSON lines, one object per sample.
    pub fn samples_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `corpus.jsonl`, `authors.jsonl`, `vocab.json` and
    /// `manifest.json` into `dir`, replacing existing files.
    pub fn save(&self, dir: &Path) -> Result<Vocab> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CORPUS_FILE), self.samples_jsonl()?)?;
        let mut authors = BufWriter::new(fs::File::create(dir.join(AUTHORS_FILE))?);
        for a in &self.authors {
            serde_json::to_writer(&mut authors, a)?;
            authors.write_all(b"\n")?;
        }
        authors.flush()?;
        let vocab = self.vocab()?;
        fs::write(dir.join(VOCAB_FILE), vocab.to_json()?)?;
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        Ok(vocab)
    }

    /// Reads a corpus directory written by [`Corpus::save`] together with its
    /// vocabulary.
    pub fn load(dir: &Path) -> Result<(Self, Vocab)> {
        let config: CorpusConfig =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let samples = read_jsonl(&dir.join(CORPUS_FILE))?;
        let authors = read_jsonl(&dir.join(AUTHORS_FILE))?;
        let vocab = Vocab::from_json(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
        Ok((
            Self {
                config,
                authors,
                samples,
            },
            vocab,
        ))
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("Le Petit Sultan."),
            vec!["Le", "Petit", "Sultan", "."]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("Promise by the Seine"),
            vec!["Promise", "by", "the", "Seine"]
        );
        assert_eq!(
            tokenize("(Al-Kuwaiti's) \"books\"!"),
            vec!["(", "Al", "-", "Kuwaiti", "'", "s", ")", "\"", "books", "\"", "!"]
        );
    }

    fn sample(id: u64, q: &str, a: &str) -> QASample {
        QASample {
            id,
            author_id: None,
            split: Split::General,
            question: q.into(),
            answer: a.into(),
            distractors: vec![],
        }
    }

    #[test]
    fn vocab_assignment_and_fallback() {
        let vocab = build_vocab(&[sample(0, "a", "b")]).unwrap();
        assert_eq!(vocab.len(), 10);
        assert_eq!(vocab.id("<pert2>"), 7);
        assert_eq!(vocab.id("a"), 8);
        assert_eq!(vocab.id("b"), 9);
        assert_eq!(vocab.id("zzz"), UNK);
        assert!(build_vocab(&[]).is_err());
        let back = Vocab::from_json(&vocab.to_json().unwrap()).unwrap();
        assert_eq!(back, vocab);
    }

    #[test]
    fn vocab_json_rejects_gaps() {
        assert!(Vocab::from_json(r#"{"<pad>":0,"<bos>":2}"#).is_err());
    }

    #[test]
    fn encode_layout() {
        let vocab = build_vocab(&[sample(0, "a", "b")]).unwrap();
        let seq = encode_sample(&sample(0, "a", "b"), &vocab).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.ids(), &[BOS, 8, SEP, 9, EOS]);
        assert_eq!(seq.question_span(), 1..3);
        assert_eq!(seq.answer_span(), 3..5);
        assert_eq!(seq.predicted_len(), 4);

        let qa = sample(1, "a b.", "c a zz");
        let seq = encode_sample(&qa, &vocab).unwrap();
        assert_eq!(seq.answer_span().len(), tokenize(&qa.answer).len() + 1);
        let decoded = vocab.decode(seq.answer_tokens());
        assert_eq!(decoded, vec!["<unk>", "a", "<unk>"]);
    }

    #[test]
    fn token_sequence_rejects_bad_layout() {
        assert!(TokenSequence::new(0, Split::General, vec![BOS, SEP, 9, EOS]).is_err());
        assert!(TokenSequence::new(0, Split::General, vec![BOS, 8, SEP, EOS]).is_err());
        assert!(TokenSequence::new(0, Split::General, vec![8, 8, SEP, 9, EOS]).is_err());
    }

    #[test]
    fn generation_counts() {
        let cfg = CorpusConfig::default();
        let corpus = generate_corpus(&cfg).unwrap();
        assert_eq!(corpus.split(Split::Forget).count(), 20);
        assert_eq!(corpus.split(Split::Retain).count(), 1980);
        assert_eq!(corpus.split(Split::General).count(), 200);

        let cfg5 = CorpusConfig {
            forget_fraction: 0.05,
            ..cfg.clone()
        };
        let corpus = generate_corpus(&cfg5).unwrap();
        let forget: HashSet<_> = corpus.split(Split::Forget).map(|s| s.author_id).collect();
        let retain: HashSet<_> = corpus.split(Split::Retain).map(|s| s.author_id).collect();
        assert_eq!(forget.len(), 5);
        assert!(forget.is_disjoint(&retain));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = CorpusConfig::default();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a.samples_jsonl().unwrap(), b.samples_jsonl().unwrap());
        assert_eq!(
            a.vocab().unwrap().to_json().unwrap(),
            b.vocab().unwrap().to_json().unwrap()
        );
        let c = generate_corpus(&CorpusConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.samples_jsonl().unwrap(), c.samples_jsonl().unwrap());
    }

    #[test]
    fn capacity_and_config_errors() {
        let too_many = CorpusConfig {
            n_authors: author_capacity() + 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_corpus(&too_many),
            Err(Error::Capacity(_))
        ));
        let few = CorpusConfig {
            n_authors: 9,
            ..Default::default()
        };
        assert!(matches!(generate_corpus(&few), Err(Error::Config(_))));
        let bad_fraction = CorpusConfig {
            forget_fraction: 1.0,
            ..Default::default()
        };
        assert!(generate_corpus(&bad_fraction).is_err());
    }

    #[test]
    fn surname_determines_attributes() {
        let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
        let mut seen: HashMap<&str, &AuthorProfile> = HashMap::new();
        for a in &corpus.authors {
            assert!(seen.insert(&a.surname, a).is_none());
        }
        for field in [
            Field::Given,
            Field::City,
            Field::Genre,
            Field::Book1,
            Field::Award,
            Field::Year,
        ] {
            let values: HashSet<_> = corpus.authors.iter().map(|a| a.attribute(field)).collect();
            assert_eq!(values.len(), corpus.authors.len());
        }
        // answers about one author never depend on anything but the surname
        let mut by_question: HashMap<&str, &str> = HashMap::new();
        for s in &corpus.samples {
            if let Some(prev) = by_question.insert(&s.question, &s.answer) {
                assert_eq!(prev, s.answer);
            }
        }
    }

    #[test]
    fn questions_name_only_the_surname() {
        let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
        for s in corpus
            .split(Split::Retain)
            .chain(corpus.split(Split::Forget))
        {
            let author = corpus.author(s.author_id.unwrap()).unwrap();
            let q = tokenize(&s.question);
            assert_eq!(q.iter().filter(|t| **t == author.surname).count(), 1);
            assert!(!tokenize(&s.answer).contains(&author.surname));
            for other in [&author.given_name, &author.birthplace, &author.birth_year] {
                assert!(tokenize(other).iter().all(|t| !q.contains(t)));
            }
        }
    }

    #[test]
    fn distractors_are_wrong_and_same_length() {
        let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
        for s in &corpus.samples {
            assert!(s.distractors.len() >= 3);
            let n = tokenize(&s.answer).len() as isize;
            for d in &s.distractors {
                assert_ne!(d, &s.answer);
                assert!((tokenize(d).len() as isize - n).abs() <= 2);
            }
        }
    }

    #[test]
    fn pools_do_not_leak_special_tokens() {
        let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
        let vocab = corpus.vocab().unwrap();
        for s in &corpus.samples {
            for text in [&s.question, &s.answer].into_iter().chain(&s.distractors) {
                for id in vocab.encode_text(text) {
                    assert!(!PERTURBATION_POOL.contains(&id));
                    assert!(id > 7);
                }
            }
        }
        let surnames: HashSet<_> = product(&SURNAME_HEADS, &SURNAME_TAILS, "")
            .into_iter()
            .collect();
        let given: HashSet<_> = given_names().into_iter().collect();
        assert!(surnames.is_disjoint(&given));
    }

    #[test]
    fn distractors_are_never_real_attributes() {
        let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
        let real: HashSet<&str> = corpus
            .authors
            .iter()
            .flat_map(|a| FIELDS.iter().map(move |&f| a.attribute(f)))
            .collect();
        for s in corpus.samples.iter().filter(|s| s.author_id.is_some()) {
            for d in &s.distractors {
                assert!(!real.contains(d.as_str()), "{d}");
            }
        }
    }

    #[test]
    fn ids_are_unique_and_splits_partition() {
        let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
        let ids: HashSet<_> = corpus.samples.iter().map(|s| s.id).collect();
        assert_eq!(ids.len(), corpus.samples.len());
        for s in &corpus.samples {
            assert_eq!(s.author_id.is_none(), s.split == Split::General);
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("dto-corpus-{}", std::process::id()));
        let corpus = generate_corpus(&CorpusConfig {
            n_authors: 12,
            qa_per_author: 4,
            n_general: 10,
            forget_fraction: 0.1,
            ..Default::default()
        })
        .unwrap();
        let vocab = corpus.save(&dir).unwrap();
        let (back, back_vocab) = Corpus::load(&dir).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back_vocab, vocab);
        fs::remove_dir_all(&dir).unwrap();
    }
}
