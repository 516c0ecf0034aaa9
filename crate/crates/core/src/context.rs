//! Context names: the most frequent nouns in the captions of images that contain a class.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pos {
    Noun,
    Adjective,
    Verb,
    Adverb,
    Determiner,
    Preposition,
    Pronoun,
    Conjunction,
    Number,
}

/// Part-of-speech tagger over lowercase word tokens.
pub trait PosTagger: Send + Sync {
    fn tag(&self, tokens: &[String]) -> Vec<Pos>;
}

/// Deterministic lexicon-and-suffix tagger. Unknown open-class words are nouns.
#[derive(Debug, Clone, Default)]
pub struct RuleTagger;

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "no",
    "another", "either", "neither", "both", "all", "many", "several", "few", "much", "more",
    "most", "other", "such",
];

const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "under", "over", "above", "below", "near", "by", "with", "without", "of",
    "for", "from", "to", "into", "onto", "through", "across", "along", "around", "behind",
    "beside", "besides", "between", "beneath", "inside", "outside", "up", "down", "off", "out",
    "against", "among", "during", "toward", "towards", "upon", "via", "next", "underneath",
    "beyond", "within", "like", "amid", "atop", "about", "after", "before",
];

const PRONOUNS: &[&str] = &[
    "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them", "his", "its",
    "our", "their", "my", "your", "what", "which", "who", "whom", "whose", "there", "here",
    "itself", "themselves", "one",
];

const CONJUNCTIONS: &[&str] = &[
    "and", "or", "but", "nor", "so", "yet", "while", "as", "if", "because", "than", "then",
    "where", "when",
];

const VERBS: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "do", "does",
    "did", "can", "could", "will", "would", "shall", "should", "may", "might", "must", "sit",
    "sits", "stand", "stands", "lie", "lies", "walk", "walks", "run", "runs", "ride", "rides",
    "hold", "holds", "look", "looks", "wear", "wears", "play", "plays", "eat", "eats", "grow",
    "grows", "show", "shows", "shown", "taken", "take", "takes", "made", "make", "makes", "seen",
    "see", "sees", "get", "gets", "got", "go", "goes", "went", "come", "comes", "put", "set",
    "lay", "hang", "hangs", "hung", "lit", "built", "covered", "filled", "surrounded", "parked",
    "located", "features", "contains", "contain",
];

const ADVERBS: &[&str] = &[
    "very", "too", "also", "just", "only", "together", "away", "again", "not", "almost",
    "nearly", "really", "quite", "still", "even", "well", "far", "back", "home",
];

const ADJECTIVES: &[&str] = &[
    "lush", "green", "grassy", "rural", "red", "blue", "yellow", "white", "black", "brown",
    "gray", "grey", "orange", "purple", "pink", "golden", "silver", "dark", "bright", "large",
    "small", "big", "little", "tall", "short", "old", "new", "young", "wooden", "empty", "open",
    "closed", "sunny", "cloudy", "beautiful", "colorful", "modern", "ancient", "busy", "quiet",
    "scenic", "rustic", "vintage", "rocky", "sandy", "snowy", "wet", "dry", "clear", "blurry",
    "high", "low", "long", "wide", "narrow", "round", "square", "flat", "shiny", "clean",
    "dirty", "nice", "cool", "warm", "cold", "hot", "pretty", "cute", "tiny", "huge", "giant",
    "various", "different", "single", "double", "main", "urban", "natural", "wild", "domestic",
    "residential", "agricultural", "industrial", "historic", "traditional", "fresh", "full",
    "dense", "thick", "thin", "soft", "hard", "heavy", "light", "early", "late", "public",
    "private", "local", "favorite", "favourite", "first", "last", "same", "whole", "entire",
    "foggy", "misty", "stormy", "rainy", "dusty", "muddy", "leafy", "woody", "hilly", "mossy",
    "overgrown", "abandoned", "vast", "distant", "nearby", "rolling", "serene", "peaceful",
];

/// Words that look like verbs/adverbs by suffix but are nouns.
const NOUN_EXCEPTIONS: &[&str] = &[
    "building", "ceiling", "painting", "clothing", "railing", "evening", "morning", "ring",
    "king", "thing", "wing", "string", "spring", "swing", "sibling", "bedding", "pudding",
    "wedding", "stocking", "awning", "sling", "lightning", "ping", "bed", "shed", "sled",
    "family", "fly", "butterfly", "lily", "belly", "jelly", "ally", "rally", "trolley",
    "valley", "alley", "bully", "dolly", "holly", "gully", "trellis", "seedling", "duckling",
    "dumpling", "sapling", "island", "table", "cable", "stable", "vegetable", "bible", "noble",
    "bathtub", "lead", "head", "bread", "thread", "sled", "steed", "weed", "seed", "reed",
    "feed", "speed", "breed",
];

const NUMBER_WORDS: &[&str] = &[
    "zero", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "twenty", "hundred", "thousand", "dozen", "couple", "pair",
];

impl RuleTagger {
    fn tag_word(word: &str) -> Pos {
        let is = |list: &[&str]| list.contains(&word);
        if word.chars().all(|c| c.is_ascii_digit()) || is(NUMBER_WORDS) {
            return Pos::Number;
        }
        if is(DETERMINERS) {
            return Pos::Determiner;
        }
        if is(PREPOSITIONS) {
            return Pos::Preposition;
        }
        if is(PRONOUNS) {
            return Pos::Pronoun;
        }
        if is(CONJUNCTIONS) {
            return Pos::Conjunction;
        }
        if is(VERBS) {
            return Pos::Verb;
        }
        if is(ADVERBS) {
            return Pos::Adverb;
        }
        if is(ADJECTIVES) {
            return Pos::Adjective;
        }
        if is(NOUN_EXCEPTIONS) {
            return Pos::Noun;
        }
        let len = word.len();
        if len > 4 && word.ends_with("ing") {
            return Pos::Verb;
        }
        if len > 4 && word.ends_with("ed") {
            return Pos::Verb;
        }
        if len > 4 && word.ends_with("ly") {
            return Pos::Adverb;
        }
        const ADJ_SUFFIXES: &[&str] = &["ful", "ous", "ish", "less", "able", "ible", "ive"];
        if len > 5 && ADJ_SUFFIXES.iter().any(|s| word.ends_with(s)) {
            return Pos::Adjective;
        }
        Pos::Noun
    }
}

impl PosTagger for RuleTagger {
    fn tag(&self, tokens: &[String]) -> Vec<Pos> {
        tokens.iter().map(|t| Self::tag_word(t)).collect()
    }
}

/// Nouns that describe the photograph rather than its content.
pub const STOP_NOUNS: &[&str] = &[
    "image", "photo", "photograph", "picture", "pic", "view", "stock", "illustration", "shot",
    "closeup", "close-up", "background", "foreground", "type", "kind", "lot", "bunch", "side",
    "front", "top", "bottom", "thing", "something", "area", "part", "group", "piece", "day",
    "time", "way", "sort", "number", "variety", "couple", "middle", "center", "edge", "stock",
    "camera", "frame",
];

const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("people", "person"),
    ("men", "man"),
    ("women", "woman"),
    ("children", "child"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("mice", "mouse"),
    ("geese", "goose"),
    ("oxen", "ox"),
    ("leaves", "leaf"),
    ("knives", "knife"),
    ("wives", "wife"),
    ("lives", "life"),
    ("shelves", "shelf"),
    ("wolves", "wolf"),
    ("calves", "calf"),
    ("halves", "half"),
    ("loaves", "loaf"),
    ("scarves", "scarf"),
    ("cacti", "cactus"),
    ("fungi", "fungus"),
];

const INVARIANT_S: &[&str] = &[
    "series", "species", "news", "glasses", "pants", "jeans", "shorts", "scissors", "stairs",
    "bus", "gas", "grass", "glass", "moss", "dress", "cross", "class", "boss", "mattress",
    "canvas", "lens", "cactus", "octopus", "virus", "campus", "chaos", "atlas", "tennis",
    "physics", "bonus", "iris", "oasis", "basis", "axis", "chassis", "goods", "clothes",
];

/// Reduce a plural noun to its singular form with suffix rules and an irregular table.
pub fn singularize(word: &str) -> String {
    if let Some((_, s)) = IRREGULAR_PLURALS.iter().find(|(p, _)| *p == word) {
        return s.to_string();
    }
    if INVARIANT_S.contains(&word) || word.len() <= 3 {
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix("ies") {
        return format!("{stem}y");
    }
    for suffix in ["sses", "shes", "ches", "xes", "zes"] {
        if word.ends_with(suffix) {
            return word[..word.len() - 2].to_string();
        }
    }
    if word.ends_with("oes") && !word.ends_with("shoes") {
        return word[..word.len() - 2].to_string();
    }
    if word.ends_with("ss") || word.ends_with("us") || word.ends_with("is") {
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix('s') {
        return stem.to_string();
    }
    word.to_string()
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .map(|t| t.trim_matches(|c| c == '\'' || c == '-'))
        .map(|t| t.strip_suffix("'s").unwrap_or(t))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct ExtractOptions {
    /// Keep adjectives alongside nouns (captions often name the scene by its look).
    pub adjective_pass_through: bool,
}

/// Lowercase, lemmatized nouns of a caption, duplicates kept.
pub fn extract_nouns(caption: &str, tagger: &dyn PosTagger, options: &ExtractOptions) -> Vec<String> {
    let tokens = tokenize(caption);
    let tags = tagger.tag(&tokens);
    tokens
        .into_iter()
        .zip(tags)
        .filter_map(|(tok, pos)| match pos {
            Pos::Noun => {
                let lemma = singularize(&tok);
                (!STOP_NOUNS.contains(&lemma.as_str())).then_some(lemma)
            }
            Pos::Adjective if options.adjective_pass_through => Some(tok),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionCorpus {
    pub class_id: u32,
    pub captions: Vec<String>,
}

impl CaptionCorpus {
    /// One caption per line; blank lines are ignored.
    pub fn read(path: &Path, class_id: u32) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(CaptionCorpus {
            class_id,
            captions: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextNames {
    pub class_id: u32,
    pub entries: Vec<(String, u32)>,
}

impl ContextNames {
    pub fn nouns(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// Top-`k` nouns by frequency, ties broken lexicographically.
pub fn rank_context_names(
    corpus: &CaptionCorpus,
    k: usize,
    tagger: &dyn PosTagger,
    options: &ExtractOptions,
) -> Result<ContextNames> {
    if k == 0 {
        return Err(Error::Config("context name count k must be at least 1".into()));
    }
    let mut counts: HashMap<String, u32> = HashMap::new();
    for caption in &corpus.captions {
        for noun in extract_nouns(caption, tagger, options) {
            *counts.entry(noun).or_default() += 1;
        }
    }
    Ok(ContextNames {
        class_id: corpus.class_id,
        entries: top_k_counts(counts, k),
    })
}

pub(crate) fn top_k_counts(counts: HashMap<String, u32>, k: usize) -> Vec<(String, u32)> {
    let mut entries: Vec<(String, u32)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(k);
    entries
}
