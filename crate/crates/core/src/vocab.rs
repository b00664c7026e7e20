//! Word-level vocabulary shared by the text encoder and the language model.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const CLS: &str = "<cls>";
pub const MASK: &str = "<mask>";
/// Stand-in for an injected feature embedding during language-model pretraining.
pub const FEAT: &str = "<feat>";

const SPECIAL: &[&str] = &[PAD, CLS, MASK, FEAT];

const TEMPLATE: &[&str] = &[
    "###", "Human", "Assistant", ":", "<Img>", "</Img>", "Does", "the", "image", "match",
    "text", "?", "Options", "(", ")", "A", "B", "real", "fake", "news", ".", "Is", "this",
];

pub const COLORS: &[&str] = &["red", "green", "blue", "orange", "yellow", "purple"];
pub const SHAPES: &[&str] = &["circle", "square", "triangle", "diamond", "bar", "ring"];

const CAPTION: &[&str] = &[
    "a", "report", "today", "city", "council", "photo", "market", "weekend", "local", "scene",
    "river", "morning", "near", "club", "breaking", "capital", "officials", "storm", "in",
];

const CLASS_PROMPTS: &[&str] = &[
    "of", "natural", "pristine", "authentic", "unaltered", "manipulated", "edited", "forged",
    "tampered",
];

#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut words = Vec::new();
        let mut index = HashMap::new();
        for group in [SPECIAL, TEMPLATE, COLORS, SHAPES, CAPTION, CLASS_PROMPTS] {
            for &w in group {
                if !index.contains_key(w) {
                    index.insert(w, words.len());
                    words.push(w);
                }
            }
        }
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Input(format!("word {word:?} is not in the vocabulary")))
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    /// Whitespace tokenization.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn cls(&self) -> usize {
        self.index[CLS]
    }

    pub fn mask(&self) -> usize {
        self.index[MASK]
    }

    pub fn feat(&self) -> usize {
        self.index[FEAT]
    }

    /// Ids that may appear inside captions (content words).
    pub fn content_ids(&self) -> Vec<usize> {
        COLORS
            .iter()
            .chain(SHAPES)
            .chain(CAPTION)
            .map(|w| self.index[w])
            .collect()
    }
}

/// Color antonym used for attribute flips.
pub fn antonym(color: &str) -> Option<&'static str> {
    Some(match color {
        "red" => "green",
        "green" => "red",
        "blue" => "orange",
        "orange" => "blue",
        "yellow" => "purple",
        "purple" => "yellow",
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_word() {
        let v = Vocab::new();
        let ids = v.encode("report : a red circle today").unwrap();
        assert_eq!(v.decode(&ids), "report : a red circle today");
        assert!(v.encode("zebra").is_err());
    }

    #[test]
    fn ids_are_dense_and_unique() {
        let v = Vocab::new();
        let mut seen = std::collections::HashSet::new();
        for i in 0..v.len() {
            assert!(seen.insert(v.word(i).unwrap()));
        }
        assert_eq!(v.id(PAD).unwrap(), 0);
    }

    #[test]
    fn antonyms_are_involutions() {
        for c in COLORS {
            assert_eq!(antonym(antonym(c).unwrap()), Some(*c));
        }
    }
}
