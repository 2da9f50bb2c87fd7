//! Offline candidate-category extractor.
//!
//! Keeps lowercase word tokens that are not stopwords, common modifiers or
//! verb forms. Crude next to a trained tagger, but deterministic and good
//! enough for short object-centric captions.

use std::collections::HashSet;

use super::{Backend, BackendError, EntityBackend};

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "of",
    "on", "in", "at", "by", "for", "with", "without", "to", "from", "into", "onto", "over",
    "under", "above", "below", "near", "next", "beside", "behind", "between", "among", "around",
    "through", "across", "along", "against", "up", "down", "out", "off", "and", "or", "but",
    "nor", "so", "yet", "is", "are", "was", "were", "be", "been", "being", "am", "has", "have",
    "had", "do", "does", "did", "it", "its", "he", "she", "they", "them", "his", "her", "their",
    "there", "here", "who", "which", "what", "where", "while", "as", "than", "then", "very",
    "one", "two", "three", "four", "five", "several", "many", "few", "other", "another", "same",
    "photo", "picture", "image", "painting", "view", "close", "front", "top", "side", "left",
    "right", "middle", "background", "foreground", "sits", "stands", "lies", "sitting",
];

// Adjectives that commonly precede the noun in captions.
const MODIFIERS: &[&str] = &[
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white",
    "gray", "grey", "golden", "silver", "big", "small", "large", "little", "tiny", "huge", "tall",
    "short", "long", "old", "young", "new", "bright", "dark", "colorful", "beautiful", "pretty",
    "wooden", "metal", "empty", "full", "wet", "dry", "sunny", "cloudy", "snowy", "happy",
];

/// Deterministic stopword-filtered noun extractor.
#[derive(Debug, Clone)]
pub struct LexiconExtractor {
    skip: HashSet<&'static str>,
}

impl Default for LexiconExtractor {
    fn default() -> Self {
        LexiconExtractor {
            skip: STOPWORDS.iter().chain(MODIFIERS).copied().collect(),
        }
    }
}

impl LexiconExtractor {
    pub fn extract(&self, caption: &str) -> Result<Vec<String>, BackendError> {
        if caption.trim().is_empty() {
            return Err(BackendError::Precondition("caption is empty".into()));
        }
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for token in caption
            .split(|c: char| !(c.is_alphabetic() || c == '-'))
            .map(|t| t.trim_matches('-').to_lowercase())
        {
            if token.chars().count() < 2 || self.skip.contains(token.as_str()) || is_verb_form(&token) {
                continue;
            }
            if seen.insert(token.clone()) {
                out.push(token);
            }
        }
        Ok(out)
    }
}

fn is_verb_form(token: &str) -> bool {
    token.len() > 4 && (token.ends_with("ing") || token.ends_with("ed"))
}

impl Backend for LexiconExtractor {
    fn name(&self) -> &str {
        "lexicon-extractor"
    }

    fn version(&self) -> &str {
        "lexicon-1"
    }
}

impl EntityBackend for LexiconExtractor {
    fn extract_entities(&self, caption: &str) -> Result<Vec<String>, BackendError> {
        self.extract(caption)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn extract(s: &str) -> Vec<String> {
        LexiconExtractor::default().extract(s).unwrap()
    }

    #[test]
    fn butterfly_caption() {
        assert_eq!(extract("a butterfly on a flower"), vec!["butterfly", "flower"]);
    }

    #[test]
    fn stopword_only_caption_is_empty() {
        assert!(extract("the the the").is_empty());
    }

    #[test]
    fn empty_caption_is_rejected() {
        assert!(LexiconExtractor::default().extract("  ").is_err());
    }

    #[test]
    fn order_of_first_appearance_and_dedup() {
        assert_eq!(
            extract("A red car parked near a tree, and another car"),
            vec!["car", "tree"]
        );
    }
}
