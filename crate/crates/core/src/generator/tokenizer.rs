use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Words every toy vocabulary carries: the inquiry template, the synthetic
/// verb phrases, and a handful of distractors.
const BUILTIN: &[&str] = &[
    "what", "is", "the", "person", "doing", "with", "object", "?", "sit", "on", "stand", "ride", "hold", "carry",
    "push", "pull", "look", "at", "a", "an", "and", "near", "quietly", "sitting", "standing", "riding", "holding",
    "up", "down", "next", "to", "over", "under", "it", "bench", "bicycle", "ball", "cup", "horse", "nothing", "beside",
    "throw", "catch", "kick", "lift", "wave",
];

/// Whitespace word tokenizer with a closed vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Self::from_words(words)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.words
    }
}

impl Tokenizer {
    /// Specials, then built-in words, then `extra` words not already present,
    /// then `<extra_i>` fillers until at least `min_size` entries exist.
    pub fn new(extra: &[&str], min_size: usize) -> Self {
        let mut words: Vec<String> = SPECIALS.iter().chain(BUILTIN).map(|w| w.to_string()).collect();
        for w in extra {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        let mut i = 0;
        while words.len() < min_size {
            words.push(format!("<extra_{i}>"));
            i += 1;
        }
        Self::from_words(words).expect("built-in vocabulary is duplicate-free")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::InvalidArgument("vocabulary must start with <pad> <bos> <eos>".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words.get(id).map(String::as_str).ok_or(Error::UnknownToken(id))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w).ok_or_else(|| Error::UnknownWord(w.to_string()))).collect()
    }

    /// Joins words with single spaces; special tokens are rendered verbatim.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&i| self.word(i)).collect();
        Ok(words?.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_and_padding() {
        let t = Tokenizer::new(&["lasso"], 80);
        assert_eq!(t.len(), 80);
        assert_eq!(t.word(EOS).unwrap(), "<eos>");
        assert!(t.id("lasso").is_some());
        assert_eq!(Tokenizer::new(&["sit"], 0).len(), Tokenizer::new(&[], 0).len());
        assert!(matches!(t.encode("sit on zebra"), Err(Error::UnknownWord(w)) if w == "zebra"));
        assert!(matches!(t.decode(&[999]), Err(Error::UnknownToken(999))));
    }

    #[test]
    fn serde_round_trip_restores_lookup() {
        let t = Tokenizer::new(&[], 64);
        let back: Tokenizer = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back.encode("hold up").unwrap(), t.encode("hold up").unwrap());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(idx in prop::collection::vec(3usize..40, 1..8)) {
            let t = Tokenizer::new(&[], 64);
            let s = t.decode(&idx).unwrap();
            prop_assert_eq!(t.encode(&s).unwrap(), idx.clone());
            prop_assert_eq!(t.decode(&t.encode(&s).unwrap()).unwrap(), s);
        }
    }
}
