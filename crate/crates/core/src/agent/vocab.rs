use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::worldgen::instruction::{PAD, UNK, VOCABULARY};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Dense token ids; `PAD` is 0 and `UNK` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(VOCABULARY.iter().copied()).expect("built-in vocabulary is valid")
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose first two tokens must be `PAD` and `UNK`.
    pub fn new<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(str::to_lowercase).collect();
        if tokens.first().map(String::as_str) != Some(PAD) || tokens.get(1).map(String::as_str) != Some(UNK) {
            return Err(Error::Shape("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Shape(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids
            .get(word)
            .or_else(|| self.ids.get(&word.to_lowercase()))
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Maps words to ids; unknown words become `UNK`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_pad_is_zero() {
        let v = Vocabulary::default();
        assert_eq!(v.id(PAD), PAD_ID);
        assert_eq!(v.id(UNK), UNK_ID);
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()), i);
        }
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::default();
        assert_eq!(v.encode(&["zebra", "Sofa"]), vec![UNK_ID, v.id("sofa")]);
    }

    #[test]
    fn rejects_missing_reserved_tokens() {
        assert!(Vocabulary::new(["a", "b"]).is_err());
    }
}
