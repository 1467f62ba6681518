use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";

/// Closed word-level vocabulary. Text is whitespace-separated words;
/// punctuation is written as its own word.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Tokenizer {
    /// Builds a vocabulary from every word of `texts`, with `<bos>` as id 0
    /// and the rest in sorted order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for t in texts {
            for w in t.split_whitespace() {
                if w != BOS {
                    set.insert(w.to_string());
                }
            }
        }
        let words: Vec<String> = std::iter::once(BOS.to_string()).chain(set).collect();
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Tokenizer { words, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::Input(format!("word {word:?} is not in the vocabulary")))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&i| {
                self.words
                    .get(i)
                    .map(|s| s.as_str())
                    .ok_or_else(|| Error::Input(format!("token id {i} is out of range")))
            })
            .collect();
        Ok(words?.join(" "))
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_oov() {
        let t = Tokenizer::from_texts(["the cat is red .", "my choice : yes"]);
        assert_eq!(t.word(0), BOS);
        let s = "<bos> the cat is red . my choice : yes";
        assert_eq!(t.decode(&t.encode(s).unwrap()).unwrap(), s);
        assert!(matches!(t.encode("the dog"), Err(Error::Input(_))));
        assert!(t.decode(&[999]).is_err());
    }

    #[test]
    fn vocabulary_is_order_independent() {
        let a = Tokenizer::from_texts(["b a", "c"]);
        let b = Tokenizer::from_texts(["c a", "b"]);
        assert_eq!(a, b);
    }
}
