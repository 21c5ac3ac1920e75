//! Word-level tokenizer for the desk-scale backbone.
//!
//! Tokens are the alphanumeric/underscore runs and single symbols produced
//! by [`crate::embed::code_tokens`]. The vocabulary is built once from a
//! corpus and serialized with checkpoints so encode/decode stay stable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embed::code_tokens;
use crate::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;

const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    lookup: BTreeMap<String, usize>,
}

impl Tokenizer {
    /// Build a vocabulary from corpus texts. Specials come first, then
    /// "true" and "false" (the mastery anchor words), then every distinct
    /// corpus token in first-appearance order.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut lookup: BTreeMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for anchor in ["true", "false"] {
            lookup.insert(anchor.to_string(), tokens.len());
            tokens.push(anchor.to_string());
        }
        for text in texts {
            for token in code_tokens(text) {
                if !lookup.contains_key(&token) {
                    lookup.insert(token.clone(), tokens.len());
                    tokens.push(token);
                }
            }
        }
        Tokenizer { tokens, lookup }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Token ids for a text; unknown words map to `UNK`. No implicit
    /// bos/eos markers are added.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        code_tokens(text)
            .iter()
            .map(|t| self.lookup.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let token = self
                .tokens
                .get(id)
                .ok_or_else(|| Error::domain(format!("token id {id} out of vocabulary")))?;
            words.push(token.as_str());
        }
        Ok(words.join(" "))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    /// Rebuild the reverse lookup after deserialization.
    pub fn rebuild_lookup(&mut self) {
        self.lookup = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&file, self)?;
        use std::io::Write as _;
        writeln!(&file)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut tokenizer: Tokenizer = serde_json::from_reader(file)?;
        tokenizer.rebuild_lookup();
        if tokenizer.tokens.len() < SPECIALS.len() + 2
            || tokenizer.tokens[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .any(|(t, s)| t != s)
        {
            return Err(Error::integrity(format!(
                "tokenizer at {} lacks the reserved special tokens",
                path.display()
            )));
        }
        Ok(tokenizer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_and_anchors_take_fixed_slots() {
        let tok = Tokenizer::from_corpus(["x = 1"]);
        assert_eq!(tok.token(BOS), Some("<bos>"));
        assert_eq!(tok.token(EOS), Some("<eos>"));
        assert_eq!(tok.token(UNK), Some("<unk>"));
        assert_eq!(tok.id_of("true"), Some(3));
        assert_eq!(tok.id_of("false"), Some(4));
    }

    #[test]
    fn encode_decode_round_trips_known_words() {
        let code = "def add(a, b):\n    return a + b";
        let tok = Tokenizer::from_corpus([code]);
        let ids = tok.encode(code);
        assert!(!ids.contains(&UNK), "corpus words must all be known");
        let text = tok.decode(&ids).unwrap();
        assert_eq!(text, "def add ( a , b ) : return a + b");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tok = Tokenizer::from_corpus(["print hello"]);
        let ids = tok.encode("print goodbye");
        assert_eq!(ids[0], tok.id_of("print").unwrap());
        assert_eq!(ids[1], UNK);
    }

    #[test]
    fn corpus_order_is_deterministic() {
        let a = Tokenizer::from_corpus(["x y z", "w x"]);
        let b = Tokenizer::from_corpus(["x y z", "w x"]);
        assert_eq!(a, b);
        let ids: Vec<_> = ["x", "y", "z", "w"]
            .iter()
            .map(|t| a.id_of(t).unwrap())
            .collect();
        assert_eq!(ids, vec![5, 6, 7, 8], "first appearance order after anchors");
    }

    #[test]
    fn true_false_present_even_without_corpus_mention() {
        let tok = Tokenizer::from_corpus(["no booleans here"]);
        assert!(tok.id_of("true").is_some());
        assert!(tok.id_of("false").is_some());
        assert_eq!(tok.encode("true")[0], tok.id_of("true").unwrap());
    }

    #[test]
    fn save_load_round_trip_preserves_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokenizer.json");
        let tok = Tokenizer::from_corpus(["while n > 0: n -= 1"]);
        tok.save(&path).unwrap();
        let loaded = Tokenizer::load(&path).unwrap();
        assert_eq!(loaded.encode("while n"), tok.encode("while n"));
        assert_eq!(loaded.vocab_size(), tok.vocab_size());
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let tok = Tokenizer::from_corpus(["a"]);
        assert!(tok.decode(&[tok.vocab_size()]).is_err());
    }
}
