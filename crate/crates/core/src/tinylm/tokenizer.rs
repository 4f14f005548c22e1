//! Whitespace word-level tokenizer.
//!
//! Ids 0..4 are reserved for `<pad>`, `<bos>`, `<eos>` and `<unk>`. Every other
//! id maps to exactly one word. Tab characters are kept as a standalone `\t`
//! token so few-shot prompts can carry their exemplar separator.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const TAB: &str = "\t";

/// A tokenized piece of text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub text: String,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// Split text into word pieces: runs of non-whitespace, with each tab as its own piece.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split([' ', '\n', '\r']) {
        let mut rest = chunk;
        while let Some(pos) = rest.find('\t') {
            if pos > 0 {
                out.push(&rest[..pos]);
            }
            out.push(TAB);
            rest = &rest[pos + 1..];
        }
        if !rest.is_empty() {
            out.push(rest);
        }
    }
    out
}

/// Collapse whitespace so text compares equal to a detokenized sequence.
pub fn normalize_whitespace(text: &str) -> String {
    split_words(text).join(" ")
}

impl Tokenizer {
    /// Build a vocabulary from the special tokens followed by `words` in first-seen order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tok = Tokenizer {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_TOKENS {
            tok.push(s);
        }
        for w in words {
            for piece in split_words(w.as_ref()) {
                tok.push(piece);
            }
        }
        tok
    }

    /// Restore a vocabulary from its full word list (specials included).
    pub fn from_vocab(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIAL_TOKENS.len()
            || words.iter().zip(SPECIAL_TOKENS).any(|(w, s)| w != s)
        {
            return Err(Error::InvalidConfig(
                "vocabulary must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Tokenizer { words, index })
    }

    fn push(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            self.index.insert(word.to_string(), self.words.len());
            self.words.push(word.to_string());
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    /// Word-level tokenization; unseen words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        let ids = split_words(text)
            .into_iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect();
        TokenSeq {
            ids,
            text: text.to_string(),
        }
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn seq_from_ids(&self, ids: Vec<TokenId>) -> TokenSeq {
        let text = self.detokenize(&ids);
        TokenSeq { ids, text }
    }
}
