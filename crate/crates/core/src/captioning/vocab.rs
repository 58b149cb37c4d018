use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id map with four reserved ids followed by the corpus words in
/// sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("corpus vocabulary is well formed")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[bos, words…, eos]`, unknown words mapped to `unk`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = vec![BOS];
        ids.extend(tokenize(text).iter().map(|w| self.id(w)));
        ids.push(EOS);
        TokenSequence(ids)
    }

    /// Joins the word tokens with single spaces, dropping pad/bos/eos.
    pub fn decode(&self, ids: &[u32]) -> String {
        self.decode_words(ids).join(" ")
    }

    pub fn decode_words(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or("<unk>").to_string())
            .collect()
    }
}

/// Vocabulary-indexed report text. Canonical sequences start with `bos`
/// and end with `eos`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_canonical(&self) -> bool {
        let ids = &self.0;
        ids.len() >= 2
            && ids[0] == BOS
            && ids[ids.len() - 1] == EOS
            && !ids[..ids.len() - 1].iter().any(|&t| t == PAD || t == EOS)
    }

    /// Teacher-forcing pair: inputs drop the last token, targets the first.
    pub fn shifted(&self) -> Result<(&[u32], &[u32])> {
        if self.0.len() < 2 {
            return Err(Error::Data("token sequence needs at least two ids".into()));
        }
        Ok((&self.0[..self.0.len() - 1], &self.0[1..]))
    }
}
