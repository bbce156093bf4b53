use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::TokenSequence;
use crate::{Error, Result, TokenId};

/// Rendering of the mask token.
pub const MASK_TEXT: &str = "[MASK]";
/// Rendering of unknown tokens.
pub const UNK_GLYPH: &str = "\u{FFFD}";

const SPECIALS: [&str; 4] = [MASK_TEXT, "[EOS]", "[PAD]", UNK_GLYPH];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Char,
    Word,
}

impl std::str::FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(Self::Char),
            "word" => Ok(Self::Word),
            other => Err(Error::InvalidArgument(format!("unknown tokenizer mode `{other}`"))),
        }
    }
}

/// Token ↔ id map. Ids 0..4 are the special tokens; corpus tokens follow in
/// order of first occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    mode: TokenizerMode,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    mode: TokenizerMode,
    tokens: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        if r.tokens.len() < Vocab::N_SPECIAL || r.tokens[..Vocab::N_SPECIAL] != SPECIALS {
            return Err(Error::InvalidArgument("vocabulary does not start with the special tokens".into()));
        }
        let base = r.tokens[Vocab::N_SPECIAL..].to_vec();
        let v = Vocab::from_base(r.mode, base);
        if v.tokens.len() != r.tokens.len() {
            return Err(Error::InvalidArgument("vocabulary has duplicate tokens".into()));
        }
        Ok(v)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            mode: v.mode,
            tokens: v.tokens,
        }
    }
}

impl Vocab {
    pub const MASK: TokenId = 0;
    pub const EOS: TokenId = 1;
    pub const PAD: TokenId = 2;
    pub const UNK: TokenId = 3;
    pub const N_SPECIAL: usize = 4;

    fn from_base(mode: TokenizerMode, base: Vec<String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for t in base {
            if !index.contains_key(&t) {
                index.insert(t.clone(), tokens.len() as TokenId);
                tokens.push(t);
            }
        }
        Self { mode, tokens, index }
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tokens that can appear in text (everything but the specials).
    pub fn base_ids(&self) -> std::ops::Range<TokenId> {
        Self::N_SPECIAL as TokenId..self.tokens.len() as TokenId
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < Self::N_SPECIAL
    }

    /// Id of a corpus token. Special tokens are not reachable by name.
    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Split text into token strings without mapping to ids.
    pub fn tokenize<'t>(&self, text: &'t str) -> Vec<&'t str> {
        split(self.mode, text)
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let ids = self
            .tokenize(text)
            .into_iter()
            .map(|t| self.id(t).unwrap_or(Self::UNK))
            .collect();
        TokenSequence::new(ids)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let parts = ids
            .iter()
            .map(|&id| {
                self.token(id).ok_or(Error::TokenOutOfRange {
                    id,
                    size: self.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(match self.mode {
            TokenizerMode::Char => parts.concat(),
            TokenizerMode::Word => parts.join(" "),
        })
    }
}

fn split(mode: TokenizerMode, text: &str) -> Vec<&str> {
    match mode {
        TokenizerMode::Char => text
            .char_indices()
            .map(|(i, c)| &text[i..i + c.len_utf8()])
            .collect(),
        TokenizerMode::Word => text.split_whitespace().collect(),
    }
}

pub fn build_vocab(corpus_text: &str, mode: TokenizerMode) -> Result<Vocab> {
    let base: Vec<String> = split(mode, corpus_text).into_iter().map(str::to_owned).collect();
    if base.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Vocab::from_base(mode, base))
}
