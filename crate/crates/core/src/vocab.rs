//! BERT-style vocabulary with basic + WordPiece tokenization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";

const MAX_WORD_CHARS: usize = 100;

/// How a label word maps onto the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordResolution {
    pub id: u32,
    /// The word needed more than one piece; `id` is its first piece.
    pub multi_piece: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk: u32,
    cls: u32,
    sep: u32,
    mask: u32,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list. `[UNK]`, `[CLS]`,
    /// `[SEP]` and `[MASK]` must be present.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidData(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidData(format!("vocabulary lacks `{name}`")))
        };
        Ok(Vocab {
            unk: special(UNK)?,
            cls: special(CLS)?,
            sep: special(SEP)?,
            mask: special(MASK)?,
            tokens,
            index,
        })
    }

    /// Reads a `vocab.txt` file with one token per line.
    pub fn load_txt(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tokens(raw.lines().map(|l| l.trim_end_matches('\r').to_string()))
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

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    pub fn mask_id(&self) -> u32 {
        self.mask
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.token(id)
            .map(|t| t.starts_with('[') && t.ends_with(']') && t.len() > 2)
            .unwrap_or(false)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Greedy longest-match-first WordPiece split of one basic token.
    /// Returns `None` when the word cannot be covered.
    fn wordpiece(&self, word: &str) -> Option<Vec<u32>> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            return None;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut sub: String = chars[start..end].iter().collect();
                if start > 0 {
                    sub.insert_str(0, "##");
                }
                if let Some(id) = self.id(&sub) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            pieces.push(found?);
            start = end;
        }
        Some(pieces)
    }

    /// Lowercasing basic tokenizer followed by WordPiece; uncoverable words
    /// become `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in basic_tokens(text) {
            match self.wordpiece(&word) {
                Some(p) => out.extend(p),
                None => out.push(self.unk),
            }
        }
        out
    }

    /// Resolves a label word to a vocabulary position. Multi-piece words map
    /// to their first piece; empty or uncoverable words resolve to `None`.
    pub fn resolve_word(&self, word: &str) -> Option<WordResolution> {
        let basic = basic_tokens(word);
        let first = basic.first()?;
        let pieces = self.wordpiece(first)?;
        let id = *pieces.first()?;
        if id == self.unk {
            return None;
        }
        Some(WordResolution {
            id,
            multi_piece: basic.len() > 1 || pieces.len() > 1,
        })
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace())
}

/// Lowercases, splits on whitespace and isolates punctuation characters.
pub fn basic_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars().flat_map(char::to_lowercase) {
            if is_punct(c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else if !c.is_control() {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}
