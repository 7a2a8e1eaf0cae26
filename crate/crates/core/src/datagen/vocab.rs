use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marks the first piece of a word.
pub const WORD_BOUNDARY: &str = "▁";
pub const BLANK_PIECE: &str = "<blank>";

/// Wordpiece inventory; id 0 is always the blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(pieces: Vec<String>) -> Result<Self> {
        if pieces.first().map(String::as_str) != Some(BLANK_PIECE) {
            return Err(Error::Invalid(format!("vocabulary must start with {BLANK_PIECE}")));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::Invalid(format!("empty piece at id {i}")));
            }
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate piece {p:?}")));
            }
        }
        Ok(Self { pieces, index })
    }

    /// Closed word-level vocabulary: one piece per distinct word, sorted.
    pub fn word_level<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut uniq: Vec<&str> = words.into_iter().collect();
        uniq.sort_unstable();
        uniq.dedup();
        let mut pieces = vec![BLANK_PIECE.to_string()];
        pieces.extend(uniq.into_iter().map(|w| format!("{WORD_BOUNDARY}{w}")));
        Self::new(pieces)
    }

    /// One piece per line.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.pieces.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: usize) -> Result<&str> {
        self.pieces.get(id).map(String::as_str).ok_or(Error::Range {
            what: "wordpiece id",
            value: id,
            limit: self.pieces.len(),
        })
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Each word is exactly one piece.
    #[default]
    WordLevel,
    /// Greedy longest match; the first piece carries the word-boundary marker.
    Subword,
}

impl Tokenizer {
    /// `None` when the word cannot be covered by the vocabulary.
    pub fn tokenize(self, vocab: &Vocab, word: &str) -> Option<Vec<usize>> {
        if word.is_empty() {
            return None;
        }
        match self {
            Tokenizer::WordLevel => vocab.id(&format!("{WORD_BOUNDARY}{word}")).map(|id| vec![id]),
            Tokenizer::Subword => {
                let mut out = Vec::new();
                let mut rest = word;
                while !rest.is_empty() {
                    let first = out.is_empty();
                    let (id, len) = rest
                        .char_indices()
                        .map(|(i, c)| i + c.len_utf8())
                        .rev()
                        .find_map(|end| {
                            let piece = &rest[..end];
                            let id = if first {
                                vocab.id(&format!("{WORD_BOUNDARY}{piece}"))
                            } else {
                                vocab.id(piece)
                            };
                            id.map(|id| (id, end))
                        })?;
                    out.push(id);
                    rest = &rest[len..];
                }
                Some(out)
            }
        }
    }
}
