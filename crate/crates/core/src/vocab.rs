//! Recognition symbols and the input-only decoder tokens.

use crate::{Error, Result};

const CHARSET: &str = "0123456789abcdefghijklmnopqrstuvwxyz";

/// Classifier width: 36 characters plus EOS.
pub const NUM_CLASSES: usize = 37;
/// Embedding table rows: classes plus MASK and BOS.
pub const NUM_INPUT_TOKENS: usize = 39;
pub const EOS: usize = 36;
pub const MASK: usize = 37;
pub const BOS: usize = 38;

/// Bijection between the 36 characters and indices `0..36`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocab;

impl Vocab {
    pub fn charset(&self) -> &'static str {
        CHARSET
    }

    pub fn index(&self, c: char) -> Option<usize> {
        match c {
            '0'..='9' => Some(c as usize - '0' as usize),
            'a'..='z' => Some(10 + c as usize - 'a' as usize),
            _ => None,
        }
    }

    pub fn char(&self, index: usize) -> Option<char> {
        CHARSET.as_bytes().get(index).map(|&b| b as char)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index(c)
                    .ok_or_else(|| Error::data(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Characters for indices `< 36`; EOS and input-only tokens are skipped.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens.iter().filter_map(|&t| self.char(t)).collect()
    }

    /// Display form used by decode traces: `_` for MASK, `#` for EOS.
    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| match t {
                MASK => '_',
                EOS => '#',
                BOS => '^',
                t => self.char(t).unwrap_or('?'),
            })
            .collect()
    }

    pub fn symbol(&self, token: usize) -> String {
        self.render(&[token])
    }
}
