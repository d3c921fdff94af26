use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
/// Names of the 3×3 cells in raster order.
pub const POSITIONS: [&str; 9] = [
    "top-left",
    "top",
    "top-right",
    "left",
    "center",
    "right",
    "bottom-left",
    "bottom",
    "bottom-right",
];
const TEMPLATE: [&str; 6] = ["a", "at", "what", "color", "is", "the"];
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Bijective word ↔ id table; id 0 is padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words = SPECIALS
            .iter()
            .chain(&TEMPLATE)
            .chain(&COLORS)
            .chain(&SHAPES)
            .chain(&POSITIONS)
            .map(|w| w.to_string())
            .collect();
        Self { words }
    }
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.get(..3).map(|w| w == SPECIALS) != Some(true) {
            return Err(Error::format("vocab", "must start with <pad> <bos> <eos>"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = words.iter().find(|w| !seen.insert(w.as_str())) {
            return Err(Error::format("vocab", format!("duplicate word {dup:?}")));
        }
        Ok(Self { words })
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

    pub fn id(&self, word: &str) -> Result<u32> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| i as u32)
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn color_ids(&self) -> Vec<u32> {
        COLORS.iter().map(|c| self.id(c).expect("color in vocab")).collect()
    }

    /// Whitespace split, wrapped in BOS/EOS.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = vec![BOS];
        for w in text.split_whitespace() {
            ids.push(self.id(w)?);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Inverse of [`Vocab::tokenize`]; special tokens are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            let w = self
                .word(id)
                .ok_or_else(|| Error::OutOfVocabulary(format!("#{id}")))?;
            words.push(w);
        }
        Ok(words.join(" "))
    }
}
