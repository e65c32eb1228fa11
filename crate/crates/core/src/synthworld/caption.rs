use crate::conditioning::PromptTokens;
use crate::error::{Error, Result};

use super::palette::{color_name, Shape, NAMED_COLORS};
use super::SceneScript;

pub const PAD: usize = 0;

/// Closed word list used by captions and entity descriptions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut words: Vec<String> = ["<pad>", "a", "an", "and", "empty", "scene", "moving"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(NAMED_COLORS.iter().map(|(n, _)| n.to_string()));
        words.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        Vocabulary { words }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn shape_id(&self, shape: Shape) -> usize {
        self.id(shape.name()).expect("shapes are in the vocabulary")
    }

    pub fn shape_of(&self, id: usize) -> Option<Shape> {
        self.word(id).and_then(Shape::from_name)
    }

    /// Whitespace tokenization; unknown words are an error naming the word.
    pub fn tokenize(&self, text: &str, len: usize) -> Result<PromptTokens> {
        let ids = text
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.id(&w)
                    .ok_or_else(|| Error::Validation(format!("unknown word {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        PromptTokens::new(ids, len, PAD)
    }

    pub fn detokenize(&self, prompt: &PromptTokens) -> String {
        prompt
            .ids()
            .iter()
            .filter(|&&i| i != PAD)
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Template caption, e.g. "a red square and a blue circle moving".
pub fn caption_text(script: &SceneScript) -> String {
    if script.entities.is_empty() {
        return "an empty scene".to_string();
    }
    let parts: Vec<String> = script
        .entities
        .iter()
        .map(|e| {
            format!(
                "a {} {}",
                color_name(e.spec.color).unwrap_or("red"),
                e.spec.shape.name()
            )
        })
        .collect();
    format!("{} moving", parts.join(" and "))
}

pub fn build_caption(script: &SceneScript, vocab: &Vocabulary, len: usize) -> Result<PromptTokens> {
    vocab.tokenize(&caption_text(script), len)
}
