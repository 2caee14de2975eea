use std::collections::HashMap;
use std::path::Path;

use crate::encoders::{EOS_ID, SOS_ID};
use crate::error::{Error, Result};

/// Word list; a word's id is its (0-based) line number.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[SOS_ID] != "<sos>" || words[EOS_ID] != "<eos>" {
            return Err(Error::Data("vocabulary must start with <sos>, <eos>".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// One id per word, order preserved, truncated to `max_len`.
    pub fn tokenize<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> Result<Vec<usize>> {
        let missing: Vec<&str> = words.iter().map(AsRef::as_ref).filter(|w| self.id(w).is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("out-of-vocabulary words: {}", missing.join(", "))));
        }
        Ok(words.iter().take(max_len).map(|w| self.index[w.as_ref()]).collect())
    }

    /// Whitespace-split a caption and tokenize it.
    pub fn tokenize_text(&self, caption: &str, max_len: usize) -> Result<Vec<usize>> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        self.tokenize(&words, max_len)
    }
}
